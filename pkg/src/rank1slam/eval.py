"""Trajectory alignment and error metrics."""
from __future__ import annotations

import json

import numpy as np

from .geometry import Rotation, SimilarityTransform


class DegenerateAlignment(ValueError):
    pass


def align_sim3(estimated, ground_truth, allow_collinear=False) -> SimilarityTransform:
    """Least-squares similarity taking ``estimated`` onto ``ground_truth`` (Umeyama).

    Collinear estimates leave the spin about their line undetermined and are
    rejected unless ``allow_collinear``; any returned spin then gives the
    same residuals, which is all the error metrics need.
    """
    x = np.asarray(estimated, dtype=float).reshape(-1, 3)
    y = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    if len(x) != len(y):
        raise ValueError("trajectories differ in length")
    if len(x) < 3:
        raise DegenerateAlignment("need at least 3 correspondences")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    var_x = np.mean(np.sum(xc * xc, axis=1))
    sx = np.linalg.svd(xc, compute_uv=False)
    if var_x <= 0 or sx[0] <= 1e-300:
        raise DegenerateAlignment("estimated positions coincide")
    if sx[1] <= 1e-10 * sx[0] and not allow_collinear:
        raise DegenerateAlignment("estimated positions are collinear")
    cov = yc.T @ xc / len(x)
    U, S, Vt = np.linalg.svd(cov)
    E = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        E[2, 2] = -1.0
    R = U @ E @ Vt
    s = float(np.trace(np.diag(S) @ E) / var_x)
    t = my - s * R @ mx
    return SimilarityTransform(s, Rotation.from_matrix(R), t)


def apply_alignment(T: SimilarityTransform, x):
    return T.apply(np.asarray(x, dtype=float))


def normalized_position_error(estimated, ground_truth):
    """Per-camera error divided by the mean spacing of neighbouring ground-truth cameras."""
    x = np.asarray(estimated, dtype=float).reshape(-1, 3)
    y = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    if len(x) != len(y):
        raise ValueError("trajectories differ in length")
    if len(y) < 2:
        raise ValueError("normalizer undefined for a single camera")
    spacing = np.mean(np.linalg.norm(np.diff(y, axis=0), axis=1))
    if spacing <= 0:
        raise ValueError("normalizer undefined: cameras coincide")
    return np.linalg.norm(x - y, axis=1) / spacing


def aligned_normalized_error(estimated, ground_truth):
    T = align_sim3(estimated, ground_truth, allow_collinear=True)
    return normalized_position_error(T.apply(np.asarray(estimated, dtype=float)), ground_truth)


def keyframe_rmse(aligned, ground_truth) -> float:
    x = np.asarray(aligned, dtype=float).reshape(-1, 3)
    y = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    if len(x) != len(y) or len(x) == 0:
        raise ValueError("need equal, non-empty trajectories")
    return float(np.sqrt(np.mean(np.sum((x - y) ** 2, axis=1))))


def trajectory_metrics(estimated, ground_truth) -> dict:
    est = np.asarray(estimated, dtype=float).reshape(-1, 3)
    gt = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    T = align_sim3(est, gt, allow_collinear=True)
    al = T.apply(est)
    err = normalized_position_error(al, gt)
    return {
        "n_keyframes": len(gt),
        "rmse": keyframe_rmse(al, gt),
        "normalized_error_mean": float(err.mean()),
        "normalized_error_max": float(err.max()),
        "alignment_scale": float(T.scale),
    }


def _scalar(v):
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, (np.integer, int, bool, np.bool_)):
        return str(v if isinstance(v, bool) else int(v))
    return str(v)


def format_metrics(metrics: dict, prefix="") -> str:
    """Flat ``key value`` lines, nested keys joined with dots, sorted."""
    lines = []
    for k in sorted(metrics):
        v = metrics[k]
        key = prefix + str(k)
        if isinstance(v, dict):
            lines.append(format_metrics(v, key + ".").rstrip("\n"))
        elif isinstance(v, (list, tuple, np.ndarray)):
            lines.append("%s %s" % (key, " ".join(_scalar(x) for x in v)))
        else:
            lines.append("%s %s" % (key, _scalar(v)))
    return "\n".join(line for line in lines if line) + "\n"


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1) + "\n"


def read_trajectory(source) -> dict:
    """Parse ``traj``/``gt`` records (``<id> qw qx qy qz cx cy cz``) into {frame id: centre}."""
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source) as fh:
            text = fh.read()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts or parts[0] not in ("traj", "gt"):
            continue
        if len(parts) != 9:
            raise ValueError("line %d: expected 8 fields after %r" % (lineno, parts[0]))
        try:
            out[int(parts[1])] = np.array([float(v) for v in parts[6:9]])
        except ValueError as exc:
            raise ValueError("line %d: %s" % (lineno, exc)) from None
    return out
