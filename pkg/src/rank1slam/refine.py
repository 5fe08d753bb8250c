"""Local map refinement: multi-view midpoint triangulation and local bundle adjustment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .geometry import CameraPose, Intrinsics, exp_so3_matrix
from .rank1vo import BA_REFINED, TRIANGULATED, LocalMap

log = logging.getLogger(__name__)


class DegenerateTriangulation(ValueError):
    pass


def triangulate_rays(centers, directions, cond_max=1e12):
    """Least-squares point closest to rays ``centers[i] + s directions[i]``.

    Returns ``(point, in_front)`` where ``in_front`` is True when the point
    lies at positive depth along every ray.
    """
    c = np.asarray(centers, dtype=float).reshape(-1, 3)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    if len(c) < 2:
        raise DegenerateTriangulation("need at least two observations")
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    if np.all(np.linalg.norm(np.cross(d, d[0]), axis=1) < 1e-9):
        raise DegenerateTriangulation("all rays are parallel")
    P = np.eye(3)[None] - d[:, :, None] * d[:, None, :]
    A = P.sum(axis=0)
    b = np.einsum("nij,nj->i", P, c)
    if np.linalg.cond(A) > cond_max:
        raise DegenerateTriangulation("normal matrix is ill-conditioned")
    X = np.linalg.solve(A, b)
    depth = np.einsum("ij,ij->i", X - c, d)
    return X, bool(np.all(depth > 0))


def triangulate_midpoint(observations):
    """Triangulate from ``[(CameraPose, bearing), ...]`` (bearing in camera frame)."""
    obs = list(observations)
    if len(obs) < 2:
        raise DegenerateTriangulation("need at least two observations")
    centers = np.array([pose.position for pose, _ in obs])
    dirs = np.array([pose.rotation.matrix.T @ np.asarray(b, dtype=float) for pose, b in obs])
    return triangulate_rays(centers, dirs)


def ray_distance_cost(X, centers, directions):
    d = np.asarray(directions, dtype=float)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    r = (X - centers) - np.einsum("ij,ij->i", X - centers, d)[:, None] * d
    return float(np.sum(r * r))


@dataclass
class BAConfig:
    lambda0: float = 1e-4
    lambda_max: float = 1e8
    max_iters: int = 100
    rel_tol: float = 1e-10
    outlier_px: float = 5.0


@dataclass
class Observations:
    """Flat observation arrays for one local map (keyframe rows excluded)."""

    frame: np.ndarray   # index into LocalMap.frame_ids
    point: np.ndarray   # index into LocalMap.track_ids
    pixel: np.ndarray   # (N, 2)

    def __len__(self):
        return len(self.frame)


def gather_observations(lmap: LocalMap, data, include_keyframe=False) -> Observations:
    """Collect every observation of the map's points in the map's frames."""
    lookup = lmap.track_ids
    f_idx, p_idx, px = [], [], []
    start = 0 if include_keyframe else 1
    for i, fid in enumerate(lmap.frame_ids[start:], start=start):
        fr = data.frame(fid)
        common, a, b = np.intersect1d(fr.ids, lookup, return_indices=True)
        f_idx.append(np.full(len(common), i))
        p_idx.append(b)
        px.append(fr.pixels[a])
    if not f_idx:
        return Observations(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2)))
    return Observations(np.concatenate(f_idx).astype(np.int64), np.concatenate(p_idx).astype(np.int64),
                        np.concatenate(px))


def reprojection_residuals(lmap: LocalMap, obs: Observations, K: Intrinsics):
    res, _, _, z = kernels.reprojection_jacobians(lmap.rotations, lmap.positions, lmap.anchors,
                                                  lmap.inv_depth, obs.frame, obs.point, obs.pixel,
                                                  K.fx, K.fy, K.cx, K.cy)
    return res, z


def reprojection_cost(lmap, obs, K) -> float:
    res, _ = reprojection_residuals(lmap, obs, K)
    return float(np.sum(res * res))


@dataclass
class BAResult:
    map: LocalMap
    iterations: int
    cost: float
    initial_cost: float
    stalled: bool = False
    history: list = field(default_factory=list)
    dropped_behind: int = 0


def _tangent_basis(c):
    n = c / np.linalg.norm(c)
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return np.stack([u, np.cross(n, u)], axis=1)


class _Problem:
    """Index bookkeeping for the reduced camera system."""

    def __init__(self, lmap: LocalMap, obs: Observations, scale_frame: int):
        m = len(lmap.frame_ids)
        self.m = m
        self.scale_frame = scale_frame
        sizes = np.zeros(m, np.int64)
        sizes[1:] = 6
        if scale_frame is not None:
            sizes[scale_frame] = 5
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_cam = int(self.offsets[-1])
        self.n_pts = len(lmap.track_ids)
        self.obs = obs
        # keyframe observations carry no parameters
        self.use = obs.frame != 0


def local_bundle_adjust(lmap: LocalMap, obs: Observations, K: Intrinsics, config: BAConfig | None = None,
                        fix_scale=True) -> BAResult:
    """Levenberg-Marquardt over non-keyframe poses and inverse depths.

    The keyframe pose is fixed and, with ``fix_scale``, the distance of the
    first non-keyframe camera from the keyframe is held at its input value.
    """
    cfg = config or BAConfig()
    if len(lmap.frame_ids) < 2:
        raise ValueError("bundle adjustment needs at least two frames")
    cur = lmap.copy()
    scale_frame = None
    if fix_scale:
        scale_frame = 1
        if np.linalg.norm(cur.positions[scale_frame]) == 0:
            raise ValueError("scale frame coincides with the keyframe")
    prob = _Problem(cur, obs, scale_frame)
    o = obs
    sel = prob.use
    of, op, opx = o.frame[sel], o.point[sel], o.pixel[sel]

    def evaluate(mp):
        return kernels.reprojection_jacobians(mp.rotations, mp.positions, mp.anchors, mp.inv_depth,
                                              of, op, opx, K.fx, K.fy, K.cx, K.cy)

    res, Jp, Jd, z = evaluate(cur)
    behind = ~(z > 0)
    n_behind = int(behind.sum())
    if n_behind:
        # observations of points behind their camera carry no usable residual
        of, op, opx = of[~behind], op[~behind], opx[~behind]
        res, Jp, Jd, z = evaluate(cur)
    cost = float(np.sum(res * res))
    initial = cost
    lam = cfg.lambda0
    history = [cost]
    it = 0
    stalled = False
    radius = np.linalg.norm(cur.positions[scale_frame]) if scale_frame is not None else None
    while it < cfg.max_iters:
        if cost < 1e-20:
            break
        B = _tangent_basis(cur.positions[scale_frame]) if scale_frame is not None else None
        H_cc, H_cd, H_dd, g_c, g_d = _normal_equations(prob, of, op, res, Jp, Jd, B)
        it += 1
        accepted = False
        while True:
            dc, dd, pred = _solve_damped(H_cc, H_cd, H_dd, g_c, g_d, lam)
            if pred <= cfg.rel_tol * cost * 1e-2:
                # model predicts no meaningful decrease: at a stationary point
                accepted = None
                break
            cand = _apply_step(cur, prob, dc, dd, B, radius)
            if cand is not None:
                r2, Jp2, Jd2, z2 = evaluate(cand)
                new_cost = float(np.sum(r2 * r2)) if np.all(z2 > 0) else np.inf
                if new_cost <= cost:
                    accepted = True
                    break
            lam *= 10.0
            if lam > cfg.lambda_max:
                break
        if accepted is None:
            break
        if not accepted:
            stalled = True
            log.debug("bundle adjustment stalled at cost %g", cost)
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        cur, res, Jp, Jd, z, cost = cand, r2, Jp2, Jd2, z2, new_cost
        lam = max(lam / 10.0, 1e-12)
        history.append(cost)
        if rel < cfg.rel_tol:
            break
    cur.state = BA_REFINED
    return BAResult(cur, it, cost, initial, stalled, history, n_behind)


def _normal_equations(prob, of, op, res, Jp, Jd, B):
    m, n = prob.m, prob.n_pts
    H_cc = np.zeros((prob.n_cam, prob.n_cam))
    H_cd = np.zeros((prob.n_cam, n))
    g_c = np.zeros(prob.n_cam)
    if B is not None:
        sf = prob.scale_frame
        rows = of == sf
        Jr = Jp[rows]
        # centre increment restricted to the sphere's tangent plane
        Jred = np.concatenate([Jr[:, :, :3], Jr[:, :, 3:] @ B, np.zeros((len(Jr), 2, 1))], axis=2)
        Jp = Jp.copy()
        Jp[rows] = Jred
    # per-observation blocks, summed per frame with a sparse indicator
    N = len(of)
    JpT = Jp.transpose(0, 2, 1)
    blk = JpT @ Jp
    gb = (JpT @ res[..., None])[..., 0]
    cross = (JpT @ Jd[..., None])[..., 0]
    H_dd = np.bincount(op, weights=np.sum(Jd * Jd, axis=1), minlength=n)
    g_d = np.bincount(op, weights=np.sum(Jd * res, axis=1), minlength=n)
    ind = sp.csr_matrix((np.ones(N), (of, np.arange(N))), shape=(m, N))
    Hf = (ind @ blk.reshape(N, 36)).reshape(m, 6, 6)
    gf = ind @ gb
    # each (frame, point) pair is observed at most once
    H6 = np.zeros((m, 6, n))
    H6[of, :, op] = cross
    for f in range(1, m):
        k = prob.sizes[f]
        o = prob.offsets[f]
        H_cc[o:o + k, o:o + k] = Hf[f, :k, :k]
        g_c[o:o + k] = gf[f, :k]
        H_cd[o:o + k] = H6[f, :k]
    return H_cc, H_cd, H_dd, g_c, g_d


def _solve_damped(H_cc, H_cd, H_dd, g_c, g_d, lam):
    """Marquardt-damped Gauss-Newton step via the point Schur complement.

    Returns the increments and the model-predicted cost decrease.
    """
    Dc = H_cc + lam * np.diag(np.maximum(np.diag(H_cc), 1e-12))
    Dd = H_dd + lam * np.maximum(H_dd, 1e-12)
    inv_d = 1.0 / Dd
    S = Dc - (H_cd * inv_d) @ H_cd.T
    rhs = -g_c + H_cd @ (inv_d * g_d)
    try:
        dc = np.linalg.solve(S, rhs)
    except np.linalg.LinAlgError:
        dc = np.linalg.lstsq(S, rhs, rcond=None)[0]
    dd = -inv_d * (g_d + H_cd.T @ dc)
    # decrease of the Gauss-Newton model: -(2 g.dx + dx.H.dx)
    Hx_c = H_cc @ dc + H_cd @ dd
    Hx_d = H_cd.T @ dc + H_dd * dd
    pred = -(2 * (g_c @ dc + g_d @ dd) + dc @ Hx_c + dd @ Hx_d)
    return dc, dd, float(pred)


def _apply_step(mp, prob, dc, dd, B, radius):
    new_d = mp.inv_depth + dd
    if np.any(new_d <= 0):
        return None
    out = mp.copy()
    out.inv_depth = new_d
    for f in range(1, prob.m):
        o = prob.offsets[f]
        k = prob.sizes[f]
        step = dc[o:o + k]
        out.rotations[f] = exp_so3_matrix(step[:3]) @ mp.rotations[f]
        if k == 6:
            out.positions[f] = mp.positions[f] + step[3:6]
        else:
            c = mp.positions[f] + B @ step[3:5]
            out.positions[f] = c * (radius / np.linalg.norm(c))
    return out


def drop_outlier_tracks(lmap: LocalMap, obs: Observations, K: Intrinsics, max_px=5.0):
    """Remove points whose RMS reprojection error over their observations exceeds ``max_px``.

    Points seen behind any camera are removed as well.
    """
    res, z = reprojection_residuals(lmap, obs, K)
    sq = np.sum(res * res, axis=1)
    sq[z <= 0] = np.inf
    n = len(lmap.track_ids)
    total = np.zeros(n)
    np.add.at(total, obs.point, sq)
    count = np.bincount(obs.point, minlength=n)
    rms = np.sqrt(total / np.maximum(count, 1))
    keep = rms <= max_px
    out = lmap.copy()
    out.track_ids = lmap.track_ids[keep]
    out.anchors = lmap.anchors[keep]
    out.inv_depth = lmap.inv_depth[keep]
    remap = -np.ones(len(keep), np.int64)
    remap[keep] = np.arange(keep.sum())
    m2 = keep[obs.point]
    new_obs = Observations(obs.frame[m2], remap[obs.point[m2]], obs.pixel[m2])
    return out, new_obs, np.flatnonzero(~keep)


def augment_with_partial_tracks(lmap: LocalMap, data, kf_track_ids, kf_bearings, min_obs=2,
                                ratio=0.30, force=False) -> LocalMap:
    """Triangulate keyframe tracks that only partially span the window.

    Runs when factorized points are fewer than ``ratio`` of the keyframe's
    tracks (or when ``force``). Points are stored as keyframe-anchored
    inverse depths; those behind any camera are discarded.
    """
    have = set(int(t) for t in lmap.track_ids)
    if not force and len(have) >= ratio * len(kf_track_ids):
        return lmap
    per_track: dict[int, list] = {}
    for i, fid in enumerate(lmap.frame_ids[1:], start=1):
        fr = data.frame(fid)
        Rt = lmap.rotations[i].T
        for tid, b in zip(fr.ids, fr.bearings):
            t = int(tid)
            if t in have:
                continue
            per_track.setdefault(t, []).append((lmap.positions[i], Rt @ b))
    kf_lookup = {int(t): i for i, t in enumerate(kf_track_ids)}
    new_ids, new_anchor, new_d = [], [], []
    for t in sorted(per_track):
        if t not in kf_lookup:
            continue
        rays = per_track[t]
        if len(rays) + 1 < min_obs:
            continue
        anchor = kf_bearings[kf_lookup[t]]
        centers = np.array([np.zeros(3)] + [c for c, _ in rays])
        dirs = np.array([anchor] + [d for _, d in rays])
        try:
            X, front = triangulate_rays(centers, dirs)
        except DegenerateTriangulation:
            continue
        depth = X @ anchor
        if not front or depth <= 0:
            continue
        new_ids.append(t)
        new_anchor.append(anchor)
        new_d.append(1.0 / depth)
    if not new_ids:
        return lmap
    out = lmap.copy()
    order = np.argsort(np.concatenate([lmap.track_ids, new_ids]))
    out.track_ids = np.concatenate([lmap.track_ids, np.array(new_ids, np.int64)])[order]
    out.anchors = np.concatenate([lmap.anchors, np.array(new_anchor).reshape(-1, 3)])[order]
    out.inv_depth = np.concatenate([lmap.inv_depth, np.array(new_d)])[order]
    out.state = TRIANGULATED
    return out
