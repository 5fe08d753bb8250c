"""Translation direction between a keyframe and a frame with known rotation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Rotation


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 200
    # angular distance (radians) of a rotated ray from its epipolar plane;
    # about 2.3x the per-ray noise of 3 px at a 693 px focal length
    threshold: float = 1e-2
    # a refit whose two smallest singular values are closer than this ratio
    # is reported as low parallax
    low_parallax_ratio: float = 10.0


@dataclass(frozen=True)
class RelativeMotion:
    """Pose of frame j relative to keyframe i.

    ``translation_dir`` points from the keyframe centre towards frame j's
    centre and is expressed in keyframe coordinates.
    """

    rotation: Rotation
    translation_dir: np.ndarray
    inlier_ids: np.ndarray
    low_parallax: bool = False
    singular_values: tuple = ()


def epipolar_normals(bearings_i, bearings_j, R):
    """Normals ``p_i x R^T p_j`` of the epipolar planes, in keyframe coordinates."""
    q = bearings_j @ R  # rows of R^T p_j
    return np.cross(bearings_i, q), q


def epipolar_residuals(t, normals, bearings_i):
    """Angle between each rotated frame ray and the plane spanned by ``t`` and the keyframe ray."""
    num = np.abs(normals @ t)
    den = np.linalg.norm(np.cross(bearings_i, t), axis=1)
    return num / np.maximum(den, 1e-12)


def two_ray_depths(t, p, q):
    """Depths ``lam, mu`` of the closest points on rays ``lam p`` and ``t + mu q``."""
    pq = np.einsum("ij,ij->i", p, q)
    pt = p @ t
    qt = q @ t
    det = pq * pq - 1.0
    safe = np.where(np.abs(det) > 1e-15, det, np.nan)
    lam = (pq * qt - pt) / safe
    mu = (qt - pq * pt) / safe
    return lam, mu


def cheirality_sign(t, p, q):
    lam, mu = two_ray_depths(t, p, q)
    front = np.count_nonzero((lam > 0) & (mu > 0))
    back = np.count_nonzero((lam < 0) & (mu < 0))
    return -1.0 if back > front else 1.0


def null_direction(normals):
    _, s, vt = np.linalg.svd(normals, full_matrices=False)
    return vt[-1], s


def two_point_translation(bearings_i, bearings_j, R, config: RansacConfig | None = None,
                          seed=0, track_ids=None) -> RelativeMotion:
    """RANSAC over two-point hypotheses, refit on inliers, sign by cheirality."""
    config = config or RansacConfig()
    p = np.asarray(bearings_i, dtype=float).reshape(-1, 3)
    pj = np.asarray(bearings_j, dtype=float).reshape(-1, 3)
    Rm = R.matrix if isinstance(R, Rotation) else np.asarray(R, dtype=float)
    n = len(p)
    if n < 2 or len(pj) != n:
        raise ValueError("two_point_translation needs at least 2 paired correspondences")
    ids = np.arange(n) if track_ids is None else np.asarray(track_ids)
    normals, q = epipolar_normals(p, pj, Rm)
    nn = np.linalg.norm(normals, axis=1)
    scale = max(float(nn.max()), 1e-300)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 17])))
    thr2 = config.threshold ** 2
    # draw every minimal sample up front: first index uniform, second uniform
    # over the remaining n - 1
    a = rng.integers(0, n, size=config.iterations)
    b = rng.integers(0, n - 1, size=config.iterations)
    b = b + (b >= a)
    T = np.cross(normals[a], normals[b])
    nt = np.linalg.norm(T, axis=1)
    ok = (nt > 1e-10 * np.maximum(nn[a] * nn[b], 1e-300)) & (nn[a] >= 1e-12 * scale) & (nn[b] >= 1e-12 * scale)
    if not ok.any() or scale < 1e-14:
        raise DegenerateGeometryError("every two-point hypothesis is degenerate (no parallax)")
    T = T[ok] / nt[ok, None]
    # MSAC cost of every hypothesis at once
    num = np.abs(T @ normals.T)
    den = np.linalg.norm(np.cross(p[None, :, :], T[:, None, :]), axis=2)
    r = num / np.maximum(den, 1e-12)
    score = np.minimum(r * r, thr2).sum(axis=1)
    best_t = T[int(np.argmin(score))]

    t = best_t
    for _ in range(2):
        inl = epipolar_residuals(t, normals, p) < config.threshold
        if inl.sum() < 2:
            break
        t_new, s = null_direction(normals[inl])
        t = t_new if t_new @ t >= 0 else -t_new
    inl = epipolar_residuals(t, normals, p) < config.threshold
    if inl.sum() >= 2:
        _, s = null_direction(normals[inl])
    else:
        _, s = null_direction(normals)
        inl = np.ones(n, bool)
    low = bool(s[1] < config.low_parallax_ratio * s[2]) if len(s) == 3 else True
    t = t * cheirality_sign(t, p[inl], q[inl])
    return RelativeMotion(Rotation.from_matrix(Rm) if not isinstance(R, Rotation) else R,
                          t, ids[inl], low, tuple(float(v) for v in s))
