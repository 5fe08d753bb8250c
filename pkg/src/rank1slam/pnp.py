"""Absolute pose from 3D-2D correspondences: 6-point DLT inside RANSAC, then LM."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import CameraPose, Intrinsics, Rotation, exp_so3_matrix, pixel_to_bearing

METHOD = "dlt6-ransac+lm"


class PnPFailure(RuntimeError):
    pass


@dataclass
class PnPConfig:
    iterations: int = 500
    threshold_px: float = 2.0
    min_inliers: int = 6
    lm_iters: int = 50


@dataclass
class PnPResult:
    rotation: np.ndarray   # world-to-camera
    position: np.ndarray   # camera centre
    inliers: np.ndarray    # bool mask
    cost: float
    lm_iters: int = 0

    @property
    def pose(self) -> CameraPose:
        return CameraPose(Rotation.from_matrix(self.rotation), self.position)


def _normalize_points(X):
    mu = X.mean(axis=0)
    s = np.sqrt(3.0) / max(np.sqrt(np.mean(np.sum((X - mu) ** 2, axis=1))), 1e-300)
    return mu, s


def _design(Xh, b):
    """Rows of b x (P Xh) = 0 for the 12 entries of P (two rows per point)."""
    n = len(b)
    A = np.zeros(b.shape[:-1] + (3, 12))
    # b x (P X) components; P rows p1, p2, p3
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    A[..., 0, 4:8] = -bz[..., None] * Xh
    A[..., 0, 8:12] = by[..., None] * Xh
    A[..., 1, 0:4] = bz[..., None] * Xh
    A[..., 1, 8:12] = -bx[..., None] * Xh
    A[..., 2, 0:4] = -by[..., None] * Xh
    A[..., 2, 4:8] = bx[..., None] * Xh
    del n
    return A.reshape(b.shape[:-2] + (-1, 12))


def _extract(P, Xn_front):
    """Project a 3x4 DLT solution onto a rigid pose; returns (R, t) or None."""
    M, p4 = P[:, :3], P[:, 3]
    U, S, Vt = np.linalg.svd(M)
    if S[0] <= 0 or S[2] / S[0] < 1e-8:
        return None
    R = U @ Vt
    lam = S.mean()
    if np.linalg.det(R) < 0:
        R, M, p4 = -R, -M, -p4
    t = p4 / lam
    z = Xn_front @ R[2] + t[2]
    if np.count_nonzero(z > 0) < len(z) / 2:
        return None
    return R, t


def _extract_batch(Ps, Xn):
    """Vectorized ``_extract`` over a stack of DLT solutions."""
    M, p4 = Ps[:, :, :3], Ps[:, :, 3]
    U, S, Vt = np.linalg.svd(M)
    valid = (S[:, 0] > 0) & (S[:, 2] >= 1e-8 * S[:, 0])
    R = U @ Vt
    sign = np.where(np.linalg.det(R) < 0, -1.0, 1.0)
    R = R * sign[:, None, None]
    t = p4 * sign[:, None] / np.maximum(S.mean(axis=1), 1e-300)[:, None]
    z = Xn @ R[:, 2].T + t[:, 2]
    valid &= np.count_nonzero(z > 0, axis=0) >= Xn.shape[0] / 2
    return R, t, valid


def dlt_pose(X, bearings):
    """Direct linear pose from >= 6 points and unit bearings (world-to-camera R, centre c)."""
    X = np.asarray(X, dtype=float)
    b = np.asarray(bearings, dtype=float)
    if len(X) < 6:
        raise PnPFailure("DLT needs at least 6 correspondences")
    mu, s = _normalize_points(X)
    Xn = (X - mu) * s
    Xh = np.hstack([Xn, np.ones((len(Xn), 1))])
    _, _, vt = np.linalg.svd(_design(Xh, b))
    out = _extract(vt[-1].reshape(3, 4), Xn)
    if out is None:
        raise PnPFailure("degenerate DLT solution")
    R, t = out
    # undo the normalization: Xn = s (X - mu)
    c = mu - R.T @ t / s
    return R, c


def reprojection_errors(R, c, X, px, K: Intrinsics):
    Xc = (X - c) @ R.T
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.stack([K.fx * Xc[:, 0] / z + K.cx, K.fy * Xc[:, 1] / z + K.cy], axis=1)
    e = np.linalg.norm(u - px, axis=1)
    e[~(z > 0)] = np.inf
    return e


def refine_pose(R, c, X, px, K: Intrinsics, max_iters=50, rel_tol=1e-12):
    """Levenberg-Marquardt on reprojection error over one camera pose."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    nrm = np.linalg.norm(X, axis=1)
    anchors = X / nrm[:, None]
    invd = 1.0 / nrm
    f = np.zeros(n, np.int64)
    p = np.arange(n, dtype=np.int64)

    def ev(R, c):
        res, J, _, z = kernels.reprojection_jacobians(R[None], c[None], anchors, invd, f, p,
                                                      np.asarray(px, dtype=float), K.fx, K.fy, K.cx, K.cy)
        return res, J, z

    res, J, z = ev(R, c)
    cost = float(np.sum(res * res)) if np.all(z > 0) else np.inf
    lam = 1e-4
    it = 0
    for it in range(1, max_iters + 1):
        Jm = J.reshape(-1, 6)
        H = Jm.T @ Jm
        g = Jm.T @ res.reshape(-1)
        improved = False
        while lam < 1e8:
            try:
                dx = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            R2 = exp_so3_matrix(dx[:3]) @ R
            c2 = c + dx[3:]
            r2, J2, z2 = ev(R2, c2)
            c2cost = float(np.sum(r2 * r2)) if np.all(z2 > 0) else np.inf
            if c2cost <= cost:
                improved = True
                break
            lam *= 10
        if not improved:
            break
        rel = (cost - c2cost) / max(cost, 1e-300)
        R, c, res, J, cost = R2, c2, r2, J2, c2cost
        lam = max(lam / 10, 1e-12)
        if rel < rel_tol or cost < 1e-24:
            break
    return R, c, cost, it


def pnp_ransac(X, px, K: Intrinsics, config: PnPConfig | None = None, seed=0) -> PnPResult:
    """Robust camera pose for world points ``X`` seen at pixels ``px``."""
    cfg = config or PnPConfig()
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    px = np.asarray(px, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < 6:
        raise PnPFailure("PnP needs at least 6 correspondences, got %d" % n)
    b = pixel_to_bearing(px, K)
    mu, s = _normalize_points(X)
    Xn = (X - mu) * s
    Xh = np.hstack([Xn, np.ones((n, 1))])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 23])))
    samples = np.argsort(rng.random((cfg.iterations, n)), axis=1)[:, :6]
    A = _design(Xh[samples], b[samples])
    # hypotheses only need the null vector; the inlier refit below uses an SVD
    _, V = np.linalg.eigh(A.transpose(0, 2, 1) @ A)
    Ps = V[:, :, 0].reshape(-1, 3, 4)
    Rs, ts, valid = _extract_batch(Ps, Xn)
    if not valid.any():
        raise PnPFailure("no non-degenerate DLT hypothesis")
    Rs, ts = Rs[valid], ts[valid]
    cs = mu - np.einsum("hji,hj->hi", Rs, ts) / s
    # batched MSAC score over all hypotheses
    Xc = np.matmul(X[None] - cs[:, None], Rs.transpose(0, 2, 1))
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = K.fx * Xc[..., 0] / z + K.cx - px[None, :, 0]
        dv = K.fy * Xc[..., 1] / z + K.cy - px[None, :, 1]
    e2 = du * du + dv * dv
    e2[~(z > 0)] = np.inf
    thr = cfg.threshold_px
    score = np.minimum(e2, thr * thr).sum(axis=1)
    h = int(np.argmin(score))
    best = (Rs[h], cs[h])
    R, c = best
    inl = reprojection_errors(R, c, X, px, K) < thr
    if inl.sum() >= 6:
        try:
            R, c = dlt_pose(X[inl], b[inl])
        except PnPFailure:
            pass
    # LM on the inlier set, then re-select inliers once and polish
    total = 0
    for _ in range(2):
        inl = reprojection_errors(R, c, X, px, K) < thr
        if inl.sum() < cfg.min_inliers:
            raise PnPFailure("only %d inliers" % inl.sum())
        R, c, cost, it = refine_pose(R, c, X[inl], px[inl], K, cfg.lm_iters)
        total += it
    inl = reprojection_errors(R, c, X, px, K) < thr
    return PnPResult(R, c, inl, cost, total)
