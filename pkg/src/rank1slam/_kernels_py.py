"""Pure numpy implementations of the hot kernels.

Each function here has a compiled twin in ``_kernels.pyx`` with the same
signature and semantics; ``rank1slam.kernels`` picks one at import time.
"""
import numpy as np

STATUS_OK = 0
STATUS_PARALLEL = 1
STATUS_BEHIND = 2

DET_EPS = 1e-9


def _aligning_batch(u, v):
    """Stack of rotations taking rows of ``u`` onto rows of ``v``."""
    n = len(u)
    k = np.cross(u, v)
    s2 = np.einsum("ij,ij->i", k, k)
    c = np.einsum("ij,ij->i", u, v)
    K = np.zeros((n, 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(c >= 0, 1.0 / (1.0 + c), (1.0 - c) / s2)
        R = np.eye(3) + K + f[:, None, None] * (K @ K)
    anti = (s2 < 1e-24) & (c < 0)
    for i in np.flatnonzero(anti):
        a = None
        for e in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
            w = e - (e @ u[i]) * u[i]
            if np.linalg.norm(w) > 1e-6:
                a = w / np.linalg.norm(w)
                break
        R[i] = 2.0 * np.outer(a, a) - np.eye(3)
    return R


def constraint_vectors(t, P, Q):
    """Per-track camera-point vectors for one frame.

    ``t`` (3,) unit translation direction, ``P`` (n, 3) keyframe bearings,
    ``Q`` (n, 3) frame bearings rotated into the keyframe. Returns
    ``alpha, beta, V, status`` where ``V[k] = A_k @ P[k]`` with
    ``A_k = (alpha R(P->t) + I - beta R(P->Q)) / 2``.
    """
    t = np.asarray(t, dtype=float)
    P = np.ascontiguousarray(P, dtype=float)
    Q = np.ascontiguousarray(Q, dtype=float)
    n = len(P)
    tq = Q @ t
    tp = P @ t
    qp = np.einsum("ij,ij->i", Q, P)
    det = 1.0 - tq * tq
    status = np.zeros(n, dtype=np.int8)
    ok = np.abs(det) >= DET_EPS
    status[~ok] = STATUS_PARALLEL
    safe = np.where(ok, det, 1.0)
    alpha = np.where(ok, (tp - tq * qp) / safe, 0.0)
    beta = np.where(ok, (qp - tq * tp) / safe, 0.0)
    status[ok & ((alpha <= 0) | (beta <= 0))] = STATUS_BEHIND

    Rw = _aligning_batch(P, np.broadcast_to(t, P.shape))
    Rt = _aligning_batch(P, Q)
    A = 0.5 * (alpha[:, None, None] * Rw + np.eye(3) - beta[:, None, None] * Rt)
    V = np.einsum("nij,nj->ni", A, P)
    V[status == STATUS_PARALLEL] = 0.0
    return alpha, beta, V, status


def rank1_als(M, mask, D0, tol, max_iters):
    """Alternating rank-1 least squares over the present cells.

    ``M`` (m, 3, n) blocks, ``mask`` (m, n) uint8, ``D0`` (n,) start.
    Returns ``C (m, 3), D (n,), iters, residuals, converged`` with
    ``||C|| = 1`` and ``residuals[i]`` the Frobenius misfit after sweep ``i``.
    """
    M = np.asarray(M, dtype=float)
    W = np.asarray(mask, dtype=float)
    D = np.array(D0, dtype=float)
    m, _, n = M.shape
    Mw = M * W[:, None, :]
    C = np.zeros((m, 3))
    res = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        C_prev, D_prev = C.copy(), D.copy()
        den = W @ (D * D)
        num = np.einsum("mkn,n->mk", Mw, D)
        C = np.where(den[:, None] > 0, num / np.where(den > 0, den, 1.0)[:, None], 0.0)
        nc = np.linalg.norm(C)
        if nc == 0:
            break
        C /= nc
        den = W.T @ np.einsum("mk,mk->m", C, C)
        num = np.einsum("mkn,mk->n", Mw, C)
        D = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        R = (M - C[:, :, None] * D[None, None, :]) * W[:, None, :]
        res.append(float(np.sqrt(np.sum(R * R))))
        dn = np.linalg.norm(D)
        if it > 1 and np.linalg.norm(C - C_prev) < tol and np.linalg.norm(D - D_prev) <= tol * max(dn, 1e-300):
            converged = True
            break
    return C, D, it, np.array(res), converged


def reprojection_jacobians(R, c, anchors, invd, obs_f, obs_p, obs_px, fx, fy, cx, cy):
    """Residuals and Jacobians of keyframe-anchored inverse-depth reprojection.

    Point ``p`` sits at ``anchors[p] / invd[p]`` in keyframe coordinates and
    is seen by frame ``f`` (world-to-camera ``R[f]``, centre ``c[f]``).
    Pose Jacobian columns: left rotation increment (3), centre (3).
    Returns ``res (N, 2), J_pose (N, 2, 6), J_invd (N, 2), depth (N,)``.
    """
    Rf = R[obs_f]
    a = anchors[obs_p]
    d = invd[obs_p]
    X = a / d[:, None] - c[obs_f]
    Xc = np.einsum("nij,nj->ni", Rf, X)
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / z
    res = np.stack([fx * x * iz + cx, fy * y * iz + cy], axis=1) - obs_px
    N = len(obs_f)
    Jpi = np.zeros((N, 2, 3))
    Jpi[:, 0, 0] = fx * iz
    Jpi[:, 0, 2] = -fx * x * iz * iz
    Jpi[:, 1, 1] = fy * iz
    Jpi[:, 1, 2] = -fy * y * iz * iz
    # d(exp(w) Xc)/dw = -[Xc]x
    nX = np.zeros((N, 3, 3))
    nX[:, 0, 1], nX[:, 0, 2] = z, -y
    nX[:, 1, 0], nX[:, 1, 2] = -z, x
    nX[:, 2, 0], nX[:, 2, 1] = y, -x
    Jpose = np.empty((N, 2, 6))
    Jpose[:, :, :3] = Jpi @ nX
    Jpose[:, :, 3:] = -(Jpi @ Rf)
    dXc = -np.einsum("nij,nj->ni", Rf, a) / (d * d)[:, None]
    Jd = np.einsum("nij,nj->ni", Jpi, dXc)
    return res, Jpose, Jd, z
