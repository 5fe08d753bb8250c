# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; semantics mirror ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()

cdef double DET_EPS = 1e-9


cdef void _aligning(const double* u, const double* v, double* R) noexcept nogil:
    # R (row-major 3x3) takes u onto v about u x v
    cdef double k0 = u[1] * v[2] - u[2] * v[1]
    cdef double k1 = u[2] * v[0] - u[0] * v[2]
    cdef double k2 = u[0] * v[1] - u[1] * v[0]
    cdef double s2 = k0 * k0 + k1 * k1 + k2 * k2
    cdef double c = u[0] * v[0] + u[1] * v[1] + u[2] * v[2]
    cdef double f, a0, a1, a2, e0, e1, e2, dot, nrm
    cdef int i, j
    if s2 < 1e-24 and c < 0:
        # half turn about Gram-Schmidt of e_x (then e_y) against u
        e0, e1, e2 = 1.0, 0.0, 0.0
        dot = u[0]
        a0, a1, a2 = e0 - dot * u[0], e1 - dot * u[1], e2 - dot * u[2]
        nrm = sqrt(a0 * a0 + a1 * a1 + a2 * a2)
        if nrm <= 1e-6:
            dot = u[1]
            a0, a1, a2 = -dot * u[0], 1.0 - dot * u[1], -dot * u[2]
            nrm = sqrt(a0 * a0 + a1 * a1 + a2 * a2)
        a0 /= nrm
        a1 /= nrm
        a2 /= nrm
        R[0] = 2 * a0 * a0 - 1; R[1] = 2 * a0 * a1; R[2] = 2 * a0 * a2
        R[3] = 2 * a1 * a0; R[4] = 2 * a1 * a1 - 1; R[5] = 2 * a1 * a2
        R[6] = 2 * a2 * a0; R[7] = 2 * a2 * a1; R[8] = 2 * a2 * a2 - 1
        return
    if c >= 0:
        f = 1.0 / (1.0 + c)
    else:
        f = (1.0 - c) / s2
    # K^2 = k k^T - |k|^2 I
    R[0] = 1.0 + f * (k0 * k0 - s2)
    R[1] = -k2 + f * k0 * k1
    R[2] = k1 + f * k0 * k2
    R[3] = k2 + f * k1 * k0
    R[4] = 1.0 + f * (k1 * k1 - s2)
    R[5] = -k0 + f * k1 * k2
    R[6] = -k1 + f * k2 * k0
    R[7] = k0 + f * k2 * k1
    R[8] = 1.0 + f * (k2 * k2 - s2)


def constraint_vectors(t, P, Q):
    cdef double[::1] tv = np.ascontiguousarray(t, dtype=np.float64).reshape(3)
    cdef double[:, ::1] Pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef double[:, ::1] Qv = np.ascontiguousarray(Q, dtype=np.float64)
    cdef Py_ssize_t n = Pv.shape[0], k
    alpha_a = np.zeros(n)
    beta_a = np.zeros(n)
    V_a = np.zeros((n, 3))
    status_a = np.zeros(n, dtype=np.int8)
    cdef double[::1] al = alpha_a
    cdef double[::1] be = beta_a
    cdef double[:, ::1] V = V_a
    cdef signed char[::1] st = status_a
    cdef double Rw[9]
    cdef double Rt[9]
    cdef double A[9]
    cdef double tq, tp, qp, det, a, b
    cdef int r, col
    with nogil:
        for k in range(n):
            tq = Qv[k, 0] * tv[0] + Qv[k, 1] * tv[1] + Qv[k, 2] * tv[2]
            tp = Pv[k, 0] * tv[0] + Pv[k, 1] * tv[1] + Pv[k, 2] * tv[2]
            qp = Qv[k, 0] * Pv[k, 0] + Qv[k, 1] * Pv[k, 1] + Qv[k, 2] * Pv[k, 2]
            det = 1.0 - tq * tq
            if fabs(det) < DET_EPS:
                st[k] = 1
                continue
            a = (tp - tq * qp) / det
            b = (qp - tq * tp) / det
            al[k] = a
            be[k] = b
            if a <= 0 or b <= 0:
                st[k] = 2
            _aligning(&Pv[k, 0], &tv[0], Rw)
            _aligning(&Pv[k, 0], &Qv[k, 0], Rt)
            for r in range(9):
                A[r] = 0.5 * (a * Rw[r] - b * Rt[r])
            A[0] += 0.5
            A[4] += 0.5
            A[8] += 0.5
            for r in range(3):
                V[k, r] = A[3 * r] * Pv[k, 0] + A[3 * r + 1] * Pv[k, 1] + A[3 * r + 2] * Pv[k, 2]
    return alpha_a, beta_a, V_a, status_a


def rank1_als(M, mask, D0, double tol, int max_iters):
    cdef double[:, :, ::1] Mv = np.ascontiguousarray(M, dtype=np.float64)
    cdef unsigned char[:, ::1] W = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t m = Mv.shape[0], n = Mv.shape[2], j, k, r
    D_a = np.array(D0, dtype=np.float64)
    C_a = np.zeros((m, 3))
    cdef double[::1] D = D_a
    cdef double[:, ::1] C = C_a
    Cp_a = np.zeros((m, 3))
    Dp_a = np.zeros(n)
    cdef double[:, ::1] Cp = Cp_a
    cdef double[::1] Dp = Dp_a
    res_a = np.zeros(max_iters)
    cdef double[::1] res = res_a
    cdef double den, s0, s1, s2, nc, dc, dd, dn, e, tot
    cdef int it = 0, last = 0, nres = 0
    cdef bint converged = False
    with nogil:
        for it in range(1, max_iters + 1):
            last = it
            for j in range(m):
                Cp[j, 0] = C[j, 0]; Cp[j, 1] = C[j, 1]; Cp[j, 2] = C[j, 2]
            for k in range(n):
                Dp[k] = D[k]
            nc = 0.0
            for j in range(m):
                den = 0.0
                s0 = 0.0; s1 = 0.0; s2 = 0.0
                for k in range(n):
                    if W[j, k]:
                        den += D[k] * D[k]
                        s0 += Mv[j, 0, k] * D[k]
                        s1 += Mv[j, 1, k] * D[k]
                        s2 += Mv[j, 2, k] * D[k]
                if den > 0:
                    C[j, 0] = s0 / den; C[j, 1] = s1 / den; C[j, 2] = s2 / den
                else:
                    C[j, 0] = 0.0; C[j, 1] = 0.0; C[j, 2] = 0.0
                nc += C[j, 0] * C[j, 0] + C[j, 1] * C[j, 1] + C[j, 2] * C[j, 2]
            nc = sqrt(nc)
            if nc == 0:
                break
            for j in range(m):
                C[j, 0] /= nc; C[j, 1] /= nc; C[j, 2] /= nc
            for k in range(n):
                den = 0.0
                s0 = 0.0
                for j in range(m):
                    if W[j, k]:
                        den += C[j, 0] * C[j, 0] + C[j, 1] * C[j, 1] + C[j, 2] * C[j, 2]
                        s0 += Mv[j, 0, k] * C[j, 0] + Mv[j, 1, k] * C[j, 1] + Mv[j, 2, k] * C[j, 2]
                D[k] = s0 / den if den > 0 else 0.0
            tot = 0.0
            for j in range(m):
                for k in range(n):
                    if W[j, k]:
                        for r in range(3):
                            e = Mv[j, r, k] - C[j, r] * D[k]
                            tot += e * e
            res[it - 1] = sqrt(tot)
            nres = it
            dc = 0.0
            for j in range(m):
                for r in range(3):
                    e = C[j, r] - Cp[j, r]
                    dc += e * e
            dd = 0.0
            dn = 0.0
            for k in range(n):
                e = D[k] - Dp[k]
                dd += e * e
                dn += D[k] * D[k]
            if it > 1 and sqrt(dc) < tol and sqrt(dd) <= tol * (sqrt(dn) if dn > 0 else 1e-300):
                converged = True
                break
    return C_a, D_a, last, res_a[:nres].copy(), converged


def reprojection_jacobians(R, c, anchors, invd, obs_f, obs_p, obs_px,
                           double fx, double fy, double cx, double cy):
    cdef double[:, :, ::1] Rv = np.ascontiguousarray(R, dtype=np.float64)
    cdef double[:, ::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef double[:, ::1] av = np.ascontiguousarray(anchors, dtype=np.float64)
    cdef double[::1] dv = np.ascontiguousarray(invd, dtype=np.float64)
    cdef long[::1] of = np.ascontiguousarray(obs_f, dtype=np.int64)
    cdef long[::1] op = np.ascontiguousarray(obs_p, dtype=np.int64)
    cdef double[:, ::1] px = np.ascontiguousarray(obs_px, dtype=np.float64)
    cdef Py_ssize_t N = of.shape[0], i
    res_a = np.empty((N, 2))
    Jp_a = np.empty((N, 2, 6))
    Jd_a = np.empty((N, 2))
    z_a = np.empty(N)
    cdef double[:, ::1] res = res_a
    cdef double[:, :, ::1] Jp = Jp_a
    cdef double[:, ::1] Jd = Jd_a
    cdef double[::1] zo = z_a
    cdef long f, p
    cdef double d, X0, X1, X2, x, y, z, iz, j00, j02, j11, j12, ra0, ra1, ra2
    cdef int r
    with nogil:
        for i in range(N):
            f = of[i]
            p = op[i]
            d = dv[p]
            X0 = av[p, 0] / d - cv[f, 0]
            X1 = av[p, 1] / d - cv[f, 1]
            X2 = av[p, 2] / d - cv[f, 2]
            x = Rv[f, 0, 0] * X0 + Rv[f, 0, 1] * X1 + Rv[f, 0, 2] * X2
            y = Rv[f, 1, 0] * X0 + Rv[f, 1, 1] * X1 + Rv[f, 1, 2] * X2
            z = Rv[f, 2, 0] * X0 + Rv[f, 2, 1] * X1 + Rv[f, 2, 2] * X2
            zo[i] = z
            iz = 1.0 / z
            res[i, 0] = fx * x * iz + cx - px[i, 0]
            res[i, 1] = fy * y * iz + cy - px[i, 1]
            j00 = fx * iz
            j02 = -fx * x * iz * iz
            j11 = fy * iz
            j12 = -fy * y * iz * iz
            # rotation block: Jpi @ -[Xc]x
            Jp[i, 0, 0] = j02 * y
            Jp[i, 0, 1] = j00 * z - j02 * x
            Jp[i, 0, 2] = -j00 * y
            Jp[i, 1, 0] = -j11 * z + j12 * y
            Jp[i, 1, 1] = -j12 * x
            Jp[i, 1, 2] = j11 * x
            for r in range(3):
                Jp[i, 0, 3 + r] = -(j00 * Rv[f, 0, r] + j02 * Rv[f, 2, r])
                Jp[i, 1, 3 + r] = -(j11 * Rv[f, 1, r] + j12 * Rv[f, 2, r])
            ra0 = Rv[f, 0, 0] * av[p, 0] + Rv[f, 0, 1] * av[p, 1] + Rv[f, 0, 2] * av[p, 2]
            ra1 = Rv[f, 1, 0] * av[p, 0] + Rv[f, 1, 1] * av[p, 1] + Rv[f, 1, 2] * av[p, 2]
            ra2 = Rv[f, 2, 0] * av[p, 0] + Rv[f, 2, 1] * av[p, 1] + Rv[f, 2, 2] * av[p, 2]
            Jd[i, 0] = -(j00 * ra0 + j02 * ra2) / (d * d)
            Jd[i, 1] = -(j11 * ra1 + j12 * ra2) / (d * d)
    return res_a, Jp_a, Jd_a, z_a
