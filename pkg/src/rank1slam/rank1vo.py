"""Camera-point constraints and rank-1 factorization odometry inside one window.

For every frame ``j`` of a window anchored at a keyframe and every track ``k``
seen in all frames, the midpoint of the common perpendicular between the
translation ray and the back-projected frame ray gives a known vector
``v_jk ~ c_j * d_k`` (camera centre times inverse depth).  Stacking those
vectors gives a matrix that is rank one in the noise-free case; its dominant
factor pair yields all camera centres and all inverse depths at once.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import Rotation, rotation_aligning_matrix
from .relmotion import RansacConfig, RelativeMotion, two_point_translation

log = logging.getLogger(__name__)

FACTORIZED = "factorized"
TRIANGULATED = "triangulated-augmented"
BA_REFINED = "ba-refined"


class SkipPoint(ValueError):
    """Translation ray and frame ray are parallel; the point gives no constraint."""


class CheiralityReject(ValueError):
    """The closest points imply a camera behind the point or vice versa."""


class NonConvergenceError(RuntimeError):
    def __init__(self, msg, C, D, iters):
        super().__init__(msg)
        self.C, self.D, self.iters = C, D, iters


class InsufficientSupport(ValueError):
    pass


def rotate_bearing(p_kj, R_j):
    """Frame-j ray expressed in the keyframe: ``R_j^T p``."""
    Rm = R_j.matrix if isinstance(R_j, Rotation) else np.asarray(R_j)
    v = Rm.T @ np.asarray(p_kj, dtype=float)
    return v / np.linalg.norm(v)


def ray_midpoint_params(t, p_k, p_jk):
    """Scalars ``alpha, beta`` and the midpoint of the common perpendicular.

    ``a = alpha t`` lies on the translation ray, ``b = p_k - beta p_jk`` on the
    frame ray through the unit-depth point ``p_k``.
    """
    t, p, q = (np.asarray(v, dtype=float) for v in (t, p_k, p_jk))
    tq, tp, qp = t @ q, t @ p, q @ p
    det = 1.0 - tq * tq
    if abs(det) < kernels._kernels_py.DET_EPS:
        raise SkipPoint("rays are parallel")
    alpha = (tp - tq * qp) / det
    beta = (qp - tq * tp) / det
    if alpha <= 0 or beta <= 0:
        raise CheiralityReject("alpha=%g beta=%g" % (alpha, beta))
    a = alpha * t
    b = p - beta * q
    return alpha, beta, 0.5 * (a + b)


def camera_point_matrix(t, p_k, p_jk, alpha, beta):
    """``A = (alpha R(p_k->t) + I - beta R(p_k->p_jk)) / 2``."""
    Rw = rotation_aligning_matrix(p_k, t)
    Rt = rotation_aligning_matrix(p_k, p_jk)
    return 0.5 * (alpha * Rw + np.eye(3) - beta * Rt)


def camera_point_vector(t, p_k, p_jk, alpha, beta):
    """``v_jk = A_jk p_k``; equals the ray midpoint for a unit-depth point."""
    return camera_point_matrix(t, p_k, p_jk, alpha, beta) @ np.asarray(p_k, dtype=float)


@dataclass
class Rank1Result:
    C: np.ndarray          # (3m,) stacked camera centres, unit norm
    D: np.ndarray          # (n,) inverse depths
    singular_ratio: float  # r2 / r1 of the (zero-filled) constraint matrix
    iters: int
    residuals: np.ndarray  # Frobenius misfit after each sweep
    nonpositive: np.ndarray  # column indices with d <= 0
    converged: bool = True


def rank1_factorize(M, mask=None, init=None, tol=1e-10, max_iters=50, raise_on_failure=True):
    """Dominant rank-1 pair of ``M`` (3m x n, or m x 3 x n blocks) over present cells.

    Alternating least squares: each sweep solves for every camera block given
    the inverse depths, then every inverse depth given the cameras.
    ``init`` is a starting D (n,).
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        if M.shape[0] % 3:
            raise ValueError("row count must be a multiple of 3")
        Mb = M.reshape(-1, 3, M.shape[1])
    else:
        Mb = M
    m, _, n = Mb.shape
    if m < 1 or n < 2:
        raise ValueError("need at least one frame block and two columns")
    W = np.ones((m, n), np.uint8) if mask is None else np.asarray(mask, dtype=np.uint8)
    D0 = np.ones(n) if init is None else np.asarray(init, dtype=float)
    if not np.any(D0):
        D0 = np.ones(n)
    C, D, iters, res, ok = kernels.rank1_als(np.ascontiguousarray(Mb), np.ascontiguousarray(W),
                                             D0, tol, max_iters)
    if np.count_nonzero(D > 0) < np.count_nonzero(D < 0):
        C, D = -C, -D
    Z = np.where(W[:, None, :].astype(bool), Mb, 0.0).reshape(3 * m, n)
    sv = np.linalg.svd(Z, compute_uv=False)
    ratio = float(sv[1] / sv[0]) if len(sv) > 1 and sv[0] > 0 else 0.0
    out = Rank1Result(C.reshape(-1), D, ratio, int(iters), res, np.flatnonzero(D <= 0), bool(ok))
    if not ok and raise_on_failure:
        raise NonConvergenceError("rank-1 factorization did not reach tol=%g in %d sweeps"
                                  % (tol, max_iters), out.C, D, iters)
    return out


@dataclass
class LocalMap:
    """Poses and inverse-depth points in a keyframe's coordinates.

    ``frame_ids[0]`` is the keyframe (identity rotation, origin).
    Point ``k`` is ``anchors[k] / inv_depth[k]``.
    """

    keyframe_id: int
    frame_ids: list
    rotations: np.ndarray   # (m+1, 3, 3) world(keyframe)-to-camera
    positions: np.ndarray   # (m+1, 3)
    track_ids: np.ndarray   # (n,)
    anchors: np.ndarray     # (n, 3) keyframe bearings
    inv_depth: np.ndarray   # (n,)
    state: str = FACTORIZED
    flags: dict = field(default_factory=dict)

    @property
    def points(self) -> np.ndarray:
        return self.anchors / self.inv_depth[:, None]

    def frame_index(self, fid) -> int:
        return self.frame_ids.index(fid)

    def pose_of(self, fid):
        i = self.frame_index(fid)
        return self.rotations[i], self.positions[i]

    def point_lookup(self) -> dict:
        return {int(t): i for i, t in enumerate(self.track_ids)}

    def copy(self) -> LocalMap:
        return LocalMap(self.keyframe_id, list(self.frame_ids), self.rotations.copy(),
                        self.positions.copy(), self.track_ids.copy(), self.anchors.copy(),
                        self.inv_depth.copy(), self.state, dict(self.flags))


@dataclass
class OdometryConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    tol: float = 1e-10
    max_iters: int = 50
    min_tracks: int = 8
    seed: int = 0
    # raise NonConvergenceError instead of keeping the last iterate
    strict: bool = False


class Rank1Odometry:
    """Incremental rank-1 odometry for one expanding window.

    ``add_frame`` runs one step of the per-frame algorithm: two-point
    translation, rotation of the frame rays into the keyframe, per-track
    constraint vectors, one new 3-row block of the constraint matrix and a
    warm-started factorization.
    """

    def __init__(self, keyframe_id, kf_track_ids, kf_bearings, kf_rotation=None, config=None):
        self.config = config or OdometryConfig()
        self.keyframe_id = keyframe_id
        self.kf_ids = np.asarray(kf_track_ids, dtype=np.int64)
        self.kf_bearings = np.asarray(kf_bearings, dtype=float)
        self._kf_lookup = {int(t): i for i, t in enumerate(self.kf_ids)}
        self.kf_rotation = np.eye(3) if kf_rotation is None else _mat(kf_rotation)
        self.frame_ids: list = []
        self.rel_rotations: list = []
        self.motions: list[RelativeMotion] = []
        self.cols = np.zeros(0, np.int64)   # track ids of current columns
        self.blocks = np.zeros((0, 3, 0))
        self.mask = np.zeros((0, 0), np.uint8)
        self.D = None
        self.result: Rank1Result | None = None
        self.history: list = []

    def add_frame(self, frame_id, track_ids, bearings, rotation, full_tracks=None):
        """Append frame ``frame_id`` with world-to-camera ``rotation``.

        ``full_tracks`` restricts the columns to tracks seen in every frame
        of the window so far (defaults to the intersection computed here).
        """
        cfg = self.config
        track_ids = np.asarray(track_ids, dtype=np.int64)
        bearings = np.asarray(bearings, dtype=float)
        if full_tracks is None:
            keep = np.intersect1d(self.kf_ids, track_ids) if not self.frame_ids else \
                np.intersect1d(self.cols, track_ids)
        else:
            keep = np.intersect1d(np.asarray(sorted(full_tracks), dtype=np.int64), self.kf_ids)
            keep = np.intersect1d(keep, track_ids)
        if len(keep) < cfg.min_tracks:
            raise InsufficientSupport("%d shared tracks < %d" % (len(keep), cfg.min_tracks))

        R_rel = _mat(rotation) @ self.kf_rotation.T
        kf_idx = np.array([self._kf_lookup[int(t)] for t in keep])
        fr_idx = np.searchsorted(track_ids, keep)
        p_i = self.kf_bearings[kf_idx]
        p_j = bearings[fr_idx]
        motion = two_point_translation(p_i, p_j, R_rel, cfg.ransac,
                                       seed=cfg.seed * 1_000_003 + int(frame_id),
                                       track_ids=keep)
        q = p_j @ R_rel  # rows are R^T p_j
        _, _, V, status = kernels.constraint_vectors(motion.translation_dir, p_i, q)

        # drop columns no longer tracked, keep earlier cells of survivors
        if len(self.cols):
            sel = np.searchsorted(self.cols, keep)
            assert np.all(self.cols[sel] == keep)
            blocks = self.blocks[:, :, sel]
            mask = self.mask[:, sel]
            D0 = self.D[sel]
        else:
            blocks = np.zeros((0, 3, len(keep)))
            mask = np.zeros((0, len(keep)), np.uint8)
            D0 = np.ones(len(keep))
        self.blocks = np.concatenate([blocks, V.T[None]], axis=0)
        self.mask = np.concatenate([mask, (status == kernels.STATUS_OK).astype(np.uint8)[None]], axis=0)
        self.cols = keep
        self.frame_ids.append(frame_id)
        self.rel_rotations.append(R_rel)
        self.motions.append(motion)

        res = rank1_factorize(self.blocks, self.mask, init=D0, tol=cfg.tol, max_iters=cfg.max_iters,
                              raise_on_failure=cfg.strict)
        if not res.converged:
            log.info("frame %s: factorization stopped at %d sweeps without reaching tol", frame_id, res.iters)
        self.D = res.D
        self.result = res
        self.history.append({"frame": int(frame_id), "iters": res.iters,
                             "singular_ratio": res.singular_ratio,
                             "low_parallax": motion.low_parallax,
                             "converged": res.converged,
                             "residuals": list(res.residuals),
                             "m_norm": float(np.linalg.norm(self.blocks * self.mask[:, None, :])),
                             "rejected_cells": int(np.count_nonzero(status))})
        return res

    def local_map(self) -> LocalMap:
        res = self.result
        if res is None:
            raise InsufficientSupport("no frame factorized yet")
        m = len(self.frame_ids)
        C = res.C.reshape(m, 3)
        good = res.D > 0
        kf_idx = np.array([self._kf_lookup[int(t)] for t in self.cols], dtype=np.int64)
        rots = np.concatenate([np.eye(3)[None], np.array(self.rel_rotations)], axis=0)
        pos = np.concatenate([np.zeros((1, 3)), C], axis=0)
        return LocalMap(self.keyframe_id, [self.keyframe_id] + list(self.frame_ids), rots, pos,
                        self.cols[good], self.kf_bearings[kf_idx[good]], res.D[good],
                        FACTORIZED, {"low_parallax": any(mo.low_parallax for mo in self.motions)})


def odometry_step(odo: Rank1Odometry, frame_id, track_ids, bearings, rotation, full_tracks=None) -> LocalMap:
    """Add one frame to a window's odometry and return the updated local map."""
    odo.add_frame(frame_id, track_ids, bearings, rotation, full_tracks)
    return odo.local_map()


def _mat(R):
    return R.matrix if isinstance(R, Rotation) else np.asarray(R, dtype=float)


def run_window(data, frame_ids, rotations, config=None, strict_full=True) -> tuple[LocalMap, Rank1Odometry]:
    """Factorize frames ``frame_ids`` (first is the keyframe) of a TrackData."""
    kf = data.frame(frame_ids[0])
    odo = Rank1Odometry(frame_ids[0], kf.ids, kf.bearings, rotations[frame_ids[0]], config)
    for fid in frame_ids[1:]:
        fr = data.frame(fid)
        odo.add_frame(fid, fr.ids, fr.bearings, rotations[fid])
    return odo.local_map(), odo
