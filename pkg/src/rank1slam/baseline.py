"""Two-view triangulation initialization followed by per-frame PnP tracking.

This is the incremental pipeline the rank-1 odometry is compared against.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .pnp import PnPConfig, PnPFailure, pnp_ransac
from .refine import DegenerateTriangulation, triangulate_rays
from .relmotion import RansacConfig, two_point_translation
from .rank1vo import LocalMap, TRIANGULATED
from .tracks import median_parallax

log = logging.getLogger(__name__)

INIT_PARALLAX = math.radians(1.15)


class TrackingLost(RuntimeError):
    pass


@dataclass
class BaselineMap:
    first_id: int
    init_id: int
    track_ids: np.ndarray
    points: np.ndarray          # (n, 3) in first-frame coordinates
    forced: bool = False
    parallax: float = 0.0


@dataclass
class BaselineResult:
    map: BaselineMap
    frame_ids: list
    rotations: np.ndarray
    positions: np.ndarray
    inlier_counts: list = field(default_factory=list)


def _shared(data, fa, fb):
    a, b = data.frame(fa), data.frame(fb)
    common, ia, ib = np.intersect1d(a.ids, b.ids, return_indices=True)
    return common, a.bearings[ia], b.bearings[ib]


def _as_mat(R):
    return R.matrix if hasattr(R, "matrix") else np.asarray(R, dtype=float)


def triangulate_two_view(p_a, p_b, R_rel, t):
    """Midpoint triangulation of rays from the origin and from ``t`` (first-frame coordinates)."""
    pts, ok = [], []
    q = p_b @ R_rel
    for a, b in zip(p_a, q):
        try:
            X, front = triangulate_rays(np.array([np.zeros(3), t]), np.array([a, b]))
        except DegenerateTriangulation:
            pts.append(np.full(3, np.nan))
            ok.append(False)
            continue
        pts.append(X)
        ok.append(front)
    return np.array(pts).reshape(-1, 3), np.array(ok, dtype=bool)


def baseline_init(data, frame_ids, rotations, threshold=INIT_PARALLAX, ransac: RansacConfig | None = None,
                  seed=0, force=False) -> BaselineMap | None:
    """Triangulate a map from the first frame and the latest frame once parallax suffices.

    Returns None while the median parallax between the first and latest
    frame stays at or below ``threshold``; with ``force`` the latest frame is
    used regardless and the map is flagged.
    """
    if len(frame_ids) < 2:
        raise ValueError("baseline_init needs at least two frames")
    f0, fl = frame_ids[0], frame_ids[-1]
    ids, p_a, p_b = _shared(data, f0, fl)
    if len(ids) < 2:
        return None
    Ra, Rb = _as_mat(rotations[f0]), _as_mat(rotations[fl])
    par = median_parallax(p_a, p_b, Ra, Rb)
    if par <= threshold and not force:
        return None
    R_rel = Rb @ Ra.T
    motion = two_point_translation(p_a, p_b, R_rel, ransac, seed=seed, track_ids=ids)
    X, ok = triangulate_two_view(p_a, p_b, R_rel, motion.translation_dir)
    # points are in the first camera's frame, which is the map origin
    return BaselineMap(f0, fl, ids[ok], X[ok], forced=par <= threshold, parallax=float(par))


def baseline_track(bmap: BaselineMap, data, frame_id, K=None, config: PnPConfig | None = None, seed=0):
    """PnP pose of ``frame_id`` in the map's coordinates: (R world-to-camera, centre, inliers)."""
    fr = data.frame(frame_id)
    common, im, ifr = np.intersect1d(bmap.track_ids, fr.ids, return_indices=True)
    if len(common) < 6:
        raise TrackingLost("frame %d sees %d map points (< 6)" % (frame_id, len(common)))
    try:
        res = pnp_ransac(bmap.points[im], fr.pixels[ifr], K or data.intrinsics, config, seed=seed)
    except PnPFailure as exc:
        raise TrackingLost("frame %d: %s" % (frame_id, exc)) from None
    return res


def run_baseline(data, frame_ids, rotations, threshold=INIT_PARALLAX, ransac=None, pnp_config=None,
                 seed=0) -> BaselineResult:
    """Initialize on the first frame pair that clears the parallax threshold, then track.

    Frames before the initialization frame are tracked against the initial
    map as well, so every frame of the sequence receives a pose.
    """
    frame_ids = list(frame_ids)
    bmap = None
    for k in range(1, len(frame_ids)):
        bmap = baseline_init(data, frame_ids[:k + 1], rotations, threshold, ransac, seed=seed)
        if bmap is not None:
            break
    if bmap is None:
        log.warning("parallax never exceeded %.3g deg; forcing initialization on the last frame",
                    math.degrees(threshold))
        bmap = baseline_init(data, frame_ids, rotations, threshold, ransac, seed=seed, force=True)
        if bmap is None:
            raise TrackingLost("no shared tracks for initialization")
    rots, pos, counts = [np.eye(3)], [np.zeros(3)], []
    for fid in frame_ids[1:]:
        res = baseline_track(bmap, data, fid, config=pnp_config, seed=seed * 1_000_003 + int(fid))
        rots.append(res.rotation)
        pos.append(res.position)
        counts.append(int(res.inliers.sum()))
    return BaselineResult(bmap, frame_ids, np.array(rots), np.array(pos), counts)


def baseline_local_map(result: BaselineResult, data, track_ids=None) -> LocalMap:
    """Express the baseline map in the keyframe-anchored inverse-depth form used by BA.

    Each point is re-anchored on its first-frame bearing at the depth of its
    closest point along that ray; points not in front of the first camera
    are dropped.
    """
    bm = result.map
    kf = data.frame(result.frame_ids[0])
    ids = bm.track_ids if track_ids is None else np.intersect1d(bm.track_ids, track_ids)
    sel = np.searchsorted(bm.track_ids, ids)
    kidx = np.searchsorted(kf.ids, ids)
    anchors = kf.bearings[kidx]
    depth = np.einsum("ij,ij->i", bm.points[sel], anchors)
    good = depth > 0
    return LocalMap(result.frame_ids[0], list(result.frame_ids), result.rotations.copy(),
                    result.positions.copy(), ids[good], anchors[good], 1.0 / depth[good], TRIANGULATED,
                    {"forced_init": bm.forced, "init_frame": bm.init_id})
