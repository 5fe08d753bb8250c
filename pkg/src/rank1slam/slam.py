"""End-to-end driver: windows of rank-1 odometry, local refinement, pose graph."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import posegraph as pg
from .eval import normalized_position_error, align_sim3, keyframe_rmse
from .geometry import Rotation
from .pnp import METHOD as PNP_METHOD, PnPConfig
from .rank1vo import BA_REFINED, LocalMap, OdometryConfig, Rank1Odometry
from .refine import (BAConfig, augment_with_partial_tracks, drop_outlier_tracks, gather_observations,
                     local_bundle_adjust)
from .tracks import (DEFAULT_KEYFRAME_PARALLAX, DEFAULT_MIN_TRACKS, DEFAULT_TRACK_RATIO, LocalWindow,
                     frame_parallax, update_window)

log = logging.getLogger(__name__)


class TrackingFailure(RuntimeError):
    """A window closed before any frame joined its keyframe."""


@dataclass
class SlamConfig:
    track_ratio: float = DEFAULT_TRACK_RATIO
    keyframe_parallax: float = DEFAULT_KEYFRAME_PARALLAX   # radians
    min_tracks: int = DEFAULT_MIN_TRACKS
    extended_min_shared: int = 50
    loop_min_shared: int = 30
    loop_min_gap: int = 3
    loop_pnp_min: int = 12
    outlier_px: float = 5.0
    seed: int = 0
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    ba: BAConfig = field(default_factory=BAConfig)
    pnp: PnPConfig = field(default_factory=PnPConfig)
    solve: pg.SolveConfig = field(default_factory=pg.SolveConfig)
    thresholds: pg.OutlierThresholds = field(default_factory=pg.OutlierThresholds)

    def echo(self) -> dict:
        return {
            "track_ratio": self.track_ratio,
            "keyframe_parallax_deg": math.degrees(self.keyframe_parallax),
            "min_tracks": self.min_tracks,
            "extended_min_shared": self.extended_min_shared,
            "loop_min_shared": self.loop_min_shared,
            "loop_min_gap": self.loop_min_gap,
            "outlier_px": self.outlier_px,
            "seed": self.seed,
            "factorization_tol": self.odometry.tol,
            "factorization_max_iters": self.odometry.max_iters,
            "ba": asdict(self.ba),
            "pnp_method": PNP_METHOD,
            "pnp": asdict(self.pnp),
            "solver": {"loss": self.solve.loss, "method": self.solve.method},
            "outlier_thresholds": {"rotation_deg": math.degrees(self.thresholds.rotation),
                                   "log_scale": self.thresholds.log_scale,
                                   "position_factor": self.thresholds.position_factor},
        }


@dataclass
class KeyframeRecord:
    keyframe_id: int
    map: LocalMap
    factorization_iters: list
    ba_iterations: int
    ba_cost: float
    dropped_tracks: int


@dataclass
class SlamResult:
    keyframes: list          # KeyframeRecord, in retirement order
    graph: pg.PoseGraph
    solution: pg.GlobalPoses
    frame_ids: list
    rotations: np.ndarray    # world-to-camera per frame
    positions: np.ndarray
    solve_iterations: list = field(default_factory=list)
    flagged: list = field(default_factory=list)

    def trajectory_lines(self) -> str:
        out = []
        for fid, R, c in zip(self.frame_ids, self.rotations, self.positions):
            q = Rotation.from_matrix(R).quat
            vals = " ".join(repr(float(v)) for v in (*q, *c))
            out.append("traj %d %s" % (fid, vals))
        return "\n".join(out) + "\n"


def _rotation_source(data, rotations):
    rots = rotations if rotations is not None else data.rotations
    missing = [f for f in data.frame_ids if f not in rots]
    if missing:
        raise KeyError("no rotation for frames %s" % missing[:5])
    return {f: (R.matrix if hasattr(R, "matrix") else np.asarray(R, dtype=float)) for f, R in rots.items()}


def _odometry_for(window: LocalWindow, data, rotations, config: SlamConfig) -> Rank1Odometry:
    kf = data.frame(window.keyframe_id)
    odo = Rank1Odometry(window.keyframe_id, kf.ids, kf.bearings, rotations[window.keyframe_id],
                        replace_seed(config.odometry, config.seed))
    for f in window.member_frames[1:]:
        fr = data.frame(f)
        odo.add_frame(f, fr.ids, fr.bearings, rotations[f])
    return odo


def replace_seed(cfg: OdometryConfig, seed) -> OdometryConfig:
    out = OdometryConfig(**{k: getattr(cfg, k) for k in cfg.__dataclass_fields__})
    out.seed = seed
    return out


def refine_window(odo: Rank1Odometry, data, config: SlamConfig):
    """Keyframe retirement: partial-track triangulation, local BA, outlier removal."""
    lmap = odo.local_map()
    lmap = augment_with_partial_tracks(lmap, data, odo.kf_ids, odo.kf_bearings, ratio=config.track_ratio)
    obs = gather_observations(lmap, data)
    ba = local_bundle_adjust(lmap, obs, data.intrinsics, config.ba)
    out, _, dropped = drop_outlier_tracks(ba.map, obs, data.intrinsics, config.outlier_px)
    out.state = BA_REFINED
    return out, ba, len(dropped)


def _chain_edge(graph: pg.PoseGraph, chain):
    e = graph.find_edge(chain[0], chain[1])
    for a, b in zip(chain[1:-1], chain[2:]):
        e = pg.compose_edges(e, graph.find_edge(a, b))
    return e


def _connect(graph: pg.PoseGraph, records: list, data, config: SlamConfig):
    """Edges from the newly retired keyframe's predecessors to it."""
    new = records[-1]
    prev = records[-2]
    pg.add_direct_edge(graph, prev.map, new.map)
    kf_ids = [r.keyframe_id for r in records]
    new_tracks = data.frame(new.keyframe_id).ids
    for k in range(len(records) - 2):
        rec = records[k]
        shared = len(np.intersect1d(data.frame(rec.keyframe_id).ids, new_tracks))
        gap = len(records) - 1 - k
        if gap > config.loop_min_gap and shared > config.loop_min_shared:
            e = pg.loop_edge(graph, rec.map, new.map, data, config.loop_pnp_min, config.pnp,
                             seed=config.seed * 7919 + new.keyframe_id)
            if e is not None:
                continue
        via = _chain_edge(graph, kf_ids[k:-1])
        pg.add_extended_edge(graph, rec.map, new.map, via, graph.find_edge(prev.keyframe_id, new.keyframe_id),
                             shared, config.extended_min_shared)


def run_slam(data, rotations=None, config: SlamConfig | None = None) -> SlamResult:
    """Process every frame of ``data`` in id order."""
    cfg = config or SlamConfig()
    rots = _rotation_source(data, rotations)
    fids = data.frame_ids
    if len(fids) < 2:
        raise TrackingFailure("need at least two frames")
    window = LocalWindow.start(fids[0], data.frame(fids[0]).ids)
    odo = _odometry_for(window, data, rots, cfg)
    records: list[KeyframeRecord] = []
    graph = pg.PoseGraph()
    solution = None
    solve_iters = []

    def retire(odo):
        nonlocal solution
        if not odo.frame_ids:
            raise TrackingFailure("keyframe %d closed without any tracked frame" % odo.keyframe_id)
        lmap, ba, dropped = refine_window(odo, data, cfg)
        rec = KeyframeRecord(odo.keyframe_id, lmap, [h["iters"] for h in odo.history], ba.iterations,
                             ba.cost, dropped)
        records.append(rec)
        graph.add_keyframe(rec.keyframe_id)
        if len(records) > 1:
            _connect(graph, records, data, cfg)
        rep = pg.incremental_update(graph, rec.keyframe_id, solution, cfg.solve)
        solution = rep.poses
        solve_iters.append(rep.inner_iterations)

    for fid in fids[1:]:
        fr = data.frame(fid)

        def parallax_to(cand, fid=fid):
            return frame_parallax(data, cand, fid, rots)

        dec = update_window(window, fid, fr.ids, parallax_to, cfg.track_ratio, cfg.keyframe_parallax,
                            cfg.min_tracks)
        if dec.expand:
            odo.add_frame(fid, fr.ids, fr.bearings, rots[fid])
            window = dec.window
            continue
        log.info("frame %d closes keyframe %d (%s)", fid, window.keyframe_id, dec.reason)
        retire(odo)
        window = dec.window
        odo = _odometry_for(window, data, rots, cfg)
    retire(odo)

    flagged, final = pg.mark_outlier_edges(graph, pg.SolveReport(solution), cfg.thresholds, cfg.solve)
    solution = final.poses
    R_out, c_out = _frame_poses(records, solution, fids)
    return SlamResult(records, graph, solution, fids, R_out, c_out, solve_iters, flagged)


def _frame_poses(records, solution: pg.GlobalPoses, fids):
    """World pose of every frame from the most recent local map that holds it."""
    owner = {}
    for rec in records:
        for i, f in enumerate(rec.map.frame_ids):
            owner[f] = (rec, i)
    R_out = np.zeros((len(fids), 3, 3))
    c_out = np.zeros((len(fids), 3))
    for n, f in enumerate(fids):
        if f not in owner:
            raise TrackingFailure("frame %d belongs to no local map" % f)
        rec, i = owner[f]
        k = solution.index(rec.keyframe_id)
        s, Rk, ck = solution.scales[k], solution.rotations[k], solution.positions[k]
        R_out[n] = rec.map.rotations[i] @ Rk
        c_out[n] = s * Rk.T @ rec.map.positions[i] + ck
    return R_out, c_out


def slam_metrics(result: SlamResult, data, config: SlamConfig | None = None) -> dict:
    cfg = config or SlamConfig()
    m = {
        "config": cfg.echo(),
        "n_frames": len(result.frame_ids),
        "n_keyframes": len(result.keyframes),
        "keyframes": [r.keyframe_id for r in result.keyframes],
        "factorization_iters": [it for r in result.keyframes for it in r.factorization_iters],
        "ba_iterations": [r.ba_iterations for r in result.keyframes],
        "posegraph_inner_iterations": result.solve_iterations,
        "edges": {kind: sum(1 for e in result.graph.edges if e.kind == kind)
                  for kind in (pg.DIRECT, pg.EXTENDED, pg.LOOP)},
        "flagged_edges": len(result.flagged),
    }
    gt = data.ground_truth
    if gt and all(f in gt for f in result.frame_ids):
        true = np.array([gt[f].position for f in result.frame_ids])
        T = align_sim3(result.positions, true, allow_collinear=True)
        al = T.apply(result.positions)
        err = normalized_position_error(al, true)
        kidx = [result.frame_ids.index(r.keyframe_id) for r in result.keyframes]
        if len(kidx) >= 3:
            Tk = align_sim3(result.positions[kidx], true[kidx], allow_collinear=True)
            m["keyframe_rmse"] = keyframe_rmse(Tk.apply(result.positions[kidx]), true[kidx])
        else:
            m["keyframe_rmse"] = keyframe_rmse(al[kidx], true[kidx])
        m["normalized_error_mean"] = float(err.mean())
        m["normalized_error_max"] = float(err.max())
        m["trajectory_rmse"] = keyframe_rmse(al, true)
    return m


__all__ = ["SlamConfig", "SlamResult", "TrackingFailure", "run_slam", "slam_metrics", "refine_window"]
