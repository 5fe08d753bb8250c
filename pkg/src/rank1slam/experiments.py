"""Synthetic experiments: exactness, convergence, the Figure 5 comparison,
false-loop robustness and median-scale robustness.

Every trial is a pure function of its arguments and seed, so trials can run
in worker processes; results are always aggregated in trial order.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import baseline as bl
from . import posegraph as pg
from .eval import aligned_normalized_error
from .geometry import Rotation
from .pnp import METHOD as PNP_METHOD, PnPConfig
from .rank1vo import OdometryConfig, run_window
from .refine import BAConfig, gather_observations, local_bundle_adjust
from .synth import MOTIONS, SceneConfig, make_dataset, rng_for

CELLS = tuple((m, d) for m in MOTIONS for d in ("close", "far"))


def trial_seed(base_seed: int, index: int) -> int:
    """Per-trial seed derived from the base seed and the trial index."""
    ss = np.random.SeedSequence([int(base_seed), int(index), 0x5EED])
    return int(ss.generate_state(1, np.uint32)[0])


def run_trials(fn, args: list, workers: int = 1) -> list:
    """``[fn(*a) for a in args]``, optionally across processes, in input order."""
    if workers <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, *zip(*args)))


def bootstrap_ci(x, n_boot=2000, level=0.95, seed=0):
    """Percentile bootstrap interval for the mean of ``x``."""
    x = np.asarray(x, dtype=float)
    if len(x) == 0:
        return (math.nan, math.nan)
    rng = rng_for(seed, 0xB007)
    idx = rng.integers(0, len(x), size=(n_boot, len(x)))
    means = x[idx].mean(axis=1)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [a, 1.0 - a])
    return float(lo), float(hi)


def iterations_to(history, rel=1e-6) -> int:
    """First iteration whose cost is within ``rel`` of the final cost."""
    h = np.asarray(history, dtype=float)
    target = h[-1] * (1.0 + rel)
    return int(np.flatnonzero(h <= target)[0])


# -- exactness and convergence -----------------------------------------------------

def exactness_trial(motion, depth, seed=0, n_frames=30) -> dict:
    cfg = SceneConfig(motion=motion, depth=depth, n_frames=n_frames, pixel_noise_sigma=0.0, seed=seed)
    gt, data = make_dataset(cfg)
    lmap, odo = run_window(data, data.frame_ids, data.rotations)
    true = np.array([p.position for p in gt.poses])
    err = aligned_normalized_error(lmap.positions, true)
    return {"motion": motion, "depth": depth, "seed": seed,
            "max_normalized_error": float(err.max()),
            "singular_ratio": float(odo.result.singular_ratio),
            "sweeps": int(odo.result.iters)}


def convergence_trial(motion, depth, seed, noise_px=3.0, n_frames=30, tol=1e-10) -> dict:
    """Sweep counts of the warm-started factorization at every frame of one window."""
    cfg = SceneConfig(motion=motion, depth=depth, n_frames=n_frames, pixel_noise_sigma=noise_px, seed=seed)
    _, data = make_dataset(cfg)
    _, odo = run_window(data, data.frame_ids, data.rotations, OdometryConfig(tol=tol, seed=seed))
    sweeps = [h["iters"] for h in odo.history]
    final = odo.result
    # residual norms recorded inside every solve must never increase beyond
    # the rounding of M - C D, which scales with the norm of M
    mono = all(bool(np.all(np.diff(h["residuals"]) <= 1e-13 * h["m_norm"])) for h in odo.history)
    return {"motion": motion, "depth": depth, "seed": seed, "final_sweeps": int(final.iters),
            "final_converged": bool(final.converged), "sweeps": sweeps,
            "residuals_nonincreasing": mono}


# -- Figure 5 ----------------------------------------------------------------------

@dataclass
class Fig5Config:
    trials: int = 200
    motions: tuple = MOTIONS
    depths: tuple = ("close", "far")
    seed: int = 0
    n_frames: int = 30
    noise_px: float = 3.0
    interval: float = 0.05
    n_points: int = 200
    init_parallax_deg: float = math.degrees(bl.INIT_PARALLAX)
    pnp_threshold_px: float | None = None   # None: 2.45 sigma, at least 2 px
    workers: int = 1
    timing: bool = False

    def pnp_threshold(self) -> float:
        if self.pnp_threshold_px is not None:
            return self.pnp_threshold_px
        return max(2.0, math.sqrt(5.991) * self.noise_px)

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        d.pop("timing")
        d["motions"] = list(self.motions)
        d["depths"] = list(self.depths)
        d["pnp_threshold_px"] = self.pnp_threshold()
        d["pnp_method"] = PNP_METHOD
        d["ba"] = asdict(BAConfig())
        return d


def _subset(lmap, keep_ids):
    out = lmap.copy()
    keep = np.isin(out.track_ids, keep_ids)
    out.track_ids, out.anchors, out.inv_depth = out.track_ids[keep], out.anchors[keep], out.inv_depth[keep]
    return out


def fig5_trial(motion, depth, seed, cfg: Fig5Config) -> dict:
    """Rank-1 odometry vs. triangulation+PnP on one synthetic window."""
    t0 = time.perf_counter()
    scene = SceneConfig(motion=motion, depth=depth, n_frames=cfg.n_frames, camera_interval=cfg.interval,
                        n_points=cfg.n_points, pixel_noise_sigma=cfg.noise_px, seed=seed)
    gt, data = make_dataset(scene)
    true = np.array([p.position for p in gt.poses])
    K = data.intrinsics
    fids = data.frame_ids
    lmap, odo = run_window(data, fids, data.rotations)
    out = {"motion": motion, "depth": depth, "seed": seed,
           "rank1_error": aligned_normalized_error(lmap.positions, true).tolist(),
           "factorization_sweeps": int(odo.result.iters)}
    try:
        br = bl.run_baseline(data, fids, data.rotations, math.radians(cfg.init_parallax_deg),
                             pnp_config=PnPConfig(threshold_px=cfg.pnp_threshold()), seed=seed)
    except bl.TrackingLost as exc:
        out.update({"baseline_lost": True, "baseline_message": str(exc)})
        if cfg.timing:
            out["runtime_s"] = time.perf_counter() - t0
        return out
    out["baseline_lost"] = False
    out["baseline_error"] = aligned_normalized_error(br.positions, true).tolist()
    out["baseline_init_frame"] = int(br.map.init_id)
    out["baseline_forced_init"] = bool(br.map.forced)
    # both BAs see the same tracks and the same observations
    bmap = bl.baseline_local_map(br, data, lmap.track_ids)
    r1map = _subset(lmap, bmap.track_ids)
    b1 = local_bundle_adjust(r1map, gather_observations(r1map, data), K)
    b2 = local_bundle_adjust(bmap, gather_observations(bmap, data), K)
    out.update({
        "rank1_ba_error": aligned_normalized_error(b1.map.positions, true).tolist(),
        "baseline_ba_error": aligned_normalized_error(b2.map.positions, true).tolist(),
        "rank1_ba_iterations": int(b1.iterations),
        "baseline_ba_iterations": int(b2.iterations),
        "rank1_ba_iterations_1e-6": iterations_to(b1.history),
        "baseline_ba_iterations_1e-6": iterations_to(b2.history),
        "rank1_ba_cost": float(b1.cost),
        "baseline_ba_cost": float(b2.cost),
        "common_tracks": int(len(bmap.track_ids)),
    })
    if cfg.timing:
        out["runtime_s"] = time.perf_counter() - t0
    return out


def _cell_summary(rows, seed) -> dict:
    ok = [r for r in rows if not r["baseline_lost"]]
    s: dict = {"trials": len(rows), "baseline_lost": len(rows) - len(ok)}
    s["rank1_mean_error_all"] = float(np.mean([np.mean(r["rank1_error"]) for r in rows])) if rows else math.nan
    if not ok:
        return s
    raw1 = np.array([np.mean(r["rank1_error"]) for r in ok])
    raw2 = np.array([np.mean(r["baseline_error"]) for r in ok])
    ba1 = np.array([np.mean(r["rank1_ba_error"]) for r in ok])
    ba2 = np.array([np.mean(r["baseline_ba_error"]) for r in ok])
    s.update({
        "rank1_mean_error": float(raw1.mean()),
        "baseline_mean_error": float(raw2.mean()),
        "raw_difference_ci": list(bootstrap_ci(raw2 - raw1, seed=seed)),
        "rank1_ba_mean_error": float(ba1.mean()),
        "baseline_ba_mean_error": float(ba2.mean()),
        "ba_difference_ci": list(bootstrap_ci(ba2 - ba1, seed=seed + 1)),
        "ba_relative_gap": float(abs(ba1.mean() - ba2.mean()) / max(ba1.mean(), ba2.mean())),
        "rank1_ba_iterations_median": float(np.median([r["rank1_ba_iterations"] for r in ok])),
        "baseline_ba_iterations_median": float(np.median([r["baseline_ba_iterations"] for r in ok])),
        "rank1_ba_iterations_1e-6_median": float(np.median([r["rank1_ba_iterations_1e-6"] for r in ok])),
        "baseline_ba_iterations_1e-6_median": float(np.median([r["baseline_ba_iterations_1e-6"] for r in ok])),
        "rank1_per_camera": np.mean([r["rank1_error"] for r in ok], axis=0).tolist(),
        "baseline_per_camera": np.mean([r["baseline_error"] for r in ok], axis=0).tolist(),
        "rank1_ba_per_camera": np.mean([r["rank1_ba_error"] for r in ok], axis=0).tolist(),
        "baseline_ba_per_camera": np.mean([r["baseline_ba_error"] for r in ok], axis=0).tolist(),
        "baseline_forced_init": int(sum(r["baseline_forced_init"] for r in ok)),
    })
    return s


def run_fig5(cfg: Fig5Config) -> dict:
    if cfg.trials < 1:
        raise ValueError("trials must be positive")
    args = []
    for m in cfg.motions:
        for d in cfg.depths:
            for t in range(cfg.trials):
                args.append((m, d, trial_seed(cfg.seed, t), cfg))
    rows = run_trials(fig5_trial, args, cfg.workers)
    cells = {}
    for m in cfg.motions:
        for d in cfg.depths:
            sub = [r for r in rows if r["motion"] == m and r["depth"] == d]
            cells["%s_%s" % (m, d)] = _cell_summary(sub, cfg.seed)
    return {"config": cfg.echo(), "cells": cells, "trials": rows}


# -- false loops ---------------------------------------------------------------------

@dataclass
class FalseLoopConfig:
    n_keyframes: int = 14
    n_loops: int = 5
    fraction: float = 0.1
    solver: str = "l1"
    rot_noise_deg: float = 0.3
    scale_noise: float = 0.005
    pos_noise: float = 0.01
    trials: int = 20
    seed: int = 0
    method: str = "lp"
    thresholds: pg.OutlierThresholds = field(default_factory=pg.OutlierThresholds)
    workers: int = 1
    timing: bool = False

    def __post_init__(self):
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError("fraction must lie in [0, 1)")
        if self.solver not in ("l1", "l2"):
            raise ValueError("solver must be l1 or l2")

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("workers")
        d.pop("timing")
        th = self.thresholds
        d["thresholds"] = {"rotation_deg": math.degrees(th.rotation), "log_scale": th.log_scale,
                           "position_factor": th.position_factor}
        return d


def _solve_with(graph, solver, method, exclude=()):
    if solver == "l1":
        return pg.solve_l1(graph, method=method, exclude=exclude)
    return pg.solve_l2_baseline(graph, exclude=exclude)


def falseloop_trial(seed, cfg: FalseLoopConfig, graph=None, gt=None) -> dict:
    """Inject false loops, solve, and score against the clean solution and ground truth."""
    t0 = time.perf_counter()
    if graph is None:
        graph, gt = pg.synthetic_graph(cfg.n_keyframes, cfg.n_loops, seed=seed, rot_noise_deg=cfg.rot_noise_deg,
                                       scale_noise=cfg.scale_noise, pos_noise=cfg.pos_noise)
    clean = _solve_with(graph, cfg.solver, cfg.method).poses
    n_edges = len(graph.edges)
    count = int(round(cfg.fraction * n_edges))
    ref = gt if gt is not None else clean
    diameter = float(np.ptp(ref.positions, axis=0).max())
    injected = pg.inject_false_loops(graph, count, seed=seed, diameter=diameter)
    rep = _solve_with(graph, cfg.solver, cfg.method)
    flagged, final = pg.mark_outlier_edges(graph, rep, cfg.thresholds,
                                           pg.SolveConfig(loss="l1" if cfg.solver == "l1" else "huber",
                                                          method=cfg.method))
    inj = set(id(e) for e in injected)
    fl = set(id(e) for e in flagged)
    tp = len(inj & fl)
    out = {
        "seed": seed,
        "edges": n_edges,
        "injected": count,
        "flagged": len(fl),
        "precision": tp / len(fl) if fl else 1.0,
        "recall": tp / len(inj) if inj else 1.0,
        "vs_clean": pg.pose_errors(rep.poses, clean),
        "final_vs_clean": pg.pose_errors(final.poses, clean),
        "inner_iterations": rep.inner_iterations,
    }
    if gt is not None:
        out["clean_error"] = pg.pose_errors(clean, gt)
        out["error"] = pg.pose_errors(rep.poses, gt)
        out["final_error"] = pg.pose_errors(final.poses, gt)
    if cfg.timing:
        out["runtime_s"] = time.perf_counter() - t0
    return out


def run_falseloop(cfg: FalseLoopConfig, graph=None) -> dict:
    if graph is not None:
        rows = [falseloop_trial(trial_seed(cfg.seed, t), cfg, _copy_graph(graph)) for t in range(cfg.trials)]
    else:
        rows = run_trials(falseloop_trial, [(trial_seed(cfg.seed, t), cfg) for t in range(cfg.trials)],
                          cfg.workers)
    summary = {
        "precision_mean": float(np.mean([r["precision"] for r in rows])),
        "recall_mean": float(np.mean([r["recall"] for r in rows])),
        "exact_flag_trials": int(sum(r["precision"] == 1.0 and r["recall"] == 1.0 for r in rows)),
        "position_mean_vs_clean": float(np.mean([r["vs_clean"]["position_mean"] for r in rows])),
    }
    if rows and "error" in rows[0]:
        summary["clean_position_error"] = float(np.mean([r["clean_error"]["position_mean"] for r in rows]))
        summary["position_error"] = float(np.mean([r["error"]["position_mean"] for r in rows]))
        summary["final_position_error"] = float(np.mean([r["final_error"]["position_mean"] for r in rows]))
    return {"config": cfg.echo(), "summary": summary, "trials": rows}


def _copy_graph(graph: pg.PoseGraph) -> pg.PoseGraph:
    g = pg.PoseGraph(graph.keyframes)
    for e in graph.edges:
        g.add_edge(replace(e, rotation=e.rotation.copy(), position=e.position.copy()))
    return g


# -- median-scale robustness -----------------------------------------------------

def median_scale_trial(seed, n_points=100, corrupt=0.4, ratio_noise=0.005) -> dict:
    """Relative scale from two maps of one scene, with and without corrupted points.

    A fraction ``corrupt`` of the map-j points is pushed along its ray from
    the anchor centre by a random factor in [1/4, 4], which corrupts exactly
    that fraction of the per-point distance ratios.
    """
    rng = rng_for(seed, 0x5CA1E)
    X = rng.uniform(-5, 5, (n_points, 3)) + np.array([0.0, 0.0, 12.0])
    anchor = rng.normal(0, 1, 3)

    def to_map(s, R, c):
        return (X - c) @ R.T / s, R @ (anchor - c) / s

    s_i, s_j = np.exp(rng.uniform(-1, 1, 2))
    R_i = Rotation.from_quat(rng.normal(size=4)).matrix
    R_j = Rotation.from_quat(rng.normal(size=4)).matrix
    P_i, a_i = to_map(s_i, R_i, rng.normal(0, 2, 3))
    P_j, a_j = to_map(s_j, R_j, rng.normal(0, 2, 3))
    # per-point measurement noise on the ratios
    P_j = a_j + (P_j - a_j) * np.exp(rng.normal(0, ratio_noise, n_points))[:, None]
    clean = pg.relative_scale(P_i, P_j, a_i, a_j)
    k = int(round(corrupt * n_points))
    bad = rng.choice(n_points, k, replace=False)
    Pc = P_j.copy()
    f = np.exp(rng.uniform(-math.log(4), math.log(4), k))
    Pc[bad] = a_j + (P_j[bad] - a_j) * f[:, None]
    corrupted = pg.relative_scale(P_i, Pc, a_i, a_j)
    return {"seed": seed, "truth": float(s_i / s_j), "clean": clean, "corrupted": corrupted,
            "relative_change": abs(corrupted - clean) / clean}
