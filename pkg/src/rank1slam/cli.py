"""Command-line entry point: ``rank1slam <command> ...``.

Exit status: 0 success, 2 usage error, 3 unreadable input, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import io
import logging
import math
import sys
import time

import numpy as np

from . import posegraph as pg
from .baseline import TrackingLost
from .eval import DegenerateAlignment, dump_json, format_metrics, read_trajectory, trajectory_metrics
from .experiments import FalseLoopConfig, Fig5Config, run_falseloop, run_fig5
from .rank1vo import InsufficientSupport, NonConvergenceError
from .refine import DegenerateTriangulation
from .relmotion import DegenerateGeometryError
from .synth import DEPTH_RANGES, MOTIONS, SceneConfig, make_dataset, perturb_rotations, GroundTruth
from .tracks import TrackFileError, format_track_file, ingest_track_file

EXIT_USAGE, EXIT_PARSE, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("rank1slam")


class UsageError(Exception):
    pass


def _nonneg(x):
    v = float(x)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return v


def _pos_float(x):
    v = float(x)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _pos_int(x):
    v = int(x)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _fraction(x):
    v = float(x)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1)")
    return v


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _emit_metrics(metrics, args):
    if getattr(args, "json", None):
        _write(args.json, dump_json(metrics))
    if getattr(args, "metrics", None):
        _write(args.metrics, format_metrics(metrics))


# -- synth -------------------------------------------------------------------------

def cmd_synth(args):
    depth_range = None
    if args.depth_min is not None or args.depth_max is not None:
        lo, hi = DEPTH_RANGES[args.depth]
        depth_range = (args.depth_min if args.depth_min is not None else lo,
                       args.depth_max if args.depth_max is not None else hi)
    try:
        cfg = SceneConfig(motion=args.motion, depth=args.depth, n_frames=args.frames,
                          camera_interval=args.interval, hfov_deg=args.hfov, width=args.width,
                          height=args.height, n_points=args.points, pixel_noise_sigma=args.noise_px,
                          rotation_noise_deg=args.rot_noise_deg, seed=args.seed, depth_range=depth_range)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _, data = make_dataset(cfg, with_rotations=not args.no_rotations)
    header = "synthetic scene " + " ".join("%s=%s" % kv for kv in sorted(cfg.to_dict().items()))
    _write(args.out, format_track_file(data, header))
    return 0


# -- slam --------------------------------------------------------------------------

def cmd_slam(args):
    from .slam import SlamConfig, run_slam, slam_metrics
    data = ingest_track_file(args.tracks)
    if data.rotations and all(f in data.rotations for f in data.frame_ids):
        rotations = data.rotations
    elif args.rot_noise_deg is not None and data.ground_truth:
        gt = GroundTruth([data.ground_truth[f] for f in sorted(data.ground_truth)], np.zeros((0, 3)))
        rot = perturb_rotations(gt, args.rot_noise_deg, args.seed)
        ids = sorted(data.ground_truth)
        rotations = {ids[k]: r for k, r in rot.items()}
    else:
        raise UsageError("no rotation source: the track file needs 'rot' records for every frame, "
                         "or pass --rot-noise-deg with a track file that has 'gt' records")
    cfg = SlamConfig(track_ratio=args.track_ratio, keyframe_parallax=math.radians(args.keyframe_parallax_deg),
                     extended_min_shared=args.extended_min_shared, loop_min_shared=args.loop_min_shared,
                     outlier_px=args.outlier_px, seed=args.seed)
    cfg.pnp.threshold_px = args.pnp_threshold_px
    cfg.solve.method = args.method
    t0 = time.perf_counter()
    res = run_slam(data, rotations, cfg)
    _write(args.traj, res.trajectory_lines())
    if args.graph:
        _write(args.graph, pg.format_pose_graph(res.graph, res.solution))
    metrics = slam_metrics(res, data, cfg)
    if args.timing:
        metrics["runtime_s"] = time.perf_counter() - t0
    _emit_metrics(metrics, args)
    return 0


# -- fig5 ---------------------------------------------------------------------------

def _fig5_text(report) -> str:
    flat = {"config": report["config"]}
    for name, cell in report["cells"].items():
        flat[name] = {k: v for k, v in cell.items() if not k.endswith("per_camera")}
    return format_metrics(flat)


def _fig5_table(report) -> str:
    """Plot-ready per-camera means: one row per (cell, camera)."""
    lines = ["# cell camera rank1 baseline rank1_ba baseline_ba"]
    for name, cell in report["cells"].items():
        if "rank1_per_camera" not in cell:
            continue
        cols = [cell[k] for k in ("rank1_per_camera", "baseline_per_camera", "rank1_ba_per_camera",
                                  "baseline_ba_per_camera")]
        for j, vals in enumerate(zip(*cols)):
            lines.append("%s %d %s" % (name, j, " ".join(repr(float(v)) for v in vals)))
    return "\n".join(lines) + "\n"


def cmd_fig5(args):
    cfg = Fig5Config(trials=args.trials, motions=tuple(args.motions), depths=tuple(args.depths), seed=args.seed,
                     n_frames=args.frames, noise_px=args.noise_px, interval=args.interval,
                     init_parallax_deg=args.init_parallax_deg, pnp_threshold_px=args.pnp_threshold_px,
                     workers=args.workers, timing=args.timing)
    report = run_fig5(cfg)
    _write(args.metrics, _fig5_text(report))
    if args.json:
        _write(args.json, dump_json(report))
    if args.table:
        _write(args.table, _fig5_table(report))
    return 0


# -- falseloop ---------------------------------------------------------------------

def cmd_falseloop(args):
    cfg = FalseLoopConfig(n_keyframes=args.keyframes, n_loops=args.loops, fraction=args.fraction,
                          solver=args.solver, rot_noise_deg=args.rot_noise_deg, scale_noise=args.scale_noise,
                          pos_noise=args.pos_noise, trials=args.trials, seed=args.seed, method=args.method,
                          workers=args.workers, timing=args.timing)
    graph = None
    if args.graph:
        with open(args.graph) as fh:
            graph, _ = pg.parse_pose_graph(fh)
    report = run_falseloop(cfg, graph)
    flat = {"config": report["config"], "summary": report["summary"]}
    _write(args.metrics, format_metrics(flat))
    if args.json:
        _write(args.json, dump_json(report))
    return 0


# -- posegraph-solve ---------------------------------------------------------------

def cmd_posegraph_solve(args):
    with open(args.graph) if args.graph != "-" else sys.stdin as fh:
        graph, _ = pg.parse_pose_graph(fh)
    if args.solver == "l1":
        cfg = pg.SolveConfig(loss="l1", method=args.method)
    else:
        cfg = pg.SolveConfig(loss="huber", huber_delta=args.huber_delta)
    rep = pg.solve(graph, None, cfg)
    if args.mark_outliers:
        _, rep = pg.mark_outlier_edges(graph, rep, config=cfg)
    _write(args.out, pg.format_solution(rep.poses))
    if args.graph_out:
        _write(args.graph_out, pg.format_pose_graph(graph, rep.poses))
    return 0


# -- eval ---------------------------------------------------------------------------

def cmd_eval(args):
    est = read_trajectory(args.traj)
    with open(args.gt) as fh:
        text = fh.read()
    if any(line.split()[:1] == ["intrinsics"] for line in text.splitlines()):
        data = ingest_track_file(io.StringIO(text))
        gt = {f: p.position for f, p in data.ground_truth.items()}
    else:
        gt = {f: c for f, c in read_trajectory(text + "\n").items()}
    ids = sorted(set(est) & set(gt))
    if len(ids) < 2:
        raise UsageError("fewer than two frames in common between trajectory and ground truth")
    m = trajectory_metrics(np.array([est[f] for f in ids]), np.array([gt[f] for f in ids]))
    m["n_common_frames"] = len(ids)
    _write(args.metrics, format_metrics(m))
    if args.json:
        _write(args.json, dump_json(m))
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rank1slam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic track file")
    s.add_argument("--motion", choices=MOTIONS, default="forward")
    s.add_argument("--depth", choices=sorted(DEPTH_RANGES), default="close")
    s.add_argument("--depth-min", type=_pos_float)
    s.add_argument("--depth-max", type=_pos_float)
    s.add_argument("--frames", type=_pos_int, default=30)
    s.add_argument("--interval", type=_pos_float, default=0.05)
    s.add_argument("--points", type=_pos_int, default=200)
    s.add_argument("--hfov", type=_pos_float, default=60.0)
    s.add_argument("--width", type=_pos_int, default=800)
    s.add_argument("--height", type=_pos_int, default=600)
    s.add_argument("--noise-px", type=_nonneg, default=3.0)
    s.add_argument("--rot-noise-deg", type=_nonneg, default=0.0)
    s.add_argument("--no-rotations", action="store_true", help="omit rot records")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--out", default="-")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("slam", help="run the full pipeline on a track file")
    s.add_argument("tracks")
    s.add_argument("--rot-noise-deg", type=_nonneg,
                   help="derive rotations from gt records with this angular noise")
    s.add_argument("--track-ratio", type=_fraction, default=0.30)
    s.add_argument("--keyframe-parallax-deg", type=_nonneg, default=1.15)
    s.add_argument("--extended-min-shared", type=int, default=50)
    s.add_argument("--loop-min-shared", type=int, default=30)
    s.add_argument("--outlier-px", type=_pos_float, default=5.0)
    s.add_argument("--pnp-threshold-px", type=_pos_float, default=2.0)
    s.add_argument("--method", choices=("lp", "irls"), default="lp")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--traj", default="-", help="trajectory output (default stdout)")
    s.add_argument("--graph", help="pose-graph output file")
    s.add_argument("--metrics", help="flat key-value metrics file")
    s.add_argument("--json", help="structured metrics file")
    s.add_argument("--timing", action="store_true", help="include wall-clock runtimes")
    s.set_defaults(func=cmd_slam)

    s = sub.add_parser("fig5", help="rank-1 odometry vs. triangulation+PnP")
    s.add_argument("--trials", type=_pos_int, default=200)
    s.add_argument("--motions", nargs="+", choices=MOTIONS, default=list(MOTIONS))
    s.add_argument("--depths", nargs="+", choices=sorted(DEPTH_RANGES), default=["close", "far"])
    s.add_argument("--frames", type=_pos_int, default=30)
    s.add_argument("--noise-px", type=_nonneg, default=3.0)
    s.add_argument("--interval", type=_pos_float, default=0.05)
    s.add_argument("--init-parallax-deg", type=_nonneg, default=1.15)
    s.add_argument("--pnp-threshold-px", type=_pos_float,
                   help="PnP inlier gate (default 2.45 x noise, at least 2 px)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=_pos_int, default=1)
    s.add_argument("--metrics", default="-")
    s.add_argument("--json")
    s.add_argument("--table", help="per-camera mean errors, plot-ready")
    s.add_argument("--timing", action="store_true")
    s.set_defaults(func=cmd_fig5)

    s = sub.add_parser("falseloop", help="false-loop robustness of the pose-graph solve")
    s.add_argument("--graph", help="pose-graph file (default: synthetic graph)")
    s.add_argument("--fraction", type=_fraction, default=0.1)
    s.add_argument("--solver", choices=("l1", "l2"), default="l1")
    s.add_argument("--method", choices=("lp", "irls"), default="lp")
    s.add_argument("--keyframes", type=_pos_int, default=14)
    s.add_argument("--loops", type=int, default=5)
    s.add_argument("--rot-noise-deg", type=_nonneg, default=0.3)
    s.add_argument("--scale-noise", type=_nonneg, default=0.005)
    s.add_argument("--pos-noise", type=_nonneg, default=0.01)
    s.add_argument("--trials", type=_pos_int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=_pos_int, default=1)
    s.add_argument("--metrics", default="-")
    s.add_argument("--json")
    s.add_argument("--timing", action="store_true")
    s.set_defaults(func=cmd_falseloop)

    s = sub.add_parser("posegraph-solve", help="solve a pose-graph file")
    s.add_argument("graph")
    s.add_argument("--solver", choices=("l1", "l2"), default="l1")
    s.add_argument("--method", choices=("lp", "irls"), default="lp")
    s.add_argument("--huber-delta", type=_pos_float, default=1.0)
    s.add_argument("--mark-outliers", action="store_true")
    s.add_argument("-o", "--out", default="-")
    s.add_argument("--graph-out", help="write the graph with outlier marks and solution")
    s.set_defaults(func=cmd_posegraph_solve)

    s = sub.add_parser("eval", help="trajectory vs. ground truth")
    s.add_argument("traj")
    s.add_argument("gt", help="track file with gt records, or gt lines")
    s.add_argument("--metrics", default="-")
    s.add_argument("--json")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print("rank1slam %s: %s" % (args.command, exc), file=sys.stderr)
        return EXIT_USAGE
    except (TrackFileError, pg.PoseGraphFileError, UnicodeDecodeError, OSError) as exc:
        print("rank1slam %s: cannot read input: %s" % (args.command, exc), file=sys.stderr)
        return EXIT_PARSE
    except (DegenerateGeometryError, NonConvergenceError, InsufficientSupport, DegenerateTriangulation,
            DegenerateAlignment, TrackingLost, pg.DisconnectedGraphError, np.linalg.LinAlgError,
            FloatingPointError, RuntimeError) as exc:
        print("rank1slam %s: numerical failure: %s" % (args.command, exc), file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining value errors come from malformed trajectory records
        print("rank1slam %s: cannot read input: %s" % (args.command, exc), file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
