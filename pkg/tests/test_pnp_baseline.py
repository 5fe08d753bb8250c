import math

import numpy as np
import pytest

from rank1slam.baseline import (TrackingLost, baseline_init, baseline_track, run_baseline,
                                triangulate_two_view)
from rank1slam.experiments import Fig5Config, fig5_trial
from rank1slam.geometry import Intrinsics, Rotation, geodesic_distance
from rank1slam.pnp import PnPFailure, dlt_pose, pnp_ransac, reprojection_errors
from rank1slam.synth import SceneConfig, generate_scene, make_dataset, project

from conftest import random_rotation


def _pnp_problem(seed, n=60, noise=0.0):
    rng = np.random.default_rng(seed)
    K = Intrinsics.from_fov(60, 800, 600)
    R = Rotation(random_rotation(rng)).matrix
    c = rng.normal(size=3)
    Xc = np.stack([rng.uniform(-3, 3, n), rng.uniform(-2, 2, n), rng.uniform(4, 12, n)], axis=1)
    X = Xc @ R + c
    px = Xc[:, :2] / Xc[:, 2:] * [K.fx, K.fy] + [K.cx, K.cy]
    return K, R, c, X, px + noise * rng.normal(size=px.shape), rng


@pytest.mark.parametrize("seed", range(5))
def test_pnp_noiseless_exact(seed):
    K, R, c, X, px, _ = _pnp_problem(seed)
    res = pnp_ransac(X, px, K, seed=seed)
    assert geodesic_distance(res.rotation, R) < 1e-8
    assert np.linalg.norm(res.position - c) < 1e-8
    assert res.inliers.all()


def test_pnp_with_outliers():
    K, R, c, X, px, rng = _pnp_problem(7, n=100, noise=0.5)
    bad = rng.choice(100, 30, replace=False)
    px[bad] = rng.uniform([0, 0], [800, 600], (30, 2))
    res = pnp_ransac(X, px, K, seed=1)
    assert geodesic_distance(res.rotation, R) < 1e-2
    assert np.linalg.norm(res.position - c) < 5e-2
    assert not res.inliers[bad].any()
    assert np.abs(reprojection_errors(res.rotation, res.position, X[res.inliers], px[res.inliers], K)).max() < 3


def test_pnp_too_few_points():
    K, R, c, X, px, _ = _pnp_problem(8, n=5)
    with pytest.raises(PnPFailure):
        pnp_ransac(X, px, K)


def test_dlt_exact():
    K, R, c, X, px, _ = _pnp_problem(9, n=12)
    b = np.concatenate([(px - [K.cx, K.cy]) / [K.fx, K.fy], np.ones((12, 1))], axis=1)
    R2, c2 = dlt_pose(X, b)
    assert geodesic_distance(R2, R) < 1e-9 and np.linalg.norm(c2 - c) < 1e-9


def test_init_refuses_on_small_parallax():
    cfg = SceneConfig(motion="forward", depth="far", pixel_noise_sigma=0.0, seed=1)
    gt, data = make_dataset(cfg)
    assert baseline_init(data, [0, 1], data.rotations) is None


def test_init_on_wide_circular_baseline():
    cfg = SceneConfig(motion="circular", depth="close", pixel_noise_sigma=0.0, seed=2, camera_interval=0.2)
    gt, data = make_dataset(cfg)
    bmap = baseline_init(data, [0, 1, 2, 3, 4, 5], data.rotations)
    assert bmap is not None and not bmap.forced
    assert bmap.parallax > math.radians(1.15)
    # exact up to the unknown scale
    s = np.linalg.norm(gt.poses[5].position)
    assert np.abs(bmap.points * s - gt.points[bmap.track_ids]).max() < 1e-9


def test_two_view_triangulation_exact():
    cfg = SceneConfig(motion="circular", pixel_noise_sigma=0.0, seed=3)
    gt = generate_scene(cfg)
    c = gt.poses[20].position
    R = gt.poses[20].rotation.matrix
    P = gt.points
    pa = P / np.linalg.norm(P, axis=1, keepdims=True)
    pb = (P - c) @ R.T
    pb /= np.linalg.norm(pb, axis=1, keepdims=True)
    X, ok = triangulate_two_view(pa, pb, R, c / np.linalg.norm(c))
    assert ok.all()
    assert np.abs(X * np.linalg.norm(c) - P).max() < 1e-9


def test_track_exact_and_lost():
    cfg = SceneConfig(motion="circular", depth="close", pixel_noise_sigma=0.0, seed=4)
    gt, data = make_dataset(cfg)
    res = run_baseline(data, data.frame_ids, data.rotations)
    s = np.linalg.norm(gt.poses[res.map.init_id].position)
    for j, fid in enumerate(res.frame_ids):
        assert np.linalg.norm(res.positions[j] * s - gt.poses[fid].position) < 1e-8
        assert geodesic_distance(res.rotations[j], gt.poses[fid].rotation) < 1e-8
    data.frames[7].ids = data.frames[7].ids + 10_000
    with pytest.raises(TrackingLost):
        baseline_track(res.map, data, 7)


def test_close_cells_reach_same_ba_basin():
    cfg = Fig5Config(trials=1)
    for motion in ("circular", "forward"):
        for seed in range(4):
            r = fig5_trial(motion, "close", 1000 + seed, cfg)
            if r["baseline_lost"]:
                continue
            a, b = r["rank1_ba_cost"], r["baseline_ba_cost"]
            assert abs(a - b) <= 0.05 * max(a, b)
