import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rank1slam.geometry import exp_so3, pixel_to_bearing, rotation_aligning_matrix
from rank1slam.rank1vo import (CheiralityReject, InsufficientSupport, NonConvergenceError, Rank1Odometry,
                               SkipPoint, camera_point_matrix, camera_point_vector, rank1_factorize,
                               ray_midpoint_params, rotate_bearing, run_window)
from rank1slam.synth import SceneConfig, generate_scene, make_dataset, project
from rank1slam.tracks import TrackData

from conftest import unit


def scene(seed=0, motion="circular", depth="close", noise=0.0, n_frames=30):
    cfg = SceneConfig(motion=motion, depth=depth, pixel_noise_sigma=noise, seed=seed, n_frames=n_frames)
    return cfg, *make_dataset(cfg)


def test_rotate_bearing():
    p = np.array([1.0, 0, 0])
    assert np.allclose(rotate_bearing(p, np.eye(3)), p)
    R = exp_so3([0, 0, math.pi / 2])
    assert np.allclose(rotate_bearing(p, R), [0, -1, 0], atol=1e-15)


def test_rotate_bearing_round_trip(rng):
    for _ in range(200):
        p = unit(rng)
        R = exp_so3(unit(rng) * 2).matrix
        q = rotate_bearing(p, R)
        assert np.linalg.norm(R @ q - p) < 1e-12


def test_midpoint_coplanar_example():
    a, b, m = ray_midpoint_params([1.0, 0, 0], [0, 0, 1.0], np.array([-1.0, 0, 1]) / math.sqrt(2))
    assert abs(a - 1) < 1e-15 and abs(b - math.sqrt(2)) < 1e-15
    assert np.allclose(m, [1, 0, 0], atol=1e-15)


def test_midpoint_signals():
    with pytest.raises(SkipPoint):
        ray_midpoint_params([0, 0, 1.0], [1.0, 0, 0], [0, 0, 1.0])
    with pytest.raises(CheiralityReject):
        ray_midpoint_params([1.0, 0, 0], [0, 0, 1.0], np.array([1.0, 0, 1]) / math.sqrt(2))


def exact_triples(seed=0, j=29, motion="circular"):
    cfg = SceneConfig(motion=motion, depth="close", pixel_noise_sigma=0.0, seed=seed)
    gt = generate_scene(cfg)
    c = gt.poses[j].position
    t = c / np.linalg.norm(c)
    R = gt.poses[j].rotation.matrix
    P = gt.points
    p_k = P / np.linalg.norm(P, axis=1, keepdims=True)
    Xj = (P - c) @ R.T
    q = Xj @ R  # rotated back into the keyframe
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    d = 1.0 / np.linalg.norm(P, axis=1)
    return t, p_k, q, c, d


def test_midpoint_equals_scaled_camera():
    t, p_k, q, c, d = exact_triples()
    for k in range(len(p_k)):
        _, _, m = ray_midpoint_params(t, p_k[k], q[k])
        assert np.linalg.norm(m - c * d[k]) < 1e-10


def test_midpoint_perturbation():
    t, p_k, q, c, d = exact_triples(1)
    rng = np.random.default_rng(1)
    for k in range(len(p_k)):
        axis = np.cross(q[k], unit(rng))
        qk = exp_so3(axis / np.linalg.norm(axis) * 1e-3).matrix @ q[k]
        _, _, m = ray_midpoint_params(t, p_k[k], qk)
        sin_par = np.linalg.norm(np.cross(t, q[k]))
        # a 1e-3 rad tilt moves the closest point by about 1e-3 / sin(parallax)
        # at unit depth
        assert np.linalg.norm(m - c * d[k]) < 2e-3 / sin_par


def test_vector_equals_midpoint_10k(rng):
    n = 0
    while n < 10_000:
        t, p, q = unit(rng), unit(rng), unit(rng)
        try:
            a, b, m = ray_midpoint_params(t, p, q)
        except (SkipPoint, CheiralityReject):
            continue
        n += 1
        assert np.linalg.norm(camera_point_vector(t, p, q, a, b) - m) < 1e-10


def test_vector_noiseless_equals_c_times_d():
    t, p_k, q, c, d = exact_triples(2)
    for k in range(len(p_k)):
        a, b, _ = ray_midpoint_params(t, p_k[k], q[k])
        assert np.linalg.norm(camera_point_vector(t, p_k[k], q[k], a, b) - c * d[k]) < 1e-9


def test_vector_aligned_ray_case():
    t = np.array([0.0, 0, 1])
    q = np.array([-0.3, 0.1, 1.0])
    q /= np.linalg.norm(q)
    # R(p_k -> t) is the identity; the identity A p = (alpha t + p - beta q) / 2
    # holds for any scalars
    for a, b in ((1.0, 0.5), (0.3, 2.0)):
        A = camera_point_matrix(t, t, q, a, b)
        assert np.allclose(A, 0.5 * (a * np.eye(3) + np.eye(3) - b * rotation_aligning_matrix(t, q)))
        assert np.linalg.norm(A @ t - 0.5 * (a * t + t - b * q)) < 1e-12


def test_factorize_exact_rank1(rng):
    C0 = rng.normal(size=3 * 7)
    D0 = rng.uniform(0.05, 0.2, 40)
    res = rank1_factorize(np.outer(C0, D0))
    s = np.linalg.norm(C0)
    assert res.iters <= 2
    assert np.linalg.norm(res.C - C0 / s) < 1e-12
    assert np.linalg.norm(res.D - D0 * s) < 1e-12 * np.linalg.norm(D0 * s)
    assert res.singular_ratio < 1e-12


def test_factorize_matches_svd(rng):
    for _ in range(20):
        M = np.outer(rng.normal(size=30), rng.uniform(0.1, 1, 50)) + 1e-2 * rng.normal(size=(30, 50))
        res = rank1_factorize(M, tol=1e-13, max_iters=200)
        U, S, Vt = np.linalg.svd(M)
        u = U[:, 0] * np.sign(U[:, 0] @ res.C)
        assert np.linalg.norm(res.C - u) < 1e-8
        assert np.linalg.norm(res.D - S[0] * Vt[0] * np.sign(U[:, 0] @ res.C * 1)) < 1e-8 * S[0]
        assert abs(res.singular_ratio - S[1] / S[0]) < 1e-12


def test_factorize_sign_and_gauge(rng):
    M = -np.outer(rng.normal(size=9), rng.uniform(0.1, 1, 12))
    res = rank1_factorize(M)
    assert abs(np.linalg.norm(res.C) - 1) < 1e-14
    assert np.all(res.D > 0)


def test_factorize_reports_nonpositive(rng):
    D0 = rng.uniform(0.1, 1, 12)
    D0[3] = -0.5
    res = rank1_factorize(np.outer(rng.normal(size=9), D0))
    assert list(res.nonpositive) == [3]


def test_factorize_nonconvergence(rng):
    M = rng.normal(size=(9, 12))
    with pytest.raises(NonConvergenceError) as ei:
        rank1_factorize(M, max_iters=2)
    assert ei.value.C.shape == (9,)
    with pytest.raises(ValueError):
        rank1_factorize(np.ones((3, 1)))


@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 1.0))
def test_residual_monotone(seed, noise):
    rng = np.random.default_rng(seed)
    m, n = int(rng.integers(1, 8)), int(rng.integers(2, 30))
    M = np.outer(rng.normal(size=3 * m), rng.uniform(0.05, 1, n)) + noise * rng.normal(size=(3 * m, n))
    mask = (rng.random((m, n)) < 0.9).astype(np.uint8)
    mask[:, 0] = 1
    res = rank1_factorize(M, mask, tol=1e-12, max_iters=200, raise_on_failure=False)
    r = res.residuals
    # rounding in evaluating M - C D is relative to the size of M
    floor = 1e-13 * np.linalg.norm(M * np.repeat(mask, 3, axis=0))
    assert np.all(np.diff(r) <= floor)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_scale_gauge(seed, lam):
    rng = np.random.default_rng(seed)
    M = np.outer(rng.normal(size=12), rng.uniform(0.05, 1, 20)) + 0.05 * rng.normal(size=(12, 20))
    a = rank1_factorize(M, tol=1e-13, max_iters=500)
    b = rank1_factorize(lam * M, tol=1e-13, max_iters=500)
    P, Q = np.outer(a.C, a.D), np.outer(b.C, b.D)
    assert np.abs(Q - lam * P).max() < 1e-10 * lam * np.abs(P).max()
    assert np.linalg.norm(a.C - b.C) < 1e-10


def test_objective_local_optimality(rng):
    M = np.outer(rng.normal(size=15), rng.uniform(0.1, 1, 25)) + 0.05 * rng.normal(size=(15, 25))
    mask = (rng.random((5, 25)) < 0.85).astype(np.uint8)
    res = rank1_factorize(M, mask, tol=1e-14, max_iters=1000)
    W = np.repeat(mask, 3, axis=0).astype(bool)

    def f(C, D):
        R = (np.outer(C, D) - M)[W]
        return float(R @ R)

    f0 = f(res.C, res.D)
    assert abs(f0 - res.residuals[-1] ** 2) < 1e-12 * max(f0, 1)
    for _ in range(1000):
        dc = rng.normal(size=15)
        dd = rng.normal(size=25)
        dc *= 1e-6 / np.linalg.norm(dc)
        dd *= 1e-6 / np.linalg.norm(dd)
        assert f(res.C + dc, res.D + dd) >= f0 - 1e-12


@pytest.mark.parametrize("motion", ["circular", "forward"])
def test_noiseless_constraint_matrix_rank1(motion):
    cfg, gt, data = scene(3, motion)
    lmap, odo = run_window(data, data.frame_ids, data.rotations)
    assert odo.result.singular_ratio < 1e-9
    true = np.array([p.position for p in gt.poses])
    for j in range(1, len(true)):
        cols = odo.cols
        d = 1.0 / np.linalg.norm(gt.points[cols], axis=1)
        ok = odo.mask[j - 1].astype(bool)
        V = odo.blocks[j - 1][:, ok]
        assert np.abs(V - np.outer(true[j], d[ok])).max() < 1e-9


def scale_align(est, true):
    s = float(np.sum(est * true) / np.sum(est * est))
    return s * est


def test_noiseless_window_of_five_frames():
    cfg, gt, data = scene(4, n_frames=5)
    lmap, _ = run_window(data, data.frame_ids, data.rotations)
    true = np.array([p.position for p in gt.poses])
    assert np.abs(scale_align(lmap.positions, true) - true).max() < 1e-9
    assert abs(np.linalg.norm(lmap.positions[1:]) - 1) < 1e-12
    assert np.all(lmap.inv_depth > 0)
    assert np.array_equal(lmap.positions[0], np.zeros(3))
    assert np.allclose(lmap.rotations[0], np.eye(3))


def test_insufficient_support():
    cfg, gt, data = scene(5, n_frames=2)
    kf = data.frame(0)
    odo = Rank1Odometry(0, kf.ids, kf.bearings)
    fr = data.frame(1)
    with pytest.raises(InsufficientSupport):
        odo.add_frame(1, fr.ids[:5], fr.bearings[:5], np.eye(3))


def _noisy_data(gt, cfg, sigmas, seed):
    rng = np.random.default_rng(seed)
    K = cfg.intrinsics
    obs = {}
    for j, pose in enumerate(gt.poses):
        px, vis = project(pose, gt.points, K)
        noisy = px + rng.normal(size=px.shape) * sigmas[j]
        obs[j] = {int(k): tuple(noisy[k]) for k in np.flatnonzero(vis)}
    return TrackData.from_observations(K, obs, {j: p.rotation for j, p in enumerate(gt.poses)})


def test_blurry_frame_recovers():
    from rank1slam.eval import aligned_normalized_error

    clean, blurry = [], []
    for seed in range(10):
        cfg = SceneConfig(motion="circular", depth="close", seed=seed)
        gt = generate_scene(cfg)
        true = np.array([p.position for p in gt.poses])
        base = [3.0] * cfg.n_frames
        worse = list(base)
        worse[2] = 20.0
        for sig, out in ((base, clean), (worse, blurry)):
            data = _noisy_data(gt, cfg, sig, seed)
            lmap, _ = run_window(data, data.frame_ids, data.rotations)
            out.append(aligned_normalized_error(lmap.positions, true).mean())
    assert np.mean(blurry) <= 2 * np.mean(clean)
