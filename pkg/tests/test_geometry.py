import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm
from scipy.spatial.transform import Rotation as SciRot

from rank1slam.geometry import (BehindCameraError, Intrinsics, Rotation, SimilarityTransform, bearing_to_pixel,
                                exp_so3, exp_so3_matrix, geodesic_distance, hat, log_so3, log_so3_matrix,
                                pixel_to_bearing, rotation_aligning, sim3_apply, sim3_compose, sim3_invert)

from conftest import random_rotation, unit

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)

# expm of hat((0.1, -0.2, 0.3)), computed once with scipy.linalg.expm
EXPM_REF = np.array([
    [0.9357548032779189, -0.30293271340263705, -0.18054007669439773],
    [0.28316496056507373, 0.9505806179060915, -0.12733457491763026],
    [0.21019170595074285, 0.06803131640494002, 0.9752903089530457],
])
QUAT_REF = np.array([0.9825509821552589, 0.04970884332485948, -0.09941768664971895, 0.14912652997457843])


def series_exp(w, terms=20):
    K = hat(w)
    out = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ K / k
        out = out + term
    return out


def test_exp_zero_is_identity():
    assert np.array_equal(exp_so3(np.zeros(3)).matrix, np.eye(3))
    assert np.allclose(log_so3(Rotation.identity()), 0.0)


def test_quarter_turn_about_z():
    R = exp_so3([0, 0, math.pi / 2])
    assert np.allclose(R.apply([1.0, 0, 0]), [0, 1, 0], atol=1e-15)


def test_exp_frozen_reference():
    w = np.array([0.1, -0.2, 0.3])
    assert np.allclose(exp_so3(w).matrix, EXPM_REF, atol=1e-15)
    assert np.allclose(exp_so3_matrix(w), EXPM_REF, atol=1e-15)
    assert np.allclose(exp_so3(w).quat, QUAT_REF, atol=1e-15)


def test_exp_matches_power_series(rng):
    for _ in range(50):
        w = unit(rng) * 0.3
        assert np.abs(exp_so3(w).matrix - series_exp(w)).max() < 1e-12
        assert np.abs(exp_so3_matrix(w) - expm(hat(w))).max() < 1e-12


def test_log_round_trip_1000(rng):
    for _ in range(1000):
        v = unit(rng) * rng.uniform(0, 3)
        assert np.linalg.norm(log_so3(exp_so3(v)) - v) < 1e-10
        assert np.linalg.norm(log_so3_matrix(exp_so3_matrix(v)) - v) < 1e-10


@given(vec3)
def test_exp_log_property(w):
    if np.linalg.norm(w) > 3:
        w = w / np.linalg.norm(w) * 3
    R = exp_so3(w)
    assert abs(np.linalg.det(R.matrix) - 1) < 1e-9
    assert np.abs(R.matrix.T @ R.matrix - np.eye(3)).max() < 1e-9
    assert np.linalg.norm(log_so3(R) - w) < 1e-10


def test_log_matches_scipy(rng):
    for _ in range(200):
        q = random_rotation(rng)
        R = Rotation(q)
        ref = SciRot.from_quat(np.r_[q[1:], q[0]]).as_rotvec()
        assert np.allclose(log_so3_matrix(R.matrix), ref, atol=1e-9)


def test_log_half_turn():
    R = exp_so3_matrix([0, 0, math.pi])
    w = log_so3_matrix(R)
    assert abs(np.linalg.norm(w) - math.pi) < 1e-12
    assert abs(abs(w[2]) - math.pi) < 1e-12


def test_log_near_pi_stays_accurate(rng):
    for _ in range(200):
        axis = unit(rng)
        th = math.pi - 10 ** rng.uniform(-12, -6)
        w = log_so3_matrix(exp_so3_matrix(axis * th))
        # the near-pi branch is documented to 1e-7
        assert np.linalg.norm(np.abs(w) - np.abs(axis * th)) < 1e-7


def test_geodesic_distance():
    a = exp_so3([0.2, 0, 0])
    b = exp_so3([0.5, 0, 0])
    assert abs(geodesic_distance(a, b) - 0.3) < 1e-14


def test_rotation_aligning_trivial():
    assert np.allclose(rotation_aligning([0, 0, 1.0], [0, 0, 1.0]).matrix, np.eye(3))
    R = rotation_aligning([1.0, 0, 0], [0, 1.0, 0])
    assert np.allclose(log_so3(R), [0, 0, math.pi / 2], atol=1e-15)


def test_rotation_aligning_10k(rng):
    u = unit(rng, 10_000)
    v = unit(rng, 10_000)
    worst = 0.0
    for a, b in zip(u, v):
        R = rotation_aligning(a, b)
        worst = max(worst, np.linalg.norm(R.apply(a) - b))
        axis = log_so3(R)
        c = np.cross(a, b)
        assert np.linalg.norm(np.cross(axis, c)) < 1e-8 * max(np.linalg.norm(c), 1)
    assert worst < 1e-10


def test_rotation_aligning_antipodal():
    u = np.array([0.0, 0, 1])
    R = rotation_aligning(u, -u)
    assert np.allclose(R.apply(u), -u)
    assert abs(R.angle() - math.pi) < 1e-9
    # Gram-Schmidt of (1, 0, 0) against u is (1, 0, 0)
    assert np.allclose(np.abs(log_so3(R)), [math.pi, 0, 0], atol=1e-9)
    u = np.array([1.0, 0, 0])
    R = rotation_aligning(u, -u)
    assert np.allclose(np.abs(log_so3(R)), [0, math.pi, 0], atol=1e-9)


def test_rotation_invariants_after_many_compositions(rng):
    R = Rotation.identity()
    for _ in range(10_000):
        R = R @ exp_so3(unit(rng) * 0.1)
    M = R.matrix
    assert abs(np.linalg.det(M) - 1) < 1e-9
    assert np.abs(M.T @ M - np.eye(3)).max() < 1e-9


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0, 1, 1, 1, 10, 10)
    with pytest.raises(ValueError):
        Intrinsics(1, 1, 10, 1, 10, 10)


def test_pixel_bearing_trivial():
    K = Intrinsics(500.0, 400.0, 320.0, 240.0, 640, 480)
    assert np.allclose(pixel_to_bearing([320.0, 240.0], K), [0, 0, 1])
    b = pixel_to_bearing([820.0, 240.0], K)
    assert np.allclose(b, np.array([1, 0, 1]) / math.sqrt(2))
    with pytest.raises(BehindCameraError):
        bearing_to_pixel([0, 0, -1.0], K)


def test_pixel_round_trip(rng):
    K = Intrinsics.from_fov(60, 800, 600)
    px = rng.uniform([0, 0], [800, 600], size=(1000, 2))
    b = pixel_to_bearing(px, K)
    assert np.allclose(np.linalg.norm(b, axis=1), 1, atol=1e-12)
    assert np.abs(bearing_to_pixel(b, K) - px).max() < 1e-9


def random_sim3(rng):
    return SimilarityTransform(float(np.exp(rng.uniform(-1, 1))), Rotation(random_rotation(rng)),
                               rng.normal(size=3) * 3)


def test_sim3_trivial():
    T = SimilarityTransform(2.0, Rotation.identity(), np.zeros(3))
    assert np.allclose(sim3_apply(T, [1, 1, 1]), [2, 2, 2])
    I = sim3_compose(T, sim3_invert(T))
    assert abs(I.scale - 1) < 1e-15 and np.allclose(I.translation, 0)
    with pytest.raises(ValueError):
        SimilarityTransform(0.0, Rotation.identity(), np.zeros(3))


@given(st.integers(0, 2**31 - 1))
def test_sim3_group_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = random_sim3(rng), random_sim3(rng), random_sim3(rng)
    x = rng.normal(size=3) * 10
    tol = 1e-9 * (1 + np.linalg.norm(x))
    assert np.linalg.norm((a @ b).apply(x) - a.apply(b.apply(x))) < tol * 10
    assert np.linalg.norm(a.inverse().apply(a.apply(x)) - x) < tol * 10
    left = ((a @ b) @ c).apply(x)
    right = (a @ (b @ c)).apply(x)
    assert np.linalg.norm(left - right) < tol * 100
    e = SimilarityTransform.identity()
    assert np.linalg.norm((a @ e).apply(x) - a.apply(x)) < tol
