import os
import subprocess
import sys

import numpy as np
import pytest

from rank1slam import _kernels_py, kernels

from conftest import unit

try:
    from rank1slam import _kernels as compiled
except ImportError:  # pragma: no cover
    compiled = None

needs_ext = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def test_pure_env_forces_fallback():
    code = "from rank1slam import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, RANK1SLAM_PURE="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
def test_compiled_selected_by_default():
    env = {k: v for k, v in os.environ.items() if k != "RANK1SLAM_PURE"}
    out = subprocess.run([sys.executable, "-c", "from rank1slam import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "cython"


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_constraint_vectors_parity(seed):
    rng = np.random.default_rng(seed)
    P = unit(rng, 300)
    Q = unit(rng, 300)
    Q[:5] = -P[:5]          # antipodal pairs
    Q[5:10] = P[5:10]       # identical pairs
    t = unit(rng)
    Q[10] = t               # parallel to the translation ray
    a = _kernels_py.constraint_vectors(t, P, Q)
    b = compiled.constraint_vectors(t, P, Q)
    # identical rays sit exactly on alpha = 0, where the sign of a rounding
    # residue decides the status; only compare away from that tie
    tie = np.abs(a[0]) < 1e-12
    assert np.array_equal(a[3][~tie], b[3][~tie])
    ok = (a[3] == 0) & (b[3] == 0)
    for x, y in zip(a[:2], b[:2]):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-12)
    assert np.allclose(a[2][ok], b[2][ok], rtol=1e-12, atol=1e-12)


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_rank1_als_parity(seed):
    rng = np.random.default_rng(seed)
    m, n = 12, 80
    M = np.outer(rng.normal(size=3 * m), rng.uniform(0.1, 1, n)).reshape(m, 3, n)
    M += 0.01 * rng.normal(size=M.shape)
    W = (rng.random((m, n)) < 0.9).astype(np.uint8)
    D0 = rng.uniform(0.1, 1, n)
    a = _kernels_py.rank1_als(M, W, D0, 1e-10, 50)
    b = compiled.rank1_als(M, W, D0, 1e-10, 50)
    assert a[2] == b[2] and a[4] == b[4]
    assert np.allclose(a[0], b[0], rtol=1e-11, atol=1e-13)
    assert np.allclose(a[1], b[1], rtol=1e-11, atol=1e-13)
    assert np.allclose(a[3], b[3], rtol=1e-11)


@needs_ext
@pytest.mark.parametrize("seed", range(5))
def test_reprojection_parity(seed):
    rng = np.random.default_rng(seed)
    m, n, N = 6, 50, 200
    R = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(m)])
    R *= np.sign(np.linalg.det(R))[:, None, None]
    c = rng.normal(size=(m, 3))
    anchors = unit(rng, n)
    invd = rng.uniform(0.05, 0.3, n)
    f = rng.integers(0, m, N)
    p = rng.integers(0, n, N)
    px = rng.uniform(0, 800, (N, 2))
    args = (R, c, anchors, invd, f, p, px, 700.0, 690.0, 400.0, 300.0)
    for x, y in zip(_kernels_py.reprojection_jacobians(*args), compiled.reprojection_jacobians(*args)):
        assert np.allclose(x, y, rtol=1e-12, atol=1e-9)


def test_dispatch_exports():
    assert kernels.BACKEND in ("python", "cython")
    assert kernels.STATUS_OK == 0
