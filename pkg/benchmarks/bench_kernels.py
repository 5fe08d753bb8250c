"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Sizes mirror one 30-frame window with 200 tracks: constraint vectors per
frame, the warm-started factorization, and one BA linearization.
"""
import argparse
import timeit

import numpy as np

from rank1slam import _kernels_py

try:
    from rank1slam import _kernels as compiled
except ImportError:
    compiled = None


def unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def cases(rng):
    n_tracks, n_frames = 200, 30
    P, Q = unit(rng, n_tracks), unit(rng, n_tracks)
    t = unit(rng, 1)[0]
    yield "constraint_vectors", (t, P, Q)

    M = np.outer(rng.normal(size=3 * n_frames), rng.uniform(0.1, 1, n_tracks)).reshape(n_frames, 3, n_tracks)
    M += 1e-3 * rng.normal(size=M.shape)
    W = (rng.random((n_frames, n_tracks)) < 0.9).astype(np.uint8)
    yield "rank1_als", (M, W, rng.uniform(0.1, 1, n_tracks), 1e-10, 50)

    R = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(n_frames)])
    R *= np.sign(np.linalg.det(R))[:, None, None]
    N = n_frames * n_tracks
    yield "reprojection_jacobians", (R, rng.normal(size=(n_frames, 3)), unit(rng, n_tracks),
                                     rng.uniform(0.05, 0.3, n_tracks), rng.integers(0, n_frames, N),
                                     rng.integers(0, n_tracks, N), rng.uniform(0, 800, (N, 2)),
                                     700.0, 700.0, 400.0, 300.0)


def best_of(fn, args, repeat):
    number = max(1, int(0.2 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-6)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print("%-24s %12s %12s %8s" % ("kernel", "python [us]", "cython [us]", "speedup"))
    for name, a in cases(rng):
        tp = best_of(getattr(_kernels_py, name), a, args.repeat)
        if compiled is None:
            print("%-24s %12.1f %12s %8s" % (name, 1e6 * tp, "n/a", "n/a"))
            continue
        tc = best_of(getattr(compiled, name), a, args.repeat)
        print("%-24s %12.1f %12.1f %7.1fx" % (name, 1e6 * tp, 1e6 * tc, tp / tc))


if __name__ == "__main__":
    main()
