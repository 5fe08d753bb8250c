"""Hot-kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``RANK1SLAM_PURE=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("RANK1SLAM_PURE") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

constraint_vectors = _impl.constraint_vectors
rank1_als = _impl.rank1_als
reprojection_jacobians = _impl.reprojection_jacobians

STATUS_OK = _kernels_py.STATUS_OK
STATUS_PARALLEL = _kernels_py.STATUS_PARALLEL
STATUS_BEHIND = _kernels_py.STATUS_BEHIND
