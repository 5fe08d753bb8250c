"""Rotation, rigid pose and similarity algebra.

Only SO(3) and Sim(3) are covered, in the form the rest of the package needs.
Rotations keep a unit quaternion ``(w, x, y, z)`` internally; the matrix view
is computed on demand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_SMALL_ANGLE = 1e-8
# below this |pi - angle| the trace formula loses precision; switch to the
# diagonal-based axis extraction
_NEAR_PI = 1e-7


def hat(v):
    """Skew-symmetric matrix of a 3-vector, ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    """Shepperd's method; returns a quaternion with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


@dataclass(frozen=True, eq=False)
class Rotation:
    """An element of SO(3) stored as a unit quaternion (w, x, y, z)."""

    quat: np.ndarray

    def __post_init__(self):
        q = np.array(self.quat, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("quaternion must be finite and non-zero")
        if abs(n - 1.0) > 4e-16:
            q = q / n
        if q[0] < 0:
            q = -q
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls) -> Rotation:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R) -> Rotation:
        return cls(matrix_to_quat(R))

    @classmethod
    def from_quat(cls, q) -> Rotation:
        return cls(q)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def as_matrix(self) -> np.ndarray:
        return self.matrix

    def as_quat(self) -> np.ndarray:
        return self.quat.copy()

    def inverse(self) -> Rotation:
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def apply(self, v):
        return self.matrix @ np.asarray(v, dtype=float)

    def __matmul__(self, other):
        if isinstance(other, Rotation):
            return Rotation(quat_multiply(self.quat, other.quat))
        return self.apply(other)

    def angle(self) -> float:
        return float(np.linalg.norm(log_so3(self)))

    def __repr__(self):
        return "Rotation(quat=%s)" % np.array2string(self.quat, precision=6)


def exp_so3_matrix(omega) -> np.ndarray:
    """Rodrigues formula returning a plain 3x3 matrix."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < _SMALL_ANGLE:
        # second-order Taylor; exact to machine precision at this size
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * K @ K


def exp_so3(omega) -> Rotation:
    """Exponential map from an axis-angle vector (radians) to a Rotation."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    half = 0.5 * theta
    if theta < _SMALL_ANGLE:
        s = 0.5 - theta * theta / 48.0
    else:
        s = np.sin(half) / theta
    return Rotation(np.array([np.cos(half), *(s * omega)]))


def log_so3_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # atan2 keeps full relative precision at small angles, unlike arccos
    sin_t = 0.5 * np.linalg.norm(w)
    cos_t = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(sin_t, cos_t))
    if theta < _SMALL_ANGLE:
        return 0.5 * w
    if np.pi - theta < _NEAR_PI or (theta > 0.5 * np.pi and sin_t < 1e-6):
        # the symmetric part is cos(t) I + (1 - cos(t)) a a^T; take the axis
        # from the column of a a^T with the largest diagonal entry
        B = (0.5 * (R + R.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        # keep the branch consistent with the antisymmetric part
        if axis @ w < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * sin_t) * w


def log_so3(R) -> np.ndarray:
    """Logarithm map to an axis-angle vector with norm in [0, pi]."""
    if isinstance(R, Rotation):
        q = R.quat
        w = q[0]
        v = q[1:]
        sv = np.linalg.norm(v)
        if sv < _SMALL_ANGLE:
            return 2.0 * v / w
        theta = 2.0 * np.arctan2(sv, w)
        return theta * v / sv
    return log_so3_matrix(R)


def geodesic_distance(a, b) -> float:
    """Angle in radians of ``a^T b``; accepts Rotations or matrices."""
    Ra = a.matrix if isinstance(a, Rotation) else np.asarray(a)
    Rb = b.matrix if isinstance(b, Rotation) else np.asarray(b)
    return float(np.linalg.norm(log_so3_matrix(Ra.T @ Rb)))


def _perpendicular_axis(u):
    for e in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
        w = e - (e @ u) * u
        n = np.linalg.norm(w)
        if n > 1e-6:
            return w / n
    raise AssertionError("unreachable for unit u")


def rotation_aligning_matrix(u, v) -> np.ndarray:
    """Matrix of the minimal rotation taking unit vector ``u`` onto ``v``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    axis = np.cross(u, v)
    s = np.linalg.norm(axis)
    c = float(u @ v)
    if s < 1e-12 and c < 0:
        a = _perpendicular_axis(u)
        return 2.0 * np.outer(a, a) - np.eye(3)
    # R = I + [k]x + [k]x^2 / (1 + c); for c < 0 use 1 + c = s^2 / (1 - c)
    K = hat(axis)
    f = 1.0 / (1.0 + c) if c >= 0 else (1.0 - c) / (s * s)
    return np.eye(3) + K + f * (K @ K)


def rotation_aligning(u, v) -> Rotation:
    """Rotation about ``u x v`` sending ``u`` to ``v``.

    For antipodal inputs the half turn about the Gram-Schmidt complement of
    (1, 0, 0) (or (0, 1, 0)) against ``u`` is returned.
    """
    return Rotation.from_matrix(rotation_aligning_matrix(u, v))


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, hfov_deg: float, width: int, height: int) -> Intrinsics:
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, px) -> np.ndarray:
        px = np.atleast_2d(px)
        return ((px[:, 0] >= 0) & (px[:, 0] < self.width)
                & (px[:, 1] >= 0) & (px[:, 1] < self.height))


def pixel_to_bearing(px, K: Intrinsics) -> np.ndarray:
    """Unit view ray(s) for pixel(s); accepts shape (2,) or (n, 2)."""
    px = np.asarray(px, dtype=float)
    x = (px[..., 0] - K.cx) / K.fx
    y = (px[..., 1] - K.cy) / K.fy
    ray = np.stack([x, y, np.ones_like(x)], axis=-1)
    return ray / np.linalg.norm(ray, axis=-1, keepdims=True)


def bearing_to_pixel(b, K: Intrinsics) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    z = b[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("direction is not in front of the camera")
    return np.stack([K.fx * b[..., 0] / z + K.cx, K.fy * b[..., 1] / z + K.cy], axis=-1)


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rotation and camera centre in world coordinates."""

    rotation: Rotation
    position: np.ndarray

    def __post_init__(self):
        c = np.array(self.position, dtype=float).reshape(3)
        c.setflags(write=False)
        object.__setattr__(self, "position", c)

    @classmethod
    def identity(cls) -> CameraPose:
        return cls(Rotation.identity(), np.zeros(3))

    def to_camera(self, X):
        """World point(s) into camera coordinates."""
        X = np.asarray(X, dtype=float)
        return (X - self.position) @ self.rotation.matrix.T


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``x -> scale * R x + translation``."""

    scale: float
    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("similarity scale must be positive")
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls(1.0, Rotation.identity(), np.zeros(3))

    def apply(self, x):
        return sim3_apply(self, x)

    def inverse(self) -> SimilarityTransform:
        return sim3_invert(self)

    def __matmul__(self, other: SimilarityTransform) -> SimilarityTransform:
        return sim3_compose(self, other)


def sim3_compose(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """``a o b``: apply ``b`` first."""
    return SimilarityTransform(
        a.scale * b.scale,
        a.rotation @ b.rotation,
        a.scale * (a.rotation.matrix @ b.translation) + a.translation,
    )


def sim3_invert(a: SimilarityTransform) -> SimilarityTransform:
    Rt = a.rotation.inverse()
    return SimilarityTransform(1.0 / a.scale, Rt, -(Rt.matrix @ a.translation) / a.scale)


def sim3_apply(a: SimilarityTransform, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return a.scale * (x @ a.rotation.matrix.T) + a.translation
