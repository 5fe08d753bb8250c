"""Synthetic scenes, trajectories, noisy tracks and noisy rotations.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence([seed, stream])``; separate streams are used for the scene,
the pixel noise and the rotation noise so changing one knob does not shift
the others.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import CameraPose, Intrinsics, Rotation, exp_so3, exp_so3_matrix
from .tracks import TrackData

DEPTH_RANGES = {"close": (5.0, 10.0), "far": (10.0, 15.0)}
MOTIONS = ("circular", "forward")

_SCENE_STREAM, _PIXEL_STREAM, _ROT_STREAM = 0, 1, 2


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class SceneConfig:
    motion: str = "forward"
    depth: str = "close"
    n_frames: int = 30
    camera_interval: float = 0.05
    hfov_deg: float = 60.0
    width: int = 800
    height: int = 600
    n_points: int = 200
    pixel_noise_sigma: float = 3.0
    rotation_noise_deg: float = 0.0
    seed: int = 0
    depth_range: tuple | None = None

    def __post_init__(self):
        if self.motion not in MOTIONS:
            raise ValueError("motion must be one of %s" % (MOTIONS,))
        if self.depth_range is None:
            if self.depth not in DEPTH_RANGES:
                raise ValueError("depth must be one of %s" % (tuple(DEPTH_RANGES),))
            object.__setattr__(self, "depth_range", DEPTH_RANGES[self.depth])
        lo, hi = self.depth_range
        if not 0 < lo < hi:
            raise ValueError("depth range must satisfy 0 < min < max")
        if self.n_frames < 2:
            raise ValueError("need at least two frames")
        if self.pixel_noise_sigma < 0 or self.rotation_noise_deg < 0:
            raise ValueError("noise levels must be non-negative")
        if self.camera_interval <= 0 or self.n_points < 1:
            raise ValueError("camera interval and point count must be positive")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.from_fov(self.hfov_deg, self.width, self.height)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        return d


@dataclass
class GroundTruth:
    poses: list
    points: np.ndarray


def _circular_trajectory(centroid, n, interval):
    radius = np.linalg.norm(centroid)
    u = centroid / radius
    up = np.array([0.0, 1.0, 0.0])
    axis = up - (up @ u) * u
    axis /= np.linalg.norm(axis)
    step = 2.0 * np.arcsin(min(interval / (2.0 * radius), 1.0))
    poses = []
    for j in range(n):
        Q = exp_so3_matrix(axis * (j * step))
        c = centroid + Q @ (-centroid)
        # camera j is camera 0 carried rigidly around the orbit, so the
        # centroid stays at the same image location
        poses.append(CameraPose(Rotation.from_matrix(Q.T), c))
    return poses


def generate_scene(config: SceneConfig) -> GroundTruth:
    rng = rng_for(config.seed, _SCENE_STREAM)
    K = config.intrinsics
    n = config.n_points
    u = rng.uniform(0.0, K.width, n)
    v = rng.uniform(0.0, K.height, n)
    lo, hi = config.depth_range
    z = rng.uniform(lo, hi, n)
    pts = np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=1)
    centroid = pts.mean(axis=0)

    if config.motion == "forward":
        d = centroid / np.linalg.norm(centroid)
        poses = [CameraPose(Rotation.identity(), j * config.camera_interval * d)
                 for j in range(config.n_frames)]
    else:
        poses = _circular_trajectory(centroid, config.n_frames, config.camera_interval)
    poses[0] = CameraPose.identity()
    return GroundTruth(poses, pts)


def project(pose: CameraPose, points, K: Intrinsics):
    """Pixels of world points and a mask of those in front of the camera and inside the image."""
    Xc = pose.to_camera(points)
    z = Xc[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    px = np.stack([K.fx * Xc[:, 0] / zs + K.cx, K.fy * Xc[:, 1] / zs + K.cy], axis=1)
    return px, front & K.contains(px)


def generate_tracks(gt: GroundTruth, config: SceneConfig) -> TrackData:
    """Noisy pixel observations of every visible point in every frame."""
    rng = rng_for(config.seed, _PIXEL_STREAM)
    K = config.intrinsics
    obs = {}
    for j, pose in enumerate(gt.poses):
        px, vis = project(pose, gt.points, K)
        # draw noise for all points so visibility does not shift the stream
        noise = rng.normal(0.0, 1.0, px.shape) * config.pixel_noise_sigma
        noisy = px + noise
        obs[j] = {int(k): (noisy[k, 0], noisy[k, 1]) for k in np.flatnonzero(vis)}
    truth = {j: p for j, p in enumerate(gt.poses)}
    return TrackData.from_observations(K, obs, ground_truth=truth)


def perturb_rotations(gt: GroundTruth, rotation_noise_deg: float, seed: int) -> dict:
    """Per-frame world-to-camera rotations with random-axis angular noise."""
    if rotation_noise_deg < 0:
        raise ValueError("rotation noise must be non-negative")
    if rotation_noise_deg == 0:
        return {j: p.rotation for j, p in enumerate(gt.poses)}
    rng = rng_for(seed, _ROT_STREAM)
    out = {}
    for j, p in enumerate(gt.poses):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = abs(rng.normal(0.0, rotation_noise_deg))
        out[j] = exp_so3(axis * np.radians(angle)) @ p.rotation
    return out


def make_dataset(config: SceneConfig, with_rotations=True) -> tuple[GroundTruth, TrackData]:
    """Scene plus track data; rotations (perturbed per the config) attached as ``rot`` records."""
    gt = generate_scene(config)
    data = generate_tracks(gt, config)
    if with_rotations:
        data.rotations = perturb_rotations(gt, config.rotation_noise_deg, config.seed)
    return gt, data
