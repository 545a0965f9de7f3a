"""Pinhole ray generation and the mask-based training-ray sampler.

Training rays are drawn uniformly over (train frame, valid pixel) pairs so
the black border outside the circular view is never sampled; the unmasked
sampler exists as the ablation arm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .colmap import CameraModel, PoseSE3, camera_to_world
from .dataset import DatasetManifest, Split
from .errors import EmptyTrainSet, OutOfBounds, RayMissesBounds
from .geometry import Aabb, ray_aabb_intersect

DEFAULT_MIN_NEAR = 1e-3


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction norm {n} is not unit")
        object.__setattr__(self, "direction", d)
        if not 0 <= self.t_near < self.t_far:
            raise ValueError(f"need 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class RayBatch:
    """Parallel arrays describing one batch of training rays."""

    origins: np.ndarray      # (B, 3)
    directions: np.ndarray   # (B, 3) unit
    t_near: np.ndarray       # (B,)
    t_far: np.ndarray        # (B,)
    target_rgb: np.ndarray   # (B, 3) linear
    frame_index: np.ndarray  # (B,) manifest frame index
    pixel_xy: np.ndarray     # (B, 2) integer pixel coordinates

    def __len__(self) -> int:
        return self.origins.shape[0]


def _camera_dirs(camera: CameraModel, px, py) -> np.ndarray:
    x = (np.asarray(px, dtype=np.float64) + 0.5 - camera.cx) / camera.fx
    y = (np.asarray(py, dtype=np.float64) + 0.5 - camera.cy) / camera.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def pixel_ray(
    camera: CameraModel,
    pose: PoseSE3,
    px: float,
    py: float,
    bounds: Aabb,
    min_near: float = DEFAULT_MIN_NEAR,
) -> Ray:
    """World-space ray through the center of pixel (px, py).

    Raises RayMissesBounds when the ray never enters the scene box; the
    renderer answers such pixels with the background color.
    """
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise OutOfBounds(f"pixel ({px}, {py}) outside {camera.width}x{camera.height}")
    c2w = camera_to_world(pose)
    d = c2w[:3, :3] @ _camera_dirs(camera, px, py).reshape(3)
    d = d / np.linalg.norm(d)
    o = c2w[:3, 3]
    t0, t1, hit = ray_aabb_intersect(o, d, bounds, min_near=min_near)
    if not bool(hit[0]):
        raise RayMissesBounds(f"pixel ({px}, {py}) sees empty space")
    return Ray(o, d, float(t0[0]), float(t1[0]))


def frame_ray_grid(
    camera: CameraModel,
    pose: PoseSE3,
    bounds: Aabb,
    min_near: float = DEFAULT_MIN_NEAR,
):
    """Rays for every pixel of a frame.

    Returns (origins (H*W,3), directions (H*W,3), t_near, t_far, hit) in
    row-major pixel order; missed rays carry t_near = t_far = 0.
    """
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    dirs_cam = _camera_dirs(camera, xs.ravel(), ys.ravel())
    c2w = camera_to_world(pose)
    dirs = dirs_cam @ c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(c2w[:3, 3], dirs.shape).copy()
    t0, t1, hit = ray_aabb_intersect(origins, dirs, bounds, min_near=min_near)
    t0 = np.where(hit, t0, 0.0)
    t1 = np.where(hit, t1, 0.0)
    return origins, dirs, t0, t1, hit


class RaySampler:
    """Precomputed flat pixel index over the training frames.

    Draws are O(1) per ray; rejection sampling would scale with the border
    fraction. Deterministic given the caller's generator; for concurrent
    producers derive one generator per worker by spawning the root seed
    sequence so batch content does not depend on scheduling.
    """

    def __init__(self, manifest: DatasetManifest):
        train = manifest.train_frames()
        if not train:
            raise EmptyTrainSet("manifest has no TRAIN frames")
        self.manifest = manifest
        self.camera = manifest.camera
        self.bounds = manifest.bounds
        self.frames = train
        self.frame_indices = np.array([f.index for f in train], dtype=np.int64)
        h, w = self.camera.height, self.camera.width
        self.width, self.height = w, h
        imgs = np.stack([manifest.load_linear(f) for f in train])
        self.targets = imgs.astype(np.float32)  # (N, H, W, 3) linear
        valid = manifest.mask.valid_array()
        if int(valid.sum()) < 1:
            raise EmptyTrainSet("mask has no valid pixels")
        self.valid_flat = np.flatnonzero(valid.ravel())
        self.all_flat = np.arange(h * w, dtype=np.int64)
        self.rotations = np.stack([camera_to_world(f.pose)[:3, :3] for f in train])
        self.centers = np.stack([camera_to_world(f.pose)[:3, 3] for f in train])

    def _batch(self, rng: np.random.Generator, batch_size: int, flat_index: np.ndarray) -> RayBatch:
        n_frames = len(self.frames)
        v = flat_index.shape[0]
        pair = rng.integers(0, n_frames * v, size=batch_size)
        fsel = pair // v
        flat = flat_index[pair % v]
        py, px = flat // self.width, flat % self.width
        dirs_cam = _camera_dirs(self.camera, px, py)
        dirs = np.einsum("bij,bj->bi", self.rotations[fsel], dirs_cam)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = self.centers[fsel]
        t0, t1, hit = ray_aabb_intersect(origins, dirs, self.bounds, min_near=DEFAULT_MIN_NEAR)
        t0 = np.where(hit, t0, 0.0)
        t1 = np.where(hit, t1, 0.0)
        targets = self.targets[fsel, py, px].astype(np.float64)
        return RayBatch(
            origins=origins,
            directions=dirs,
            t_near=t0,
            t_far=t1,
            target_rgb=targets,
            frame_index=self.frame_indices[fsel],
            pixel_xy=np.stack([px, py], axis=1),
        )

    def masked_batch(self, rng: np.random.Generator, batch_size: int) -> RayBatch:
        return self._batch(rng, batch_size, self.valid_flat)

    def unmasked_batch(self, rng: np.random.Generator, batch_size: int) -> RayBatch:
        return self._batch(rng, batch_size, self.all_flat)


def _as_sampler(dataset) -> RaySampler:
    return dataset if isinstance(dataset, RaySampler) else RaySampler(dataset)


def sample_masked_batch(dataset, rng: np.random.Generator, batch_size: int) -> RayBatch:
    """Rays drawn uniformly over (TRAIN frame, in-circle pixel) pairs."""
    return _as_sampler(dataset).masked_batch(rng, batch_size)


def sample_unmasked_batch(dataset, rng: np.random.Generator, batch_size: int) -> RayBatch:
    """Ablation arm: rays drawn over all pixels including the black border."""
    return _as_sampler(dataset).unmasked_batch(rng, batch_size)
