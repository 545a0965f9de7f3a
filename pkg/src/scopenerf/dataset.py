"""Dataset preparation: frame selection, crop/downscale, circular mask, split.

Video decoding is out of process; the input is a directory of already
extracted frames plus the sparse model estimated on them.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import images as imio
from .colmap import CameraModel, CameraModelKind, PoseSE3, SparseModel, scene_bounds
from .errors import (
    BadCount,
    BadFactor,
    BadFractions,
    BadRadius,
    DimensionMismatch,
    MissingFrameFile,
    NoPoses,
)
from .geometry import Aabb

MANIFEST_SCHEMA = 1
_IMAGE_EXTS = {".png", ".jpg", ".jpeg"}


class Split(enum.Enum):
    TRAIN = "TRAIN"
    EVAL = "EVAL"
    UNPOSED = "UNPOSED"


@dataclass(frozen=True)
class FrameRecord:
    index: int
    path: str
    pose: Optional[PoseSE3]
    width: int
    height: int
    split: Split

    def __post_init__(self):
        if (self.pose is None) != (self.split is Split.UNPOSED):
            raise ValueError("split is UNPOSED exactly when the pose is absent")


@dataclass(frozen=True)
class CircleMask:
    """Single centered validity circle shared by every frame."""

    cx: float
    cy: float
    radius: float
    width: int
    height: int
    valid_count: int

    def __post_init__(self):
        if not 0 < self.radius <= max(self.width, self.height):
            raise BadRadius(f"radius {self.radius} outside (0, max(width, height)]")
        if self.valid_count != int(self.valid_array().sum()):
            raise ValueError("valid_count does not match the pixel-center count")

    def valid_array(self) -> np.ndarray:
        """(H, W) bool; True where the pixel center falls inside the circle."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        dx = xs + 0.5 - self.cx
        dy = ys + 0.5 - self.cy
        return dx * dx + dy * dy <= self.radius * self.radius

    def contains(self, px, py):
        dx = np.asarray(px) + 0.5 - self.cx
        dy = np.asarray(py) + 0.5 - self.cy
        return dx * dx + dy * dy <= self.radius * self.radius


def equidistant_indices(total: int, n: int) -> list[int]:
    """``n`` strictly increasing frame indices spread evenly over ``[0, total)``.

    Index k is round(k * (total-1) / (n-1)); a single frame selects index 0.
    """
    if n < 1 or n > total:
        raise BadCount(f"need 1 <= n <= total, got n={n}, total={total}")
    if n == 1:
        return [0]
    step = (total - 1) / (n - 1)
    return [int(math.floor(k * step + 0.5)) for k in range(n)]


def crop_window(src_width: int, left_frac: float, right_frac: float) -> tuple[int, int]:
    """(left offset, output width) for a horizontal crop given edge fractions."""
    if left_frac < 0 or right_frac < 0 or left_frac + right_frac >= 1:
        raise BadFractions(f"need left+right < 1, got {left_frac}+{right_frac}")
    width = int(math.floor(src_width * (1 - left_frac - right_frac) + 0.5))
    left = int(math.floor(src_width * left_frac + 0.5))
    left = max(0, min(left, src_width - width))
    return left, width


def crop_width(src_width: int, left_frac: float, right_frac: float) -> int:
    return crop_window(src_width, left_frac, right_frac)[1]


def downscale_dims(width: int, height: int, factor: int) -> tuple[int, int]:
    if factor < 1 or int(factor) != factor:
        raise BadFactor(f"downscale factor must be a positive integer, got {factor}")
    return width // int(factor), height // int(factor)


def scale_camera(camera: CameraModel, out_w: int, out_h: int, in_w: int, in_h: int,
                 crop_left: float = 0.0, crop_top: float = 0.0) -> CameraModel:
    """Rebuild pinhole intrinsics after a crop (applied first) and resize.

    Focal lengths and principal point scale by exactly out_dim/in_dim per axis.
    """
    if not camera.is_pinhole:
        raise DimensionMismatch("intrinsics rescale requires an undistorted pinhole camera")
    sx, sy = out_w / in_w, out_h / in_h
    return CameraModel.pinhole(
        camera.camera_id,
        out_w,
        out_h,
        camera.fx * sx,
        camera.fy * sy,
        (camera.cx - crop_left) * sx,
        (camera.cy - crop_top) * sy,
    )


def build_circle_mask(width: int, height: int, radius_frac: float) -> CircleMask:
    """Centered circle mask; radius = radius_frac * min(width, height) / 2.

    ``radius_frac`` may exceed 1 (up to 2) so the circle can circumscribe the
    frame entirely.
    """
    if not 0 < radius_frac <= 2:
        raise BadRadius(f"radius_frac must be in (0, 2], got {radius_frac}")
    cx, cy = width / 2.0, height / 2.0
    radius = radius_frac * min(width, height) / 2.0
    ys, xs = np.mgrid[0:height, 0:width]
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    count = int((dx * dx + dy * dy <= radius * radius).sum())
    return CircleMask(cx, cy, radius, width, height, count)


def split_train_eval(posed_frames: list, eval_every: int) -> tuple[list, list]:
    """Every ``eval_every``-th position (the last of each block) goes to EVAL."""
    if eval_every < 2:
        raise ValueError(f"eval_every must be >= 2, got {eval_every}")
    train, evals = [], []
    for p, frame in enumerate(posed_frames):
        (evals if p % eval_every == eval_every - 1 else train).append(frame)
    return train, evals


def estimate_mask_radius_frac(
    frames: list[np.ndarray],
    intensity_floor: float = 5.0 / 255.0,
    frame_agreement: float = 0.95,
    ring_halfwidth: float = 1.0,
) -> float:
    """Estimate the vignette radius from frame content.

    Sweeps candidate radii downward and picks the largest whose ring of
    pixels has mean display intensity above ``intensity_floor`` on at least
    ``frame_agreement`` of the frames.
    """
    if not frames:
        raise BadRadius("radius estimation requires at least one frame")
    h, w = frames[0].shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    dist = np.sqrt((xs + 0.5 - w / 2.0) ** 2 + (ys + 0.5 - h / 2.0) ** 2)
    intensities = np.stack([f.mean(axis=2) for f in frames])
    half_min = min(w, h) / 2.0
    for frac in np.arange(1.0, 0.09, -0.01):
        r = frac * half_min
        ring = np.abs(dist - r) <= ring_halfwidth
        if not ring.any():
            continue
        means = intensities[:, ring].mean(axis=1)
        if (means > intensity_floor).mean() >= frame_agreement:
            return float(frac)
    raise BadRadius("no radius found with bright ring content; set one explicitly")


@dataclass
class PrepConfig:
    crop_left_frac: float = 0.0
    crop_right_frac: float = 0.0
    downscale: int = 1
    mask_radius_frac: float = 1.0
    auto_mask: bool = False
    eval_every: int = 10
    bounds_lo_pct: float = 0.01
    bounds_hi_pct: float = 0.99
    bounds_inflate: float = 1.5
    fps: Optional[float] = None
    total_source_frames: Optional[int] = None
    expected_frame_count: Optional[int] = None


@dataclass
class DatasetManifest:
    frames: list
    camera: CameraModel
    mask: CircleMask
    bounds: Aabb
    source_meta: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @property
    def n_frame(self) -> int:
        return len(self.frames)

    @property
    def n_pose(self) -> int:
        return sum(1 for f in self.frames if f.split is not Split.UNPOSED)

    def of_split(self, split: Split) -> list:
        return [f for f in self.frames if f.split is split]

    def train_frames(self) -> list:
        return self.of_split(Split.TRAIN)

    def eval_frames(self) -> list:
        return self.of_split(Split.EVAL)

    def frame_path(self, frame: FrameRecord) -> Path:
        p = Path(frame.path)
        return p if p.is_absolute() else self.base_dir / p

    def load_linear(self, frame: FrameRecord) -> np.ndarray:
        return imio.load_linear(self.frame_path(frame))

    def load_srgb(self, frame: FrameRecord) -> np.ndarray:
        return imio.load_srgb(self.frame_path(frame))

    def validate(self) -> "DatasetManifest":
        posed = [f for f in self.frames if f.split is not Split.UNPOSED]
        if not posed:
            raise NoPoses("manifest has no posed frames")
        dims = {(f.width, f.height) for f in posed}
        if len(dims) != 1:
            raise DimensionMismatch(f"posed frames disagree on dimensions: {sorted(dims)}")
        eval_pos = [p for p, f in enumerate(posed) if f.split is Split.EVAL]
        gaps = set(np.diff(eval_pos).tolist())
        if len(gaps) > 1:
            raise ValueError("EVAL frames are not equally spaced over the posed ordering")
        return self

    def to_json(self) -> dict:
        def frame_obj(f: FrameRecord) -> dict:
            return {
                "index": f.index,
                "path": f.path,
                "pose": None if f.pose is None else {"q": list(f.pose.q), "t": list(f.pose.t)},
                "width": f.width,
                "height": f.height,
                "split": f.split.value,
            }

        return {
            "schema": MANIFEST_SCHEMA,
            "camera": {
                "camera_id": self.camera.camera_id,
                "model_kind": self.camera.model_kind.name,
                "width": self.camera.width,
                "height": self.camera.height,
                "params": list(self.camera.params),
            },
            "mask": {
                "cx": self.mask.cx,
                "cy": self.mask.cy,
                "radius": self.mask.radius,
                "width": self.mask.width,
                "height": self.mask.height,
                "valid_count": self.mask.valid_count,
            },
            "bounds": self.bounds.to_json(),
            "frames": [frame_obj(f) for f in self.frames],
            "source_meta": self.source_meta,
        }

    def save(self, path) -> None:
        """Write the JSON document plus the mask PNG alongside it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
        imio.save_mask_png(path.parent / "mask.png", self.mask.valid_array())

    @classmethod
    def from_json(cls, obj: dict, base_dir: Path) -> "DatasetManifest":
        if obj.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"unsupported manifest schema {obj.get('schema')!r}")
        cam = obj["camera"]
        camera = CameraModel(
            cam["camera_id"],
            CameraModelKind[cam["model_kind"]],
            cam["width"],
            cam["height"],
            tuple(cam["params"]),
        )
        m = obj["mask"]
        mask = CircleMask(m["cx"], m["cy"], m["radius"], m["width"], m["height"], m["valid_count"])
        frames = [
            FrameRecord(
                index=fo["index"],
                path=fo["path"],
                pose=None if fo["pose"] is None else PoseSE3(tuple(fo["pose"]["q"]), tuple(fo["pose"]["t"])),
                width=fo["width"],
                height=fo["height"],
                split=Split(fo["split"]),
            )
            for fo in obj["frames"]
        ]
        return cls(
            frames=frames,
            camera=camera,
            mask=mask,
            bounds=Aabb.from_json(obj["bounds"]),
            source_meta=obj.get("source_meta", {}),
            base_dir=base_dir,
        ).validate()

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(json.load(f), base_dir=path.parent)


def _undistort_to_pinhole(img: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Resample a distorted frame onto its ideal pinhole with bilinear lookup."""
    import cv2

    K = np.array(
        [[camera.fx, 0, camera.cx], [0, camera.fy, camera.cy], [0, 0, 1]], dtype=np.float64
    )
    d = list(camera.distortion)
    if camera.model_kind is CameraModelKind.SIMPLE_RADIAL:
        dist = np.array([d[0], 0, 0, 0], dtype=np.float64)
    else:  # OPENCV: k1 k2 p1 p2
        dist = np.array(d, dtype=np.float64)
    mapx, mapy = cv2.initUndistortRectifyMap(
        K, dist, None, K, (camera.width, camera.height), cv2.CV_32FC1
    )
    out = cv2.remap(img.astype(np.float32), mapx, mapy, interpolation=cv2.INTER_LINEAR)
    return out.astype(np.float64)


def build_manifest(
    sparse: SparseModel,
    frames_dir,
    cfg: PrepConfig,
    out_dir=None,
) -> DatasetManifest:
    """Assemble the training dataset from extracted frames plus a sparse model.

    When cropping, downscaling, or undistortion changes pixels, processed
    frames are written under ``out_dir/frames`` and the manifest references
    those; otherwise source frames are referenced in place.
    """
    frames_dir = Path(frames_dir)
    names = sorted(p.name for p in frames_dir.iterdir() if p.suffix.lower() in _IMAGE_EXTS)
    if not names:
        raise MissingFrameFile(f"no image files in {frames_dir}")
    if cfg.expected_frame_count is not None and len(names) != cfg.expected_frame_count:
        raise BadCount(
            f"found {len(names)} frames in {frames_dir}, expected {cfg.expected_frame_count}"
        )

    pose_by_name = {im.name: im for im in sparse.images.values()}
    for im_name in pose_by_name:
        if im_name not in set(names):
            raise MissingFrameFile(f"registered image {im_name!r} has no file in {frames_dir}")
    if not any(n in pose_by_name for n in names):
        raise NoPoses("no frame in the directory matches a registered image")

    cam_ids = {im.camera_id for im in sparse.images.values()}
    if len(cam_ids) > 1:
        raise DimensionMismatch(f"frames reference {len(cam_ids)} cameras; expected one")
    camera = sparse.cameras[next(iter(cam_ids))]

    from PIL import Image

    src_dims = set()
    for n in names:
        with Image.open(frames_dir / n) as im:
            src_dims.add(im.size)
    if len(src_dims) != 1:
        raise DimensionMismatch(f"frames disagree on dimensions: {sorted(src_dims)}")
    src_w, src_h = src_dims.pop()
    if (camera.width, camera.height) != (src_w, src_h):
        raise DimensionMismatch(
            f"camera calibrated at {camera.width}x{camera.height} but frames are {src_w}x{src_h}"
        )

    left, cw = crop_window(src_w, cfg.crop_left_frac, cfg.crop_right_frac)
    out_w, out_h = downscale_dims(cw, src_h, cfg.downscale)
    needs_undistort = not camera.is_pinhole
    needs_pixels = needs_undistort or left > 0 or cw != src_w or cfg.downscale != 1

    pinhole_src = camera if camera.is_pinhole else CameraModel.pinhole(
        camera.camera_id, camera.width, camera.height, camera.fx, camera.fy, camera.cx, camera.cy
    )
    out_camera = scale_camera(pinhole_src, out_w, out_h, cw, src_h, crop_left=left)

    if needs_pixels:
        if out_dir is None:
            raise ValueError("out_dir is required when frames must be resampled")
        proc_dir = Path(out_dir) / "frames"
        proc_dir.mkdir(parents=True, exist_ok=True)
        for n in names:
            img = imio.load_srgb(frames_dir / n)
            if needs_undistort:
                img = np.clip(_undistort_to_pinhole(img, camera), 0.0, 1.0)
            img = img[:, left : left + cw]
            img = imio.box_downscale(img, cfg.downscale)
            imio.save_srgb(proc_dir / (Path(n).stem + ".png"), img)

        def record_path(n):
            return str(Path("frames") / (Path(n).stem + ".png"))

        def load_processed(n):
            return imio.load_srgb(proc_dir / (Path(n).stem + ".png"))

        base_dir = Path(out_dir)
    else:

        def record_path(n):
            return str((frames_dir / n).resolve())

        def load_processed(n):
            return imio.load_srgb(frames_dir / n)

        base_dir = Path(".")

    if cfg.auto_mask:
        sample_names = names[:: max(1, len(names) // 25)]
        radius_frac = estimate_mask_radius_frac([load_processed(n) for n in sample_names])
    else:
        radius_frac = cfg.mask_radius_frac
    mask = build_circle_mask(out_w, out_h, radius_frac)

    bounds = scene_bounds(
        list(sparse.points.values()), cfg.bounds_lo_pct, cfg.bounds_hi_pct, cfg.bounds_inflate
    )

    posed_idx = [i for i, n in enumerate(names) if n in pose_by_name]
    train_set, eval_set = split_train_eval(posed_idx, cfg.eval_every)
    split_of = {i: Split.TRAIN for i in train_set}
    split_of.update({i: Split.EVAL for i in eval_set})

    frames = []
    for i, n in enumerate(names):
        im = pose_by_name.get(n)
        frames.append(
            FrameRecord(
                index=i,
                path=record_path(n),
                pose=None if im is None else im.pose,
                width=out_w,
                height=out_h,
                split=split_of.get(i, Split.UNPOSED),
            )
        )

    meta = {
        "fps": cfg.fps,
        "total_source_frames": cfg.total_source_frames,
        "crop_left_frac": cfg.crop_left_frac,
        "crop_right_frac": cfg.crop_right_frac,
        "downscale": cfg.downscale,
        "eval_every": cfg.eval_every,
        "mask_radius_frac": radius_frac,
        "n_frame": len(names),
        "n_pose": len(posed_idx),
    }
    return DatasetManifest(
        frames=frames,
        camera=out_camera,
        mask=mask,
        bounds=bounds,
        source_meta=meta,
        base_dir=base_dir,
    ).validate()
