"""Reader/writer for COLMAP sparse-model directories.

Binary layout follows COLMAP's on-disk format (little-endian u32/u64 ids and
counts, f64 parameters); text follows its whitespace grammar with ``#``
comment headers and two-line image records.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyPointCloud,
    MalformedRecord,
    MissingFile,
    NonUnitQuaternion,
    UnsupportedCameraModel,
)
from .geometry import Aabb, quat_norm, quat_to_rotmat, rotmat_to_quat


class CameraModelKind(enum.Enum):
    SIMPLE_PINHOLE = 0
    PINHOLE = 1
    SIMPLE_RADIAL = 2
    OPENCV = 4


_NUM_PARAMS = {
    CameraModelKind.SIMPLE_PINHOLE: 3,  # f, cx, cy
    CameraModelKind.PINHOLE: 4,         # fx, fy, cx, cy
    CameraModelKind.SIMPLE_RADIAL: 4,   # f, cx, cy, k
    CameraModelKind.OPENCV: 8,          # fx, fy, cx, cy, k1, k2, p1, p2
}

_N_DISTORTION = {
    CameraModelKind.PINHOLE: 0,
    CameraModelKind.SIMPLE_PINHOLE: 0,
    CameraModelKind.SIMPLE_RADIAL: 1,
    CameraModelKind.OPENCV: 4,
}

_KIND_BY_ID = {k.value: k for k in CameraModelKind}


@dataclass(frozen=True)
class CameraModel:
    """Pinhole-family intrinsics as stored in the sparse model."""

    camera_id: int
    model_kind: CameraModelKind
    width: int
    height: int
    params: tuple

    def __post_init__(self):
        expected = _NUM_PARAMS[self.model_kind]
        if len(self.params) != expected:
            raise MalformedRecord(
                f"camera {self.camera_id}: {self.model_kind.name} expects "
                f"{expected} params, got {len(self.params)}"
            )
        if self.width <= 0 or self.height <= 0:
            raise MalformedRecord(f"camera {self.camera_id}: nonpositive dimensions")
        if self.fx <= 0 or self.fy <= 0:
            raise MalformedRecord(f"camera {self.camera_id}: nonpositive focal length")
        if not (0 <= self.cx <= self.width) or not (0 <= self.cy <= self.height):
            raise MalformedRecord(f"camera {self.camera_id}: principal point outside image")

    @property
    def fx(self) -> float:
        return self.params[0]

    @property
    def fy(self) -> float:
        if self.model_kind in (CameraModelKind.SIMPLE_PINHOLE, CameraModelKind.SIMPLE_RADIAL):
            return self.params[0]
        return self.params[1]

    @property
    def cx(self) -> float:
        if self.model_kind in (CameraModelKind.SIMPLE_PINHOLE, CameraModelKind.SIMPLE_RADIAL):
            return self.params[1]
        return self.params[2]

    @property
    def cy(self) -> float:
        if self.model_kind in (CameraModelKind.SIMPLE_PINHOLE, CameraModelKind.SIMPLE_RADIAL):
            return self.params[2]
        return self.params[3]

    @property
    def distortion(self) -> tuple:
        n = _N_DISTORTION[self.model_kind]
        return self.params[len(self.params) - n:] if n else ()

    @property
    def is_pinhole(self) -> bool:
        return self.model_kind in (CameraModelKind.PINHOLE, CameraModelKind.SIMPLE_PINHOLE)

    @classmethod
    def pinhole(cls, camera_id, width, height, fx, fy, cx, cy) -> "CameraModel":
        return cls(camera_id, CameraModelKind.PINHOLE, width, height, (fx, fy, cx, cy))


@dataclass(frozen=True)
class PoseSE3:
    """World-to-camera rigid transform as stored on disk: unit quaternion (w,x,y,z) + translation."""

    q: tuple
    t: tuple

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(float(v) for v in self.q))
        object.__setattr__(self, "t", tuple(float(v) for v in self.t))
        if len(self.q) != 4 or len(self.t) != 3:
            raise MalformedRecord("pose requires 4 quaternion and 3 translation components")
        n = quat_norm(self.q)
        if abs(n - 1.0) > 1e-3:
            raise NonUnitQuaternion(f"pose quaternion norm {n:.6g} too far from 1")


@dataclass(frozen=True)
class RegisteredImage:
    image_id: int
    pose: PoseSE3
    camera_id: int
    name: str
    points2d: tuple = ()           # (x, y, point3d_id) triples; empty when dropped at parse
    point3d_ids: tuple = ()        # always retained


@dataclass(frozen=True)
class Point3D:
    id: int
    xyz: tuple
    rgb: tuple
    error: float
    track: tuple = ()              # (image_id, point2d_idx) pairs

    def __post_init__(self):
        if self.error < 0:
            raise MalformedRecord(f"point {self.id}: negative reprojection error")


@dataclass
class SparseModel:
    cameras: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)

    def validate(self) -> "SparseModel":
        for im in self.images.values():
            if im.camera_id not in self.cameras:
                raise MalformedRecord(
                    f"image {im.image_id} references unknown camera {im.camera_id}"
                )
            for pid in im.point3d_ids:
                if pid != -1 and pid not in self.points:
                    raise MalformedRecord(
                        f"image {im.image_id} references unknown 3-D point {pid}"
                    )
        return self


def camera_to_world(pose: PoseSE3) -> np.ndarray:
    """4x4 rigid camera-to-world matrix for a stored world-to-camera pose.

    Quaternions within 1e-3 of unit norm are renormalized; larger deviations
    signal corrupt input and raise.
    """
    q = np.asarray(pose.q, dtype=np.float64)
    n = quat_norm(q)
    if abs(n - 1.0) > 1e-3:
        raise NonUnitQuaternion(f"quaternion norm {n:.6g} too far from 1")
    R = quat_to_rotmat(q / n)
    M = np.eye(4)
    M[:3, :3] = R.T
    M[:3, 3] = -R.T @ np.asarray(pose.t, dtype=np.float64)
    return M


def pose_from_matrix(c2w: np.ndarray) -> PoseSE3:
    """Inverse bridge: camera-to-world matrix back to the stored convention."""
    c2w = np.asarray(c2w, dtype=np.float64)
    R = c2w[:3, :3].T
    q = rotmat_to_quat(R)
    t = -R @ c2w[:3, 3]
    return PoseSE3(tuple(q), tuple(t))


def camera_center(pose: PoseSE3) -> np.ndarray:
    return camera_to_world(pose)[:3, 3]


def scene_bounds(points, lo_pct: float, hi_pct: float, inflate: float) -> Aabb:
    """Percentile box over a point cloud, scaled about its center.

    Covers the [lo_pct, hi_pct] linear-interpolated percentile of each
    coordinate; degenerate axes are padded to width 1e-3.
    """
    if not 0 <= lo_pct < hi_pct <= 1:
        raise ValueError("need 0 <= lo_pct < hi_pct <= 1")
    if inflate < 1:
        raise ValueError("inflate must be >= 1")
    pts = [p.xyz for p in points]
    if not pts:
        raise EmptyPointCloud("scene bounds require at least one point")
    xyz = np.asarray(pts, dtype=np.float64)
    lo = np.quantile(xyz, lo_pct, axis=0)
    hi = np.quantile(xyz, hi_pct, axis=0)
    c = 0.5 * (lo + hi)
    half = np.maximum(0.5 * (hi - lo) * inflate, 0.5e-3)
    return Aabb(c - half, c + half)


# ---------------------------------------------------------------------------
# binary readers


def _read(f, fmt: str):
    size = struct.calcsize(fmt)
    buf = f.read(size)
    if len(buf) != size:
        raise MalformedRecord("unexpected end of file", offset=f.tell())
    return struct.unpack("<" + fmt, buf)


def _read_cameras_bin(path: Path) -> dict:
    cameras = {}
    with open(path, "rb") as f:
        (n,) = _read(f, "Q")
        for _ in range(n):
            cam_id, model_id, width, height = _read(f, "iiQQ")
            kind = _KIND_BY_ID.get(model_id)
            if kind is None:
                raise UnsupportedCameraModel(f"camera model id {model_id} is not supported")
            params = _read(f, "d" * _NUM_PARAMS[kind])
            cameras[cam_id] = CameraModel(cam_id, kind, int(width), int(height), params)
        _expect_eof(f, path)
    return cameras


def _read_images_bin(path: Path, keep_points2d: bool) -> dict:
    images = {}
    with open(path, "rb") as f:
        (n,) = _read(f, "Q")
        for _ in range(n):
            rec = _read(f, "idddddddi")
            image_id = rec[0]
            q, t, cam_id = rec[1:5], rec[5:8], rec[8]
            chars = []
            while True:
                (c,) = _read(f, "c")
                if c == b"\x00":
                    break
                chars.append(c)
            name = b"".join(chars).decode("utf-8")
            (n_pts,) = _read(f, "Q")
            raw = _read(f, "ddq" * n_pts)
            pts = tuple((raw[i], raw[i + 1], int(raw[i + 2])) for i in range(0, 3 * n_pts, 3))
            images[image_id] = RegisteredImage(
                image_id=image_id,
                pose=PoseSE3(q, t),
                camera_id=cam_id,
                name=name,
                points2d=pts if keep_points2d else (),
                point3d_ids=tuple(p[2] for p in pts),
            )
        _expect_eof(f, path)
    return images


def _read_points_bin(path: Path) -> dict:
    points = {}
    with open(path, "rb") as f:
        (n,) = _read(f, "Q")
        for _ in range(n):
            rec = _read(f, "QdddBBBd")
            pid = int(rec[0])
            (track_len,) = _read(f, "Q")
            raw = _read(f, "ii" * track_len)
            track = tuple((raw[i], raw[i + 1]) for i in range(0, 2 * track_len, 2))
            points[pid] = Point3D(pid, rec[1:4], rec[4:7], rec[7], track)
        _expect_eof(f, path)
    return points


def _expect_eof(f, path: Path):
    extra = f.read(1)
    if extra:
        raise MalformedRecord(f"{path.name}: trailing bytes after last record", offset=f.tell() - 1)


# ---------------------------------------------------------------------------
# text readers


def _data_lines(path: Path):
    """Yield (line_number, text) for non-comment lines. Blank lines inside
    image records are significant, so they are yielded too."""
    with open(path, "r", encoding="utf-8") as f:
        for i, line in enumerate(f, start=1):
            s = line.strip()
            if s.startswith("#"):
                yield i, None, s
            else:
                yield i, s, None


def _declared_count(comments, noun: str):
    import re

    for c in comments:
        m = re.search(rf"Number of {noun}\s*:\s*(\d+)", c)
        if m:
            return int(m.group(1))
    return None


def _check_count(path: Path, comments, noun: str, actual: int):
    declared = _declared_count(comments, noun)
    if declared is not None and declared != actual:
        raise MalformedRecord(
            f"{path.name}: header declares {declared} {noun}, parsed {actual} (truncated file?)"
        )


def _read_cameras_text(path: Path) -> dict:
    cameras, comments = {}, []
    for lineno, s, comment in _data_lines(path):
        if comment is not None:
            comments.append(comment)
            continue
        if not s:
            continue
        tok = s.split()
        if len(tok) < 4:
            raise MalformedRecord(f"{path.name}: camera record too short", line=lineno)
        try:
            cam_id, model_name = int(tok[0]), tok[1]
            width, height = int(tok[2]), int(tok[3])
            params = tuple(float(v) for v in tok[4:])
        except ValueError as e:
            raise MalformedRecord(f"{path.name}: {e}", line=lineno) from None
        try:
            kind = CameraModelKind[model_name]
        except KeyError:
            raise UnsupportedCameraModel(f"camera model {model_name!r} is not supported") from None
        if len(params) != _NUM_PARAMS[kind]:
            raise MalformedRecord(
                f"{path.name}: {model_name} expects {_NUM_PARAMS[kind]} params", line=lineno
            )
        cameras[cam_id] = CameraModel(cam_id, kind, width, height, params)
    _check_count(path, comments, "cameras", len(cameras))
    return cameras


def _read_images_text(path: Path, keep_points2d: bool) -> dict:
    images, comments = {}, []
    pending = None  # (lineno, first line) awaiting its points2D line
    for lineno, s, comment in _data_lines(path):
        if comment is not None:
            comments.append(comment)
            continue
        if pending is None:
            if not s:
                continue
            pending = (lineno, s)
            continue
        first_lineno, first = pending
        pending = None
        tok = first.split(maxsplit=9)
        if len(tok) != 10:
            raise MalformedRecord(f"{path.name}: image header needs 10 fields", line=first_lineno)
        try:
            image_id = int(tok[0])
            q = tuple(float(v) for v in tok[1:5])
            t = tuple(float(v) for v in tok[5:8])
            cam_id = int(tok[8])
        except ValueError as e:
            raise MalformedRecord(f"{path.name}: {e}", line=first_lineno) from None
        name = tok[9]
        ptok = s.split()
        if len(ptok) % 3 != 0:
            raise MalformedRecord(
                f"{path.name}: points2D count not a multiple of 3", line=lineno
            )
        try:
            pts = tuple(
                (float(ptok[i]), float(ptok[i + 1]), int(ptok[i + 2]))
                for i in range(0, len(ptok), 3)
            )
        except ValueError as e:
            raise MalformedRecord(f"{path.name}: {e}", line=lineno) from None
        images[image_id] = RegisteredImage(
            image_id=image_id,
            pose=PoseSE3(q, t),
            camera_id=cam_id,
            name=name,
            points2d=pts if keep_points2d else (),
            point3d_ids=tuple(p[2] for p in pts),
        )
    if pending is not None:
        raise MalformedRecord(
            f"{path.name}: image record missing its points2D line", line=pending[0]
        )
    _check_count(path, comments, "images", len(images))
    return images


def _read_points_text(path: Path) -> dict:
    points, comments = {}, []
    for lineno, s, comment in _data_lines(path):
        if comment is not None:
            comments.append(comment)
            continue
        if not s:
            continue
        tok = s.split()
        if len(tok) < 8 or (len(tok) - 8) % 2 != 0:
            raise MalformedRecord(f"{path.name}: bad 3-D point field count", line=lineno)
        try:
            pid = int(tok[0])
            xyz = tuple(float(v) for v in tok[1:4])
            rgb = tuple(int(v) for v in tok[4:7])
            error = float(tok[7])
            track = tuple(
                (int(tok[i]), int(tok[i + 1])) for i in range(8, len(tok), 2)
            )
        except ValueError as e:
            raise MalformedRecord(f"{path.name}: {e}", line=lineno) from None
        points[pid] = Point3D(pid, xyz, rgb, error, track)
    _check_count(path, comments, "points", len(points))
    return points


# ---------------------------------------------------------------------------
# entry points


def _resolve(dir_path: Path, stem: str, format_hint: str) -> tuple[Path, str]:
    binp, txtp = dir_path / f"{stem}.bin", dir_path / f"{stem}.txt"
    if format_hint == "bin":
        if not binp.exists():
            raise MissingFile(f"{binp} not found")
        return binp, "bin"
    if format_hint == "text":
        if not txtp.exists():
            raise MissingFile(f"{txtp} not found")
        return txtp, "text"
    if binp.exists():
        return binp, "bin"
    if txtp.exists():
        return txtp, "text"
    raise MissingFile(f"neither {stem}.bin nor {stem}.txt found in {dir_path}")


def parse_sparse_model(
    dir_path, format_hint: str = "auto", keep_points2d: bool = False
) -> SparseModel:
    """Parse a sparse-model directory (cameras/images/points3D, .bin or .txt).

    With ``keep_points2d=False`` (default) per-observation (x, y) pairs are
    dropped after parsing and only 3-D point links are retained.
    """
    dir_path = Path(dir_path)
    if format_hint not in ("auto", "bin", "text"):
        raise ValueError(f"unknown format hint {format_hint!r}")
    if not dir_path.is_dir():
        raise MissingFile(f"sparse model directory {dir_path} does not exist")
    cam_path, cam_fmt = _resolve(dir_path, "cameras", format_hint)
    img_path, img_fmt = _resolve(dir_path, "images", format_hint)
    pts_path, pts_fmt = _resolve(dir_path, "points3D", format_hint)
    cameras = _read_cameras_bin(cam_path) if cam_fmt == "bin" else _read_cameras_text(cam_path)
    images = (
        _read_images_bin(img_path, keep_points2d)
        if img_fmt == "bin"
        else _read_images_text(img_path, keep_points2d)
    )
    points = _read_points_bin(pts_path) if pts_fmt == "bin" else _read_points_text(pts_path)
    return SparseModel(cameras, images, points).validate()


def _fmt(x: float) -> str:
    # 17 significant digits: exact f64 round trip through text
    return f"{float(x):.17g}"


def write_text_model(model: SparseModel, dir_path) -> None:
    """Write the three text tables; output is parseable by this module and by
    the originating SfM tool."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)

    with open(dir_path / "cameras.txt", "w", encoding="utf-8") as f:
        f.write("# Camera list with one line of data per camera:\n")
        f.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        f.write(f"# Number of cameras: {len(model.cameras)}\n")
        for cam in sorted(model.cameras.values(), key=lambda c: c.camera_id):
            params = " ".join(_fmt(p) for p in cam.params)
            f.write(f"{cam.camera_id} {cam.model_kind.name} {cam.width} {cam.height} {params}\n")

    n_obs = sum(len(im.point3d_ids) for im in model.images.values())
    mean_obs = n_obs / len(model.images) if model.images else 0.0
    with open(dir_path / "images.txt", "w", encoding="utf-8") as f:
        f.write("# Image list with two lines of data per image:\n")
        f.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        f.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        f.write(f"# Number of images: {len(model.images)}, mean observations per image: {_fmt(mean_obs)}\n")
        for im in sorted(model.images.values(), key=lambda i: i.image_id):
            q = " ".join(_fmt(v) for v in im.pose.q)
            t = " ".join(_fmt(v) for v in im.pose.t)
            f.write(f"{im.image_id} {q} {t} {im.camera_id} {im.name}\n")
            f.write(" ".join(f"{_fmt(x)} {_fmt(y)} {pid}" for x, y, pid in im.points2d) + "\n")

    n_track = sum(len(p.track) for p in model.points.values())
    mean_track = n_track / len(model.points) if model.points else 0.0
    with open(dir_path / "points3D.txt", "w", encoding="utf-8") as f:
        f.write("# 3D point list with one line of data per point:\n")
        f.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        f.write(f"# Number of points: {len(model.points)}, mean track length: {_fmt(mean_track)}\n")
        for p in sorted(model.points.values(), key=lambda p: p.id):
            xyz = " ".join(_fmt(v) for v in p.xyz)
            rgb = " ".join(str(int(v)) for v in p.rgb)
            track = " ".join(f"{i} {j}" for i, j in p.track)
            line = f"{p.id} {xyz} {rgb} {_fmt(p.error)}"
            f.write(line + (f" {track}" if track else "") + "\n")
