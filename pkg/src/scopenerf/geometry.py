"""Shared geometric primitives: boxes, quaternions, ray/box intersection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonUnitQuaternion


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box in scene units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64).reshape(3))
        if not np.all(self.hi >= self.lo):
            raise ValueError("box hi must be >= lo on every axis")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    def inflate(self, factor: float) -> "Aabb":
        c, half = self.center, 0.5 * self.size * factor
        return Aabb(c - half, c + half)

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map scene-unit points into the unit cube spanned by the box."""
        return (np.asarray(points, dtype=np.float64) - self.lo) / self.size

    def to_json(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Aabb":
        return cls(np.array(obj["lo"]), np.array(obj["hi"]))


def quat_norm(q) -> float:
    q = np.asarray(q, dtype=np.float64)
    return float(np.sqrt(np.dot(q, q)))


def normalize_quat(q, tol: float = 1e-3) -> np.ndarray:
    """Renormalize a (w,x,y,z) quaternion; reject deviations beyond ``tol``."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = quat_norm(q)
    if abs(n - 1.0) > tol:
        raise NonUnitQuaternion(f"quaternion norm {n:.6f} deviates from 1 by more than {tol}")
    return q / n


def quat_to_rotmat(q) -> np.ndarray:
    """Direct 9-term conversion of a unit (w,x,y,z) quaternion to a rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64).reshape(4)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R) -> np.ndarray:
    """Rotation matrix to (w,x,y,z) quaternion with nonnegative w.

    Uses the symmetric-eigenvector construction, stable for all inputs.
    """
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = np.asarray(R, dtype=np.float64).flat
    K = (
        np.array(
            [
                [Rxx - Ryy - Rzz, 0, 0, 0],
                [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
                [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
                [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
            ]
        )
        / 3.0
    )
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q


def ray_aabb_intersect(origins, directions, box: Aabb, min_near: float = 0.0):
    """Slab-method intersection of rays with a box.

    Returns ``(t0, t1, hit)`` arrays; ``t0`` is clamped up to ``min_near``.
    A ray misses when ``t1 <= t0``.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (box.lo - o) * inv
        tb = (box.hi - o) * inv
    # 0 * inf from axis-parallel rays: treat that axis as unbounded
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    lo = np.where(np.isnan(lo), -np.inf, lo)
    hi = np.where(np.isnan(hi), np.inf, hi)
    t0 = np.maximum(lo.max(axis=-1), min_near)
    t1 = hi.min(axis=-1)
    return t0, t1, t1 > t0


def look_at_rotation(eye, target, up) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``eye`` looking at ``target``.

    Camera convention: x right, y down, z forward (the storage convention of
    the sparse-model files this engine ingests).
    """
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    nf = np.linalg.norm(f)
    if nf == 0:
        raise ValueError("eye and target coincide")
    f = f / nf
    u = np.asarray(up, dtype=np.float64)
    y = -u + f * np.dot(f, u)
    ny = np.linalg.norm(y)
    if ny < 1e-12:
        raise ValueError("up direction is parallel to the view direction")
    y = y / ny
    x = np.cross(y, f)
    return np.stack([x, y, f], axis=1)
