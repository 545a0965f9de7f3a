"""Occupancy-grid-accelerated ray marching and emission-absorption compositing.

Samples sit on a fixed step lattice inside each ray's [t_near, t_far] span;
segments whose grid cell carries negligible density are skipped, and marching
stops once transmittance falls below the early-stop threshold.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .colmap import CameraModel, PoseSE3
from .errors import NegativeDensity
from .field import RadianceField
from .geometry import Aabb
from .rays import DEFAULT_MIN_NEAR, Ray, frame_ray_grid

DEPTH_OPACITY_FLOOR = 1e-6


@dataclass(frozen=True)
class RenderSettings:
    step_size: float
    max_samples_per_ray: int = 1024
    background: tuple = (0.0, 0.0, 0.0)
    early_stop_transmittance: float | None = 1e-4

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.early_stop_transmittance is not None and not (
            0 < self.early_stop_transmittance <= 0.1
        ):
            raise ValueError("early_stop_transmittance must be in (0, 0.1] or None")

    def preview(self, step_multiplier: float = 4.0) -> "RenderSettings":
        return replace(
            self,
            step_size=self.step_size * step_multiplier,
            early_stop_transmittance=1e-2,
        )


def default_settings(bounds: Aabb, step_divisor: int = 1024, **kw) -> RenderSettings:
    return RenderSettings(step_size=bounds.diagonal * math.sqrt(3) / step_divisor, **kw)


def default_grid_threshold(bounds: Aabb) -> float:
    # density cutoff scaled to the scene: 0.01 * (1024 / diagonal)
    return 0.01 * 1024.0 / bounds.diagonal


@dataclass
class RenderResult:
    rgb: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    samples_evaluated: int


class OccupancyGrid:
    """Cubic EMA density cache over the scene box.

    ``occupied`` always equals ``ema_density > threshold``; the effective
    threshold is the configured cutoff clamped down to the current mean EMA so
    the grid adapts while early densities are still uniformly small.
    """

    def __init__(
        self,
        bounds: Aabb,
        resolution: int = 128,
        decay: float = 0.95,
        threshold: float | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        if resolution < 1:
            raise ValueError("resolution must be >= 1")
        if not 0 < decay < 1:
            raise ValueError("decay must be in (0, 1)")
        self.bounds = bounds
        self.resolution = int(resolution)
        self.decay = float(decay)
        self.base_threshold = float(
            default_grid_threshold(bounds) if threshold is None else threshold
        )
        self.dtype = dtype
        n = self.resolution**3
        # warm start fully occupied: a conservative grid lets early training
        # see the whole volume
        self.ema_density = torch.full((n,), 2.0 * self.base_threshold, dtype=dtype)
        self.threshold = self.base_threshold
        self.occupied = self.ema_density > self.threshold

    def occupied_fraction(self) -> float:
        return float(self.occupied.to(torch.float64).mean())

    def set_fully_occupied(self) -> "OccupancyGrid":
        self.ema_density.fill_(2.0 * self.base_threshold)
        self.threshold = self.base_threshold
        self.occupied = self.ema_density > self.threshold
        return self

    def cell_centers_unit(self) -> torch.Tensor:
        r = self.resolution
        axes = (torch.arange(r, dtype=self.dtype) + 0.5) / r
        gz, gy, gx = torch.meshgrid(axes, axes, axes, indexing="ij")
        return torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)

    def _flat_cells(self, unit_pos: torch.Tensor) -> torch.Tensor:
        r = self.resolution
        c = (unit_pos * r).floor().long().clamp_(0, r - 1)
        return c[:, 0] + r * (c[:, 1] + r * c[:, 2])

    def query_unit(self, unit_pos: torch.Tensor) -> torch.Tensor:
        return self.occupied[self._flat_cells(unit_pos)]

    def update(self, field: RadianceField, rng: np.random.Generator, chunk: int = 131072):
        """One refresh: per cell, sample one jittered point and fold its density
        into the EMA, then recompute the occupancy bits."""
        r = self.resolution
        jitter = torch.from_numpy(rng.random((r**3, 3), dtype=np.float64)).to(self.dtype)
        cells = self.cell_centers_unit() - 0.5 / r + jitter / r
        sigmas = torch.empty(r**3, dtype=self.dtype)
        with torch.no_grad():
            for i in range(0, r**3, chunk):
                sigmas[i : i + chunk] = field.density(cells[i : i + chunk]).to(self.dtype)
        self.ema_density = torch.maximum(self.ema_density * self.decay, sigmas)
        self.threshold = min(self.base_threshold, float(self.ema_density.mean()))
        self.occupied = self.ema_density > self.threshold
        return self


def update_grid(grid: OccupancyGrid, field: RadianceField, rng: np.random.Generator) -> OccupancyGrid:
    return grid.update(field, rng)


@dataclass
class CompositeResult:
    rgb: np.ndarray
    opacity: float
    depth: float
    transmittance: float
    weights: np.ndarray


def composite(sigma, rgb, delta, t=None, background=(0.0, 0.0, 0.0)) -> CompositeResult:
    """Emission-absorption quadrature of one sample list.

    alpha_i = 1 - exp(-sigma_i * delta_i); weights are transmittance-scaled
    alphas; color composites over the background; depth is the expected
    termination distance (t_i defaults to segment midpoints).
    """
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if sigma.shape[0] != rgb.shape[0] or sigma.shape[0] != delta.shape[0]:
        raise ValueError("sigma, rgb, delta must have equal lengths")
    if np.any(sigma < 0):
        raise NegativeDensity("compositor received sigma < 0")
    if np.any(delta <= 0):
        raise ValueError("segment lengths must be positive")
    if t is None:
        t = np.cumsum(delta) - delta / 2.0
    else:
        t = np.asarray(t, dtype=np.float64).reshape(-1)
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    alpha = 1.0 - np.exp(-sigma * delta)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)])
    weights = trans[:-1] * alpha
    opacity = float(weights.sum())
    out_rgb = weights @ rgb + trans[-1] * bg
    depth = float((weights * t).sum() / max(opacity, DEPTH_OPACITY_FLOOR))
    return CompositeResult(
        rgb=out_rgb,
        opacity=opacity,
        depth=depth,
        transmittance=float(trans[-1]),
        weights=weights,
    )


def march_rays(
    origins: torch.Tensor,
    directions: torch.Tensor,
    t_near: torch.Tensor,
    t_far: torch.Tensor,
    field: RadianceField,
    grid: OccupancyGrid | None,
    settings: RenderSettings,
    bounds: Aabb,
    wave: int = 32,
):
    """Vectorized wavefront marcher over a ray batch.

    Returns a dict of torch tensors: rgb (R,3), opacity (R,), depth (R,),
    samples per ray (R,) and the total field-evaluation count. Differentiable
    when called under grad; rendering callers wrap it in no_grad.
    """
    dt = settings.step_size
    dtype = field.dtype
    o = origins.to(dtype)
    d = directions.to(dtype)
    t0 = t_near.to(dtype)
    t1 = t_far.to(dtype)
    R = o.shape[0]

    span = (t1 - t0).clamp(min=0.0)
    nsteps = torch.ceil(span / dt).long().clamp(max=settings.max_samples_per_ray)

    lo = torch.as_tensor(bounds.lo, dtype=dtype)
    size = torch.as_tensor(bounds.size, dtype=dtype)
    bg = torch.as_tensor(settings.background, dtype=dtype)

    trans = torch.ones(R, dtype=dtype)
    acc_rgb = torch.zeros(R, 3, dtype=dtype)
    acc_w = torch.zeros(R, dtype=dtype)
    acc_wt = torch.zeros(R, dtype=dtype)
    n_evals = torch.zeros(R, dtype=torch.long)
    cursor = torch.zeros(R, dtype=torch.long)
    active = nsteps > 0
    total_evals = 0

    while bool(active.any()):
        a = active.nonzero(as_tuple=True)[0]
        steps = cursor[a].unsqueeze(1) + torch.arange(wave)  # (A, K)
        in_range = steps < nsteps[a].unsqueeze(1)
        seg_start = t0[a].unsqueeze(1) + steps.to(dtype) * dt
        delta = torch.minimum(
            torch.full_like(seg_start, dt), t1[a].unsqueeze(1) - seg_start
        ).clamp(min=0.0)
        tmid = seg_start + delta / 2
        pos = o[a].unsqueeze(1) + tmid.unsqueeze(-1) * d[a].unsqueeze(1)  # (A, K, 3)
        unit = ((pos - lo) / size).clamp(0.0, 1.0)

        keep = in_range & (delta > 0)
        if grid is not None:
            flat_unit = unit.reshape(-1, 3)
            occ = grid.query_unit(flat_unit).reshape(keep.shape)
            keep = keep & occ

        sigma_d = torch.zeros(keep.shape, dtype=dtype)
        rgb_d = torch.zeros((*keep.shape, 3), dtype=dtype)
        m = int(keep.sum())
        if m:
            sel_pos = unit[keep]
            sel_dir = d[a].unsqueeze(1).expand(-1, wave, -1)[keep]
            out = field(sel_pos, sel_dir)
            sigma_d = sigma_d.masked_scatter(keep, out.sigma)
            rgb_d = rgb_d.masked_scatter(keep.unsqueeze(-1).expand_as(rgb_d), out.rgb)
            total_evals += m
            n_evals[a] += keep.sum(dim=1)

        alpha = 1.0 - torch.exp(-sigma_d * delta)
        within = torch.cumprod(1.0 - alpha, dim=1)
        excl = torch.cat([torch.ones(len(a), 1, dtype=dtype), within[:, :-1]], dim=1)
        w = trans[a].unsqueeze(1) * excl * alpha

        acc_rgb = acc_rgb.index_put((a,), acc_rgb[a] + (w.unsqueeze(-1) * rgb_d).sum(dim=1))
        acc_w = acc_w.index_put((a,), acc_w[a] + w.sum(dim=1))
        acc_wt = acc_wt.index_put((a,), acc_wt[a] + (w * tmid).sum(dim=1))
        trans = trans.index_put((a,), trans[a] * within[:, -1])

        cursor[a] += wave
        still = cursor[a] < nsteps[a]
        if settings.early_stop_transmittance is not None:
            still = still & (trans[a].detach() >= settings.early_stop_transmittance)
        active = torch.zeros_like(active).index_put((a,), still)

    rgb = acc_rgb + trans.unsqueeze(-1) * bg
    opacity = acc_w
    depth = torch.where(
        opacity >= DEPTH_OPACITY_FLOOR,
        acc_wt / opacity.clamp(min=DEPTH_OPACITY_FLOOR),
        t1,
    )
    return {
        "rgb": rgb,
        "opacity": opacity,
        "depth": depth,
        "n_samples": n_evals,
        "samples_evaluated": total_evals,
    }


def march_ray(
    ray: Ray,
    grid: OccupancyGrid | None,
    field: RadianceField,
    settings: RenderSettings,
    bounds: Aabb,
) -> RenderResult:
    """Single-pixel marching; thin wrapper over the batch marcher."""
    with torch.no_grad():
        out = march_rays(
            torch.as_tensor(ray.origin).unsqueeze(0),
            torch.as_tensor(ray.direction).unsqueeze(0),
            torch.tensor([ray.t_near]),
            torch.tensor([ray.t_far]),
            field,
            grid,
            settings,
            bounds,
        )
    return RenderResult(
        rgb=out["rgb"][0].numpy().astype(np.float64),
        opacity=float(out["opacity"][0]),
        depth=float(out["depth"][0]),
        samples_evaluated=out["samples_evaluated"],
    )


def render_image(
    pose: PoseSE3,
    camera: CameraModel,
    grid: OccupancyGrid | None,
    field: RadianceField,
    settings: RenderSettings,
    bounds: Aabb,
    min_near: float = DEFAULT_MIN_NEAR,
    tile: int = 8192,
) -> RenderResult:
    """Full-frame render: every pixel is marched, mask or no mask; rays that
    miss the scene box come back as pure background."""
    h, w = camera.height, camera.width
    origins, dirs, t0, t1, hit = frame_ray_grid(camera, pose, bounds, min_near=min_near)
    rgb = np.empty((h * w, 3), dtype=np.float64)
    opacity = np.empty(h * w, dtype=np.float64)
    depth = np.empty(h * w, dtype=np.float64)
    total = 0
    with torch.no_grad():
        for i in range(0, h * w, tile):
            out = march_rays(
                torch.from_numpy(origins[i : i + tile]),
                torch.from_numpy(dirs[i : i + tile]),
                torch.from_numpy(t0[i : i + tile]),
                torch.from_numpy(t1[i : i + tile]),
                field,
                grid,
                settings,
                bounds,
            )
            rgb[i : i + tile] = out["rgb"].numpy()
            opacity[i : i + tile] = out["opacity"].numpy()
            depth[i : i + tile] = out["depth"].numpy()
            total += out["samples_evaluated"]
    bg = np.asarray(settings.background, dtype=np.float64)
    rgb[~hit] = bg
    opacity[~hit] = 0.0
    depth[~hit] = 0.0
    return RenderResult(
        rgb=rgb.reshape(h, w, 3),
        opacity=opacity.reshape(h, w),
        depth=depth.reshape(h, w),
        samples_evaluated=total,
    )
