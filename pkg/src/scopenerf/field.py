"""Multiresolution hash-grid radiance field.

Position features come from trilinearly interpolated learnable tables at
geometrically spaced grid resolutions, addressed densely where the grid fits
the table and by spatial hashing otherwise. A small rectifier MLP maps the
features to density plus a geometry vector; a second MLP maps geometry plus a
spherical-harmonics direction encoding to color.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
from torch import nn

from .errors import OutOfUnitCube

# Fixed spatial-hash primes; results are reproducible bit-for-bit across
# implementations that share these and IEEE f32 semantics.
HASH_PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    table_size_log2: int = 19
    features_per_level: int = 2
    base_resolution: int = 16
    max_resolution: int = 2048

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    def level_resolutions(self) -> list[int]:
        """N_l = floor(N_min * b^l) with b chosen so the last level hits N_max."""
        if self.levels == 1:
            return [self.base_resolution]
        b = math.exp(
            (math.log(self.max_resolution) - math.log(self.base_resolution))
            / (self.levels - 1)
        )
        return [int(self.base_resolution * b**l) for l in range(self.levels)]


@dataclass(frozen=True)
class FieldConfig:
    grid: HashGridConfig = dc_field(default_factory=HashGridConfig)
    hidden_width: int = 64
    density_hidden_layers: int = 1
    color_hidden_layers: int = 2
    geo_features: int = 15
    sh_degree: int = 4
    density_init: float = 0.1  # target mean sigma at initialization, 1/scene-unit

    def __post_init__(self):
        if not 1 <= self.sh_degree <= 4:
            raise ValueError("sh_degree must be in 1..4")

    @property
    def sh_dims(self) -> int:
        return self.sh_degree**2


@dataclass
class FieldOutput:
    sigma: torch.Tensor  # (N,), nonnegative, 1/scene-unit
    rgb: torch.Tensor    # (N, 3), linear color in [0, 1]


def parameter_count(cfg: FieldConfig) -> int:
    """Exact learnable-parameter count implied by a configuration."""
    g = cfg.grid
    n = g.levels * g.table_size * g.features_per_level
    w = cfg.hidden_width
    # density MLP: input L*F, hidden layers, head 1 + geo_features
    din = g.levels * g.features_per_level
    for _ in range(cfg.density_hidden_layers):
        n += din * w + w
        din = w
    n += din * (1 + cfg.geo_features) + (1 + cfg.geo_features)
    # color MLP: input geo + sh, hidden layers, 3-channel head
    din = cfg.geo_features + cfg.sh_dims
    for _ in range(cfg.color_hidden_layers):
        n += din * w + w
        din = w
    n += din * 3 + 3
    return n


def sh_encode(d: torch.Tensor, degree: int) -> torch.Tensor:
    """Real spherical-harmonics basis values up to ``degree`` (degree² outputs)."""
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = [torch.full_like(x, 0.28209479177387814)]
    if degree > 1:
        out += [-0.48860251190291987 * y, 0.48860251190291987 * z, -0.48860251190291987 * x]
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out += [
            1.0925484305920792 * xy,
            -1.0925484305920792 * yz,
            0.31539156525252005 * (2.0 * zz - xx - yy),
            -1.0925484305920792 * xz,
            0.5462742152960396 * (xx - yy),
        ]
    if degree > 3:
        out += [
            -0.5900435899266435 * y * (3 * xx - yy),
            2.890611442640554 * xy * z,
            -0.4570457994644658 * y * (4 * zz - xx - yy),
            0.3731763325901154 * z * (2 * zz - 3 * xx - 3 * yy),
            -0.4570457994644658 * x * (4 * zz - xx - yy),
            1.445305721320277 * z * (xx - yy),
            -0.5900435899266435 * x * (xx - 3 * yy),
        ]
    return torch.stack(out, dim=-1)


class HashEncoding(nn.Module):
    """Instant-style multiresolution feature lookup over the unit cube."""

    def __init__(self, cfg: HashGridConfig, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.resolutions = cfg.level_resolutions()
        t = torch.empty(cfg.levels, cfg.table_size, cfg.features_per_level, dtype=dtype)
        t.uniform_(-1e-4, 1e-4, generator=generator)
        self.tables = nn.Parameter(t)
        offs = torch.tensor(
            [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.int64
        )
        self.register_buffer("corner_offsets", offs)  # (8, 3)
        self.register_buffer(
            "primes", torch.tensor(HASH_PRIMES, dtype=torch.int64)
        )

    @property
    def out_dim(self) -> int:
        return self.cfg.levels * self.cfg.features_per_level

    def _corner_index(self, corners: torch.Tensor, res: int) -> torch.Tensor:
        # Dense addressing needs (res+1)^3 vertices; hash once that overflows
        # the table (in particular whenever res^3 exceeds it).
        if (res + 1) ** 3 <= self.cfg.table_size:
            stride = res + 1
            return corners[..., 0] + stride * (corners[..., 1] + stride * corners[..., 2])
        h = corners[..., 0] * self.primes[0]
        h = torch.bitwise_xor(h, corners[..., 1] * self.primes[1])
        h = torch.bitwise_xor(h, corners[..., 2] * self.primes[2])
        return torch.bitwise_and(h, self.cfg.table_size - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.numel() and (x.min() < -1e-6 or x.max() > 1 + 1e-6):
            raise OutOfUnitCube(
                f"positions span [{float(x.min()):.4g}, {float(x.max()):.4g}], expected [0, 1]"
            )
        x = x.clamp(0.0, 1.0)
        feats = []
        for level, res in enumerate(self.resolutions):
            s = x * res
            c0 = s.floor().long().clamp_(0, res - 1)
            frac = s - c0.to(s.dtype)
            corners = c0.unsqueeze(1) + self.corner_offsets.unsqueeze(0)  # (N, 8, 3)
            idx = self._corner_index(corners, res)  # (N, 8)
            table = self.tables[level]
            vals = table[idx.reshape(-1)].reshape(idx.shape[0], 8, -1)  # (N, 8, F)
            per_axis = torch.where(
                self.corner_offsets.bool().unsqueeze(0), frac.unsqueeze(1), 1 - frac.unsqueeze(1)
            )  # (N, 8, 3)
            w = per_axis.prod(dim=-1)  # (N, 8)
            feats.append((vals * w.unsqueeze(-1)).sum(dim=1))
        return torch.cat(feats, dim=-1)


def _init_linear(layer: nn.Linear, generator: torch.Generator | None):
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        layer.bias.uniform_(-bound, bound, generator=generator)


class RadianceField(nn.Module):
    """(position, direction) -> (density, color), with exact autograd gradients."""

    def __init__(self, cfg: FieldConfig | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        gen = torch.Generator().manual_seed(int(seed))
        self.encoding = HashEncoding(self.cfg.grid, generator=gen, dtype=dtype)

        w = self.cfg.hidden_width
        layers, din = [], self.encoding.out_dim
        for _ in range(self.cfg.density_hidden_layers):
            layers += [nn.Linear(din, w), nn.ReLU()]
            din = w
        layers.append(nn.Linear(din, 1 + self.cfg.geo_features))
        self.density_net = nn.Sequential(*layers)

        layers, din = [], self.cfg.geo_features + self.cfg.sh_dims
        for _ in range(self.cfg.color_hidden_layers):
            layers += [nn.Linear(din, w), nn.ReLU()]
            din = w
        layers.append(nn.Linear(din, 3))
        self.color_net = nn.Sequential(*layers)

        for m in list(self.density_net) + list(self.color_net):
            if isinstance(m, nn.Linear):
                _init_linear(m, gen)
        with torch.no_grad():
            # bias the density head so the freshly initialized field starts at
            # a small positive mean sigma instead of fully transparent
            self.density_net[-1].bias[0] = math.log(self.cfg.density_init)
        self.to(dtype)
        self._dtype = dtype

        expected = parameter_count(self.cfg)
        actual = sum(p.numel() for p in self.parameters())
        assert actual == expected, f"parameter count {actual} != {expected}"

    @property
    def dtype(self) -> torch.dtype:
        return self._dtype

    def table_parameters(self):
        return [self.encoding.tables]

    def mlp_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("encoding.")]

    def _density_raw(self, x: torch.Tensor) -> torch.Tensor:
        return self.density_net(self.encoding(x))

    def density(self, x: torch.Tensor) -> torch.Tensor:
        """Sigma only; skips the color branch (used by the occupancy refresh)."""
        raw = self._density_raw(x)
        return torch.exp(raw[:, 0].clamp(-15.0, 15.0))

    def forward(self, x: torch.Tensor, d: torch.Tensor) -> FieldOutput:
        raw = self._density_raw(x)
        sigma = torch.exp(raw[:, 0].clamp(-15.0, 15.0))
        d = d / d.norm(dim=-1, keepdim=True)
        h = torch.cat([raw[:, 1:], sh_encode(d, self.cfg.sh_degree)], dim=-1)
        rgb = torch.sigmoid(self.color_net(h))
        return FieldOutput(sigma=sigma, rgb=rgb)


def eval_field(field: RadianceField, x, d) -> FieldOutput:
    """Forward pass over numpy or torch inputs; never tracks gradients."""
    x = torch.as_tensor(np.asarray(x), dtype=field.dtype).reshape(-1, 3)
    d = torch.as_tensor(np.asarray(d), dtype=field.dtype).reshape(-1, 3)
    with torch.no_grad():
        return field(x, d)


def eval_field_grad(field: RadianceField, x, d, d_sigma, d_rgb) -> dict[str, torch.Tensor]:
    """Parameter gradients of sum(d_sigma * sigma) + sum(d_rgb * rgb).

    Reverse-mode through the full forward pass, including scatter-add into the
    hash tables; parameters a batch never touches get zero gradient.
    """
    x = torch.as_tensor(np.asarray(x), dtype=field.dtype).reshape(-1, 3)
    d = torch.as_tensor(np.asarray(d), dtype=field.dtype).reshape(-1, 3)
    d_sigma = torch.as_tensor(np.asarray(d_sigma), dtype=field.dtype).reshape(-1)
    d_rgb = torch.as_tensor(np.asarray(d_rgb), dtype=field.dtype).reshape(-1, 3)
    out = field(x, d)
    scalar = (out.sigma * d_sigma).sum() + (out.rgb * d_rgb).sum()
    names, params = zip(*field.named_parameters())
    grads = torch.autograd.grad(scalar, params, allow_unused=True)
    return {
        n: (g if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, params, grads)
    }
