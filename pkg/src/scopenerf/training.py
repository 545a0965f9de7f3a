"""Optimization loop: masked ray batches -> photometric loss -> Adam updates,
with periodic occupancy refresh, checkpoints, and the mask-ablation switch."""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .colmap import PoseSE3
from .dataset import DatasetManifest
from .errors import CorruptCheckpoint, DivergenceDetected, LengthMismatch
from .field import FieldConfig, HashGridConfig, RadianceField
from .geometry import Aabb
from .rays import RayBatch, RaySampler
from .renderer import OccupancyGrid, RenderSettings, march_rays

CHECKPOINT_MAGIC = b"SNRF"
CHECKPOINT_VERSION = 1

# training iterations used in the source experiments for each pose-count tier
ITERATION_SCHEDULE = ((62, 3000), (310, 15000), (647, 30000), (1392, 50000), (2667, 100000))


def schedule_iterations(n_pose: int) -> int:
    """Iteration budget for a given number of posed frames.

    Exact table lookup at the five reference pose counts, linear interpolation
    between them, clamped to [3000, 100000] outside.
    """
    if n_pose < 1:
        raise ValueError("n_pose must be >= 1")
    xs = [x for x, _ in ITERATION_SCHEDULE]
    ys = [y for _, y in ITERATION_SCHEDULE]
    return int(round(float(np.interp(n_pose, xs, ys))))


@dataclass
class TrainConfig:
    iterations: Optional[int] = None      # None -> schedule_iterations(n_pose)
    batch_size: int = 4096
    learning_rate: float = 1e-2           # hash tables; dense layers train at lr/10
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-15
    lr_decay_target: float = 0.1          # cosine decay floor as a fraction of base lr
    grad_clip_norm: float = 10.0
    mask_sampling: bool = True
    seed: int = 0
    checkpoint_every: int = 0             # 0 -> final checkpoint only
    eval_every: int = 0                   # 0 -> no interval reports
    log_every: int = 1
    threads: int = 1                      # 1 -> bit-reproducible runs
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    grid_resolution: int = 128
    grid_decay: float = 0.95
    grid_update_every: int = 16
    grid_warmup_steps: int = 256          # dense marching until the field takes shape
    step_divisor: int = 1024
    max_samples_per_ray: int = 1024
    early_stop_transmittance: Optional[float] = 1e-4

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        fobj = dict(obj.pop("field"))
        gobj = dict(fobj.pop("grid"))
        return cls(field=FieldConfig(grid=HashGridConfig(**gobj), **fobj), **obj)


def loss_mse(pred_rgb: torch.Tensor, target_rgb: torch.Tensor) -> torch.Tensor:
    """Mean over rays and channels of the squared photometric error."""
    if pred_rgb.shape != target_rgb.shape:
        raise LengthMismatch(f"pred {tuple(pred_rgb.shape)} vs target {tuple(target_rgb.shape)}")
    return ((pred_rgb - target_rgb) ** 2).mean()


@dataclass
class TrainState:
    config: TrainConfig
    manifest: DatasetManifest
    manifest_path: Optional[str]
    field: RadianceField
    grid: OccupancyGrid
    optimizer: torch.optim.Adam
    sampler: RaySampler
    rng_sampler: np.random.Generator
    rng_grid: np.random.Generator
    settings: RenderSettings
    step: int = 0
    loss_history: list = dc_field(default_factory=list)

    @property
    def bounds(self) -> Aabb:
        return self.manifest.bounds


def _make_optimizer(field: RadianceField, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        [
            {"params": field.table_parameters(), "lr": cfg.learning_rate},
            {"params": field.mlp_parameters(), "lr": cfg.learning_rate / 10.0},
        ],
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.eps,
    )


def setup(manifest: DatasetManifest, cfg: TrainConfig, manifest_path=None) -> TrainState:
    """Fresh training state: seeded field, warm occupancy grid, Adam moments.

    Resolves ``iterations=None`` to the schedule now so the learning-rate
    decay horizon is pinned for the whole run, resumes included.
    """
    if cfg.threads >= 1:
        torch.set_num_threads(cfg.threads)
    seedseq = np.random.SeedSequence(cfg.seed)
    s_field, s_sampler, s_grid = seedseq.spawn(3)
    diag = manifest.bounds.diagonal
    field_cfg = cfg.field
    # absolute initial density targets 0.1 per scene diagonal
    field_cfg = FieldConfig(
        grid=field_cfg.grid,
        hidden_width=field_cfg.hidden_width,
        density_hidden_layers=field_cfg.density_hidden_layers,
        color_hidden_layers=field_cfg.color_hidden_layers,
        geo_features=field_cfg.geo_features,
        sh_degree=field_cfg.sh_degree,
        density_init=0.1 / diag,
    )
    field = RadianceField(field_cfg, seed=int(s_field.generate_state(1)[0]))
    grid = OccupancyGrid(
        manifest.bounds, resolution=cfg.grid_resolution, decay=cfg.grid_decay
    )
    settings = RenderSettings(
        step_size=diag * math.sqrt(3) / cfg.step_divisor,
        max_samples_per_ray=cfg.max_samples_per_ray,
        background=(0.0, 0.0, 0.0),
        early_stop_transmittance=cfg.early_stop_transmittance,
    )
    cfg = replace_field(cfg, field_cfg)
    if cfg.iterations is None:
        cfg.iterations = schedule_iterations(manifest.n_pose)
    return TrainState(
        config=cfg,
        manifest=manifest,
        manifest_path=str(manifest_path) if manifest_path else None,
        field=field,
        grid=grid,
        optimizer=_make_optimizer(field, cfg),
        sampler=RaySampler(manifest),
        rng_sampler=np.random.Generator(np.random.PCG64(s_sampler)),
        rng_grid=np.random.Generator(np.random.PCG64(s_grid)),
        settings=settings,
    )


def replace_field(cfg: TrainConfig, field_cfg: FieldConfig) -> TrainConfig:
    obj = cfg.to_json()
    obj["field"] = asdict(field_cfg)
    return TrainConfig.from_json(obj)


def _lr_scale(step: int, total: int, target: float) -> float:
    frac = min(step / max(total, 1), 1.0)
    return target + (1.0 - target) * 0.5 * (1.0 + math.cos(math.pi * frac))


def train_step(state: TrainState, total_iterations: int) -> dict:
    """One optimization step; returns the log record for this step."""
    cfg = state.config
    t_start = time.perf_counter()
    if cfg.mask_sampling:
        batch: RayBatch = state.sampler.masked_batch(state.rng_sampler, cfg.batch_size)
    else:
        batch = state.sampler.unmasked_batch(state.rng_sampler, cfg.batch_size)

    grid = state.grid if state.step >= cfg.grid_warmup_steps else None
    out = march_rays(
        torch.from_numpy(batch.origins),
        torch.from_numpy(batch.directions),
        torch.from_numpy(batch.t_near),
        torch.from_numpy(batch.t_far),
        state.field,
        grid,
        state.settings,
        state.bounds,
    )
    target = torch.from_numpy(batch.target_rgb).to(state.field.dtype)
    loss = loss_mse(out["rgb"], target)
    if not torch.isfinite(loss):
        raise DivergenceDetected(f"non-finite loss at step {state.step}")

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(state.field.parameters(), cfg.grad_clip_norm)
    scale = _lr_scale(state.step, total_iterations, cfg.lr_decay_target)
    state.optimizer.param_groups[0]["lr"] = cfg.learning_rate * scale
    state.optimizer.param_groups[1]["lr"] = cfg.learning_rate / 10.0 * scale
    state.optimizer.step()

    loss_value = float(loss.detach())
    state.loss_history.append(loss_value)
    state.step += 1
    if state.step % cfg.grid_update_every == 0:
        state.grid.update(state.field, state.rng_grid)

    elapsed = time.perf_counter() - t_start
    return {
        "step": state.step,
        "loss": loss_value,
        "psnr_train_batch": float(-10.0 * math.log10(loss_value)) if loss_value > 0 else None,
        "rays_per_sec": cfg.batch_size / elapsed if elapsed > 0 else None,
        "grid_occupancy_frac": state.grid.occupied_fraction(),
    }


def train(
    state: TrainState,
    iterations: Optional[int] = None,
    out_dir=None,
    log_file=None,
    on_eval=None,
) -> TrainState:
    """Run the loop for ``iterations`` steps (scheduled from n_pose if None).

    Writes line-delimited JSON log records, periodic checkpoints, and calls
    ``on_eval(state)`` at the configured interval. On divergence the last good
    checkpoint is preserved and reported.
    """
    cfg = state.config
    total = iterations if iterations is not None else (
        cfg.iterations if cfg.iterations is not None else schedule_iterations(state.manifest.n_pose)
    )
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_file, "a", encoding="utf-8") if log_file else None
    last_checkpoint = None
    target_step = state.step + total
    try:
        while state.step < target_step:
            try:
                record = train_step(state, target_step)
            except DivergenceDetected as e:
                raise DivergenceDetected(str(e), last_checkpoint=last_checkpoint) from None
            if log_fh and state.step % max(cfg.log_every, 1) == 0:
                log_fh.write(json.dumps(record) + "\n")
            if (
                out_dir is not None
                and cfg.checkpoint_every
                and state.step % cfg.checkpoint_every == 0
            ):
                last_checkpoint = out_dir / f"checkpoint_{state.step:08d}.snrf"
                checkpoint(state, last_checkpoint)
            if cfg.eval_every and on_eval and state.step % cfg.eval_every == 0:
                on_eval(state)
    finally:
        if log_fh:
            log_fh.close()
    return state


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, JSON header, named little-endian blobs


_DTYPES = {"f32": np.float32, "f64": np.float64}


def _dtype_tag(t: torch.dtype) -> str:
    return {torch.float32: "f32", torch.float64: "f64"}[t]


def _scene_block(state: TrainState) -> dict:
    manifest = state.manifest
    train = manifest.train_frames()
    cam = manifest.camera
    return {
        "bounds": manifest.bounds.to_json(),
        "camera": {
            "camera_id": cam.camera_id,
            "model_kind": cam.model_kind.name,
            "width": cam.width,
            "height": cam.height,
            "params": list(cam.params),
        },
        "mask": {
            "cx": manifest.mask.cx,
            "cy": manifest.mask.cy,
            "radius": manifest.mask.radius,
            "width": manifest.mask.width,
            "height": manifest.mask.height,
            "valid_count": manifest.mask.valid_count,
        },
        "initial_pose": {"q": list(train[0].pose.q), "t": list(train[0].pose.t)},
        "n_pose": manifest.n_pose,
    }


def checkpoint(state: TrainState, path) -> None:
    """Serialize the full resumable state into the versioned container."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name, p in state.field.named_parameters():
        tensors.append((f"field.{name}", p.detach().numpy()))
    for group_idx, group in enumerate(state.optimizer.param_groups):
        for p_idx, p in enumerate(group["params"]):
            st = state.optimizer.state.get(p, {})
            prefix = f"opt.g{group_idx}.p{p_idx}"
            if st:
                tensors.append((f"{prefix}.exp_avg", st["exp_avg"].numpy()))
                tensors.append((f"{prefix}.exp_avg_sq", st["exp_avg_sq"].numpy()))
                tensors.append(
                    (f"{prefix}.step", np.asarray(st["step"], dtype=np.float64).reshape(1))
                )
    tensors.append(("grid.ema_density", state.grid.ema_density.numpy()))
    tensors.append(("loss_history", np.asarray(state.loss_history, dtype=np.float64)))

    directory, offset = [], 0
    for name, arr in tensors:
        tag = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}[arr.dtype]
        nbytes = arr.size * arr.itemsize
        directory.append(
            {"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes}
        )
        offset += nbytes

    header = {
        "config": state.config.to_json(),
        "step": state.step,
        "manifest_path": state.manifest_path,
        "scene": _scene_block(state),
        "rng_sampler": state.rng_sampler.bit_generator.state,
        "rng_grid": state.rng_grid.bit_generator.state,
        "grid": {
            "resolution": state.grid.resolution,
            "decay": state.grid.decay,
            "base_threshold": state.grid.base_threshold,
            "threshold": state.grid.threshold,
        },
        "tensors": directory,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(payload)))
        f.write(payload)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr).astype(arr.dtype, copy=False).tobytes())
    tmp.replace(path)


def read_checkpoint_header(path) -> dict:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CorruptCheckpoint(f"bad magic {magic!r}", offset=0)
        raw = f.read(12)
        if len(raw) != 12:
            raise CorruptCheckpoint("truncated fixed header", offset=f.tell())
        version, hlen = struct.unpack("<IQ", raw)
        if version != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(f"unsupported checkpoint version {version}")
        payload = f.read(hlen)
        if len(payload) != hlen:
            raise CorruptCheckpoint("truncated header block", offset=f.tell())
        try:
            header = json.loads(payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptCheckpoint(f"header is not valid JSON: {e}") from None
        header["_blob_start"] = f.tell()
    return header


def _read_blobs(path, header) -> dict[str, np.ndarray]:
    start = header["_blob_start"]
    blobs = {}
    with open(path, "rb") as f:
        for ent in header["tensors"]:
            f.seek(start + ent["offset"])
            raw = f.read(ent["nbytes"])
            if len(raw) != ent["nbytes"]:
                raise CorruptCheckpoint(
                    f"tensor {ent['name']!r} truncated", offset=start + ent["offset"] + len(raw)
                )
            arr = np.frombuffer(raw, dtype=_DTYPES[ent["dtype"]]).reshape(ent["shape"])
            blobs[ent["name"]] = arr.copy()
    return blobs


def restore(path, manifest: Optional[DatasetManifest] = None) -> TrainState:
    """Rebuild a TrainState that continues bit-identically in single-threaded
    mode. The dataset manifest is reloaded from its recorded path unless one
    is passed in."""
    header = read_checkpoint_header(path)
    blobs = _read_blobs(path, header)
    cfg = TrainConfig.from_json(header["config"])
    if cfg.threads >= 1:
        torch.set_num_threads(cfg.threads)
    if manifest is None:
        if not header.get("manifest_path"):
            raise CorruptCheckpoint("checkpoint records no manifest path; pass one explicitly")
        manifest = DatasetManifest.load(header["manifest_path"])

    field = RadianceField(cfg.field, seed=0)
    with torch.no_grad():
        for name, p in field.named_parameters():
            key = f"field.{name}"
            if key not in blobs:
                raise CorruptCheckpoint(f"missing tensor {key!r}")
            arr = blobs[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise CorruptCheckpoint(
                    f"tensor {key!r} has shape {arr.shape}, expected {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr))

    optimizer = _make_optimizer(field, cfg)
    for group_idx, group in enumerate(optimizer.param_groups):
        for p_idx, p in enumerate(group["params"]):
            prefix = f"opt.g{group_idx}.p{p_idx}"
            if f"{prefix}.exp_avg" in blobs:
                optimizer.state[p] = {
                    "step": torch.tensor(float(blobs[f"{prefix}.step"][0])),
                    "exp_avg": torch.from_numpy(blobs[f"{prefix}.exp_avg"]).clone(),
                    "exp_avg_sq": torch.from_numpy(blobs[f"{prefix}.exp_avg_sq"]).clone(),
                }

    gmeta = header["grid"]
    grid = OccupancyGrid(
        manifest.bounds,
        resolution=gmeta["resolution"],
        decay=gmeta["decay"],
        threshold=gmeta["base_threshold"],
    )
    ema = blobs["grid.ema_density"]
    if ema.shape[0] != grid.resolution**3:
        raise CorruptCheckpoint("grid EMA size does not match its resolution")
    grid.ema_density = torch.from_numpy(ema).clone()
    grid.threshold = gmeta["threshold"]
    grid.occupied = grid.ema_density > grid.threshold

    rng_sampler = np.random.Generator(np.random.PCG64())
    rng_sampler.bit_generator.state = header["rng_sampler"]
    rng_grid = np.random.Generator(np.random.PCG64())
    rng_grid.bit_generator.state = header["rng_grid"]

    diag = manifest.bounds.diagonal
    settings = RenderSettings(
        step_size=diag * math.sqrt(3) / cfg.step_divisor,
        max_samples_per_ray=cfg.max_samples_per_ray,
        background=(0.0, 0.0, 0.0),
        early_stop_transmittance=cfg.early_stop_transmittance,
    )
    return TrainState(
        config=cfg,
        manifest=manifest,
        manifest_path=header.get("manifest_path"),
        field=field,
        grid=grid,
        optimizer=optimizer,
        sampler=RaySampler(manifest),
        rng_sampler=rng_sampler,
        rng_grid=rng_grid,
        settings=settings,
        step=header["step"],
        loss_history=[float(v) for v in blobs["loss_history"]],
    )


def initial_pose_from_header(header: dict) -> PoseSE3:
    p = header["scene"]["initial_pose"]
    return PoseSE3(tuple(p["q"]), tuple(p["t"]))
