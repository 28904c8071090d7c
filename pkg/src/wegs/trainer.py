"""End-to-end optimisation of Gaussians, the transfer MLP and the encoder."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .cloud import GaussianCloud, SparsePointSet, densify_and_prune, init_from_points, read_ply, reset_opacity, write_ply
from .encoder import EncoderConfig, EncoderParams, WildImage, encode, init_encoder
from .geometry import Camera, sh_colors, view_dirs
from .losses import LossWeights, TrainingDivergenceError, masked_photometric, reg_mask, reg_transient_gaussians, total_loss
from .optim import adam_step, load_param_blocks, param_blocks, read_blocks, write_blocks
from .rasterizer import SplatGrads, accumulate_stats, rasterize
from .tensor import ConfigurationError, Param, Tape, Tensor
from .transfer import TransferConfig, TransferParams, delta_sh, init_transfer, regularize_delta, transferred_sh

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("means", "quats", "log_scales", "opacity_logits", "sh_dc", "sh_rest")
METRIC_FIELDS = ("step", "image", "loss", "photometric", "reg_mask", "reg_sh", "reg_ts", "psnr", "n", "wall_time")


@dataclass
class TrainConfig:
    total_steps: int = 150_000
    mode: str = "wegs"  # "wegs" or "vanilla"
    seed: int = 0
    sh_degree: int = 3
    sh_unlock_every: int = 1000
    # learning rates
    lr_means: float = 1.6e-4
    lr_means_final_factor: float = 0.01
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_network: float = 1e-3
    # density control
    densify: bool = True
    densify_from: int = 500
    densify_until: int = 15_000
    densify_every: int = 100
    opacity_reset_every: int = 3000
    grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    min_opacity: float = 0.005
    # losses
    w_l1: float = 0.8
    w_ssim: float = 0.2
    w_regM: float = 1e-5
    w_regSH: float = 0.1
    w_regTS: float = 1e-5
    eps: float = 0.5
    mask_reg_reduction: str = "mean"
    # networks
    embed_dim: int = 16
    channels: int = 32
    transfer_hidden: int = 64
    mask_bias_init: float = 0.0
    # debugging / baselines
    force_static_mask: bool = False
    freeze_networks: bool = False
    # output
    checkpoint_every: int = 0
    checkpoint_dir: str = ""
    metrics_csv: str = ""

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ConfigurationError("total_steps must be positive")
        if self.mode not in ("wegs", "vanilla"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        for f in dataclasses.fields(self):
            if f.name.startswith("lr_") and f.name != "lr_means_final_factor" and getattr(self, f.name) <= 0:
                raise ConfigurationError(f"{f.name} must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_l1, self.w_ssim, self.w_regM, self.w_regSH, self.w_regTS, self.eps)


def _coerce(field_type, text: str):
    text = text.strip()
    if field_type in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    if field_type in (int, "int"):
        return int(float(text))
    if field_type in (float, "float"):
        return float(text)
    return text


def parse_config(text: str, **overrides) -> TrainConfig:
    """``key = value`` lines (``#`` comments) onto :class:`TrainConfig` fields."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], value)
    values.update(overrides)
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


def scene_extent(cameras: Sequence[Camera]) -> float:
    centers = np.stack([c.center for c in cameras])
    return float(np.linalg.norm(centers - centers.mean(0), axis=1).max() * 1.1) or 1.0


@dataclass
class TrainState:
    config: TrainConfig
    cloud: GaussianCloud
    gauss: dict[str, Param]
    encoder: EncoderParams | None
    transfer: TransferParams | None
    extent: float
    rng: np.random.Generator
    step: int = 0
    active_degree: int = 0
    cycle: list[int] = field(default_factory=list)
    embeddings: dict[int, np.ndarray] = field(default_factory=dict)
    metrics: list[dict] = field(default_factory=list)

    def network_params(self) -> list[Param]:
        out = []
        if self.encoder is not None:
            out += self.encoder.params()
        if self.transfer is not None:
            out += self.transfer.params()
        return out

    def sync_cloud(self) -> None:
        g = self.gauss
        self.cloud.means = g["means"].data
        self.cloud.quats = g["quats"].data
        self.cloud.log_scales = g["log_scales"].data
        self.cloud.opacity_logits = g["opacity_logits"].data
        self.cloud.sh = np.concatenate([g["sh_dc"].data, g["sh_rest"].data], axis=2)


def _gauss_params(cloud: GaussianCloud) -> dict[str, Param]:
    return {
        "means": Param(cloud.means.copy(), "gauss.means"),
        "quats": Param(cloud.quats.copy(), "gauss.quats"),
        "log_scales": Param(cloud.log_scales.copy(), "gauss.log_scales"),
        "opacity_logits": Param(cloud.opacity_logits.copy(), "gauss.opacity_logits"),
        "sh_dc": Param(cloud.sh[:, :, :1].copy(), "gauss.sh_dc"),
        "sh_rest": Param(cloud.sh[:, :, 1:].copy(), "gauss.sh_rest"),
    }


def init_state(config: TrainConfig, cloud: GaussianCloud, cameras: Sequence[Camera]) -> TrainState:
    rng = np.random.default_rng(config.seed)
    encoder = transfer = None
    if config.mode == "wegs":
        encoder = init_encoder(rng, EncoderConfig(config.channels, config.embed_dim, mask_bias_init=config.mask_bias_init))
        transfer = init_transfer(rng, TransferConfig(cloud.degree, config.embed_dim, config.transfer_hidden))
    return TrainState(config, cloud, _gauss_params(cloud), encoder, transfer, scene_extent(cameras), rng)


def means_lr(cfg: TrainConfig, step: int, extent: float) -> float:
    frac = min(step / max(cfg.total_steps, 1), 1.0)
    return cfg.lr_means * extent * float(np.exp(np.log(cfg.lr_means_final_factor) * frac))


@dataclass
class StepResult:
    loss: Tensor
    image: np.ndarray
    mask: np.ndarray
    embedding: np.ndarray | None
    grads: SplatGrads | None


def forward_backward(state: TrainState, img: WildImage, backward: bool = True) -> tuple[StepResult, dict]:
    """Full forward (encode, transfer, render, losses) and backward for one image."""
    cfg = state.config
    cam = img.camera
    g = state.gauss
    h, w = img.hw
    gt = img.pixels.transpose(1, 2, 0)
    holder: dict = {}
    with Tape() as tape:
        sh = T.concat([g["sh_dc"], g["sh_rest"]], axis=2)
        comps: dict[str, Tensor] = {}
        emb = None
        if cfg.mode == "wegs":
            app = encode(img, state.encoder)
            emb = app.embedding
            mask = T.reshape(app.resized_mask, (h, w))
            dsh = delta_sh(sh, g["means"], emb, state.transfer)
            sh_used = transferred_sh(sh, dsh)
        else:
            mask = Tensor(np.ones((h, w), np.float32))
            sh_used = sh
        if cfg.force_static_mask:
            mask = Tensor(np.ones((h, w), np.float32))
        colors = sh_colors(sh_used, view_dirs(g["means"].data, cam.center), state.active_degree)
        image, _ = rasterize(g["means"], g["quats"], g["log_scales"], g["opacity_logits"], colors, cam,
                             on_backward=lambda gr: holder.__setitem__("grads", gr))
        comps["photometric"] = masked_photometric(image, gt, mask, cfg.weights)
        if cfg.mode == "wegs":
            comps["reg_mask"] = reg_mask(mask, cfg.mask_reg_reduction)
            comps["reg_sh"] = regularize_delta(dsh)
            opacity = T.sigmoid(g["opacity_logits"])
            comps["reg_ts"] = reg_transient_gaussians(opacity, g["means"].data, cam, mask.data, cfg.eps)
        try:
            loss = total_loss(comps, cfg.weights)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"{exc} at step {state.step} on image {img.id}") from exc
        if backward:
            tape.backward(loss)
    values = {k: float(v.data) for k, v in comps.items()}
    res = StepResult(loss, image.data, mask.data, None if emb is None else emb.data.copy(), holder.get("grads"))
    return res, values


def masked_psnr(render: np.ndarray, gt: np.ndarray, weight: np.ndarray) -> float:
    wsum = float(weight.sum()) * 3
    if wsum <= 0:
        return 0.0
    mse = float(np.sum(weight[..., None] * (render - gt) ** 2)) / wsum
    return 99.0 if mse <= 0 else min(99.0, 10 * np.log10(1.0 / mse))


def _apply_adam(state: TrainState) -> None:
    cfg = state.config
    g = state.gauss
    lrs = {
        "means": means_lr(cfg, state.step, state.extent),
        "quats": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "opacity_logits": cfg.lr_opacity,
        "sh_dc": cfg.lr_sh,
        "sh_rest": cfg.lr_sh / 20.0,
    }
    for name, lr in lrs.items():
        adam_step(g[name], lr)
    for p in state.network_params():
        if cfg.freeze_networks:
            p.grad = np.zeros_like(p.data)
        else:
            adam_step(p, cfg.lr_network)


def _remap_gaussians(state: TrainState, new_cloud: GaussianCloud, source: np.ndarray, fresh: np.ndarray) -> None:
    old = state.gauss
    new = _gauss_params(new_cloud)
    for name, p in new.items():
        o = old[name]
        p.m = np.where(_expand(fresh, o.m), 0, o.m[source]).astype(o.m.dtype)
        p.v = np.where(_expand(fresh, o.v), 0, o.v[source]).astype(o.v.dtype)
        p.t = o.t
    state.gauss = new
    state.cloud = new_cloud


def _expand(mask: np.ndarray, like: np.ndarray) -> np.ndarray:
    return mask.reshape((-1,) + (1,) * (like.ndim - 1))


def _next_image(state: TrainState, n_images: int) -> int:
    if not state.cycle:
        state.cycle = [int(i) for i in state.rng.permutation(n_images)]
    return state.cycle.pop(0)


def train_step(state: TrainState, img: WildImage) -> tuple[TrainState, dict]:
    cfg = state.config
    state.step += 1
    res, values = forward_backward(state, img)
    if res.grads is not None:
        accumulate_stats(state.cloud, res.grads, img.camera)
    _apply_adam(state)
    state.sync_cloud()
    if res.embedding is not None:
        state.embeddings[img.id] = res.embedding

    step = state.step
    if cfg.densify and step < cfg.densify_until:
        if step > cfg.densify_from and step % cfg.densify_every == 0:
            new, dmap = densify_and_prune(
                state.cloud, cfg.grad_threshold, cfg.percent_dense, cfg.min_opacity, state.extent, state.rng, with_map=True
            )
            _remap_gaussians(state, new, dmap.source, dmap.fresh)
        if cfg.opacity_reset_every and step % cfg.opacity_reset_every == 0:
            state.cloud = reset_opacity(state.cloud)
            p = state.gauss["opacity_logits"]
            p.assign(state.cloud.opacity_logits)
            p.m[:] = 0
            p.v[:] = 0
    if cfg.sh_unlock_every and step % cfg.sh_unlock_every == 0:
        state.active_degree = min(state.active_degree + 1, state.cloud.degree)

    gt = img.pixels.transpose(1, 2, 0)
    metrics = {
        "step": step,
        "image": img.id,
        "loss": float(res.loss.data),
        "photometric": values.get("photometric", 0.0),
        "reg_mask": values.get("reg_mask", 0.0),
        "reg_sh": values.get("reg_sh", 0.0),
        "reg_ts": values.get("reg_ts", 0.0),
        "psnr": masked_psnr(res.image, gt, res.mask),
        "n": len(state.cloud),
    }
    state.metrics.append(metrics)
    return state, metrics


def train(
    config: TrainConfig,
    images: Sequence[WildImage],
    init_points: SparsePointSet | None = None,
    state: TrainState | None = None,
    until: int | None = None,
    callback: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Run (or continue) training up to ``until`` (default ``config.total_steps``) steps."""
    if not images:
        raise ConfigurationError("training needs at least one image")
    if state is None:
        if init_points is None:
            raise ConfigurationError("training needs initial points or a state to resume")
        cloud = init_from_points(init_points, config.sh_degree)
        state = init_state(config, cloud, [im.camera for im in images])
    by_index = list(images)
    until = config.total_steps if until is None else until
    t0 = time.perf_counter()
    writer = None
    if config.metrics_csv:
        path = Path(config.metrics_csv)
        new_file = not path.exists()
        fh = path.open("a", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new_file:
            writer.writeheader()
    try:
        while state.step < until:
            img = by_index[_next_image(state, len(by_index))]
            state, metrics = train_step(state, img)
            if writer is not None:
                writer.writerow({**metrics, "wall_time": round(time.perf_counter() - t0, 4)})
            if callback is not None:
                callback(state, metrics)
            if config.checkpoint_every and config.checkpoint_dir and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, Path(config.checkpoint_dir) / f"step_{state.step:06d}")
    finally:
        if writer is not None:
            fh.close()
    return state


# ---------------------------------------------------------------- checkpoints


def write_embeddings(embeddings: dict[int, np.ndarray], dim: int) -> bytes:
    """Appearance library: u32 count, u32 dim, then rows of (u32 id, dim x f32)."""
    out = [np.array([len(embeddings), dim], "<u4").tobytes()]
    for k in sorted(embeddings):
        out.append(np.array([k], "<u4").tobytes() + np.asarray(embeddings[k], "<f4").reshape(dim).tobytes())
    return b"".join(out)


def read_embeddings(buf: bytes) -> dict[int, np.ndarray]:
    count, dim = np.frombuffer(buf, "<u4", count=2)
    out = {}
    pos = 8
    for _ in range(int(count)):
        (k,) = np.frombuffer(buf, "<u4", count=1, offset=pos)
        out[int(k)] = np.frombuffer(buf, "<f4", count=int(dim), offset=pos + 4).astype(np.float32)
        pos += 4 + 4 * int(dim)
    return out


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Directory with cloud.ply, params.bin, embeddings.bin, config.txt and state.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "cloud.ply").write_bytes(write_ply(state.cloud))
    blocks = param_blocks(state.network_params(), with_state=True)
    blocks.update(param_blocks(state.gauss.values(), with_state=True))
    blocks["stats.grad_accum"] = state.cloud.grad_accum
    blocks["stats.grad_count"] = state.cloud.grad_count.astype(np.float32)
    blocks["stats.origin"] = state.cloud.origin.astype(np.float32)
    (path / "params.bin").write_bytes(write_blocks(blocks))
    (path / "embeddings.bin").write_bytes(write_embeddings(state.embeddings, state.config.embed_dim))
    (path / "config.txt").write_text(format_config(state.config))
    meta = {
        "step": state.step,
        "active_degree": state.active_degree,
        "extent": state.extent,
        "cycle": state.cycle,
        "rng": state.rng.bit_generator.state,
    }
    (path / "state.json").write_text(json.dumps(meta, indent=1, default=int))
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    config = parse_config((path / "config.txt").read_text())
    cloud = read_ply((path / "cloud.ply").read_bytes())
    meta = json.loads((path / "state.json").read_text())
    blocks = read_blocks((path / "params.bin").read_bytes())
    cloud.grad_accum = blocks["stats.grad_accum"].copy()
    cloud.grad_count = blocks["stats.grad_count"].astype(np.int64)
    cloud.origin = blocks["stats.origin"].astype(np.int64)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(config, cloud, _gauss_params(cloud), None, None, meta["extent"], rng,
                       meta["step"], meta["active_degree"], list(meta["cycle"]))
    if config.mode == "wegs":
        state.encoder = init_encoder(np.random.default_rng(0), EncoderConfig(config.channels, config.embed_dim))
        state.transfer = init_transfer(np.random.default_rng(0), TransferConfig(cloud.degree, config.embed_dim, config.transfer_hidden))
    load_param_blocks(state.network_params(), blocks)
    load_param_blocks(state.gauss.values(), blocks)
    state.sync_cloud()
    state.embeddings = read_embeddings((path / "embeddings.bin").read_bytes())
    return state
