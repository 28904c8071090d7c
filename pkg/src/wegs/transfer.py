"""Residual SH transfer: a small MLP maps (base SH, centre, appearance
embedding) to per-Gaussian SH residuals, and ``bake`` freezes them into a
plain Gaussian cloud."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cloud import GaussianCloud
from .geometry import n_coeffs, positional_encoding
from .tensor import DimensionError, Param, Tensor, make

SH_FREQS = 2
MEAN_FREQS = 4
CHUNK = 65536


@dataclass
class TransferConfig:
    degree: int = 3
    embed_dim: int = 16
    hidden: int = 64


def input_width(cfg: TransferConfig) -> int:
    sh = 3 * n_coeffs(cfg.degree)
    return sh * (1 + 2 * SH_FREQS) + 3 * (1 + 2 * MEAN_FREQS) + cfg.embed_dim


@dataclass
class TransferParams:
    config: TransferConfig
    layers: list[tuple[Param, Param]] = field(default_factory=list)

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer]


def init_transfer(rng: np.random.Generator, cfg: TransferConfig | None = None) -> TransferParams:
    cfg = cfg or TransferConfig()
    widths = [input_width(cfg), cfg.hidden, cfg.hidden, cfg.hidden, 3 * n_coeffs(cfg.degree)]
    out = TransferParams(cfg)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        w = np.zeros((a, b), np.float32) if last else (rng.uniform(-1, 1, (a, b)) * np.sqrt(6.0 / a)).astype(np.float32)
        out.layers.append((Param(w, f"transfer.{i}.w"), Param(np.zeros(b, np.float32), f"transfer.{i}.b")))
    return out


def _mlp(x: Tensor, params: TransferParams) -> Tensor:
    for i, (w, b) in enumerate(params.layers):
        x = T.linear(x, w, b)
        if i < len(params.layers) - 1:
            x = T.relu(x)
    return x


def delta_sh(sh, means, embedding, params: TransferParams) -> Tensor:
    """Per-Gaussian SH residuals, shape (N, 3, K)."""
    sh, means, embedding = T._tensor(sh), T._tensor(means), T._tensor(embedding)
    cfg = params.config
    if embedding.shape != (cfg.embed_dim,):
        raise DimensionError(f"embedding has shape {embedding.shape}, expected ({cfg.embed_dim},)")
    n, _, k = sh.shape
    if k != n_coeffs(cfg.degree):
        raise DimensionError(f"SH layout {sh.shape} does not match transfer degree {cfg.degree}")
    outs = []
    for start in range(0, max(n, 1), CHUNK):
        rows = np.arange(start, min(n, start + CHUNK))
        sh_c = T.take_rows(sh, rows) if n > CHUNK else sh
        mu_c = T.take_rows(means, rows) if n > CHUNK else means
        feats = T.concat(
            [
                positional_encoding(T.reshape(sh_c, (len(rows), 3 * k)), SH_FREQS),
                positional_encoding(mu_c, MEAN_FREQS),
                T.broadcast_to(T.reshape(embedding, (1, -1)), (len(rows), cfg.embed_dim)),
            ],
            axis=1,
        )
        outs.append(_mlp(feats, params))
    out = outs[0] if len(outs) == 1 else T.concat(outs, axis=0)
    return T.reshape(out, (n, 3, k))


def transferred_sh(sh, dsh) -> Tensor:
    sh, dsh = T._tensor(sh), T._tensor(dsh)
    if sh.shape != dsh.shape:
        raise DimensionError(f"SH {sh.shape} and residual {dsh.shape} differ in shape")
    return T.add(sh, dsh)


def bake(cloud: GaussianCloud, embedding, params: TransferParams) -> GaussianCloud:
    """Copy of ``cloud`` with the residual for ``embedding`` folded into its SH."""
    emb = np.asarray(T.as_array(embedding), dtype=np.float32)
    dsh = delta_sh(Tensor(cloud.sh), Tensor(cloud.means), Tensor(emb), params)
    out = cloud.copy()
    out.sh = (cloud.sh + dsh.data).astype(np.float32)
    return out


def row_norms(x) -> Tensor:
    """L2 norm of each leading-axis row; the subgradient at zero is zero."""
    x = T._tensor(x)
    flat = x.data.reshape(len(x.data), -1)
    norms = np.sqrt(np.sum(flat * flat, axis=1))

    def back(g):
        scale = np.divide(g, norms, out=np.zeros_like(norms), where=norms > 0)
        return ((flat * scale[:, None]).reshape(x.shape),)

    return make(norms, (x,), back, "row_norms")


def regularize_delta(dsh) -> Tensor:
    """Mean over Gaussians of the L2 norm of each Gaussian's residual."""
    dsh = T._tensor(dsh)
    if dsh.shape[0] == 0:
        return Tensor(np.float32(0.0))
    return T.mean(row_norms(dsh))
