"""Adam and the binary parameter container."""

from __future__ import annotations

import struct
from typing import Iterable, Mapping

import numpy as np

from .tensor import Param

MAGIC = b"WGSP"
VERSION = 1


class OptimizerError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


def adam_step(p: Param, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Param:
    """One bias-corrected Adam update in place; zeroes ``p.grad`` afterwards."""
    if lr <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise OptimizerError(f"invalid Adam hyperparameters for {p.name}: lr={lr}, betas=({beta1}, {beta2})")
    g = p.grad
    if not np.all(np.isfinite(g)):
        raise OptimizerError(f"non-finite gradient in parameter {p.name!r}")
    p.t += 1
    p.m = beta1 * p.m + (1 - beta1) * g
    p.v = beta2 * p.v + (1 - beta2) * g * g
    m_hat = p.m / (1 - beta1 ** p.t)
    v_hat = p.v / (1 - beta2 ** p.t)
    p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)
    p.grad = np.zeros_like(p.data)
    return p


def write_blocks(blocks: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named f32 arrays.

    Layout: magic (4 bytes), version (u8), block count (u32), then per block
    name length (u16), utf-8 name, ndim (u8), dims (u32 each), raw <f4 data.
    """
    out = [MAGIC, struct.pack("<BI", VERSION, len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def read_blocks(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("not a parameter container (bad magic)")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = 9
    blocks: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            blocks[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated parameter container: {exc}") from exc
    return blocks


def param_blocks(params: Iterable[Param], with_state: bool = False) -> dict[str, np.ndarray]:
    blocks = {}
    for p in params:
        blocks[p.name] = p.data
        if with_state:
            blocks[p.name + "@m"] = p.m
            blocks[p.name + "@v"] = p.v
            blocks[p.name + "@t"] = np.array([p.t], dtype=np.float32)
    return blocks


def load_param_blocks(params: Iterable[Param], blocks: Mapping[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in blocks:
            raise FormatError(f"missing parameter block {p.name!r}")
        p.assign(blocks[p.name])
        if p.name + "@m" in blocks:
            p.m = blocks[p.name + "@m"].copy()
            p.v = blocks[p.name + "@v"].copy()
            p.t = int(blocks[p.name + "@t"][0])
        p.grad = np.zeros_like(p.data)
