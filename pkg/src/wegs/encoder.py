"""Joint appearance encoder and static-content mask predictor.

Enc1 extracts a quarter-resolution feature map, channel attention reweights
it, a small U-Net turns the result into a static-content mask M, and Enc2
embeds ``M * F' + F`` into the appearance vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import Camera
from .ops import conv2d, conv_transpose2d, pad_reflect, pool_spatial, resize_bilinear
from .tensor import Param, Tensor


@dataclass
class WildImage:
    id: int
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    camera: Camera | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"pixels must be (3, H, W), got {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("pixels must lie in [0, 1]")

    @property
    def hw(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


@dataclass
class AppearanceOutput:
    embedding: Tensor  # (D_l,)
    static_mask: Tensor  # (1, H', W')
    resized_mask: Tensor  # (1, H, W)

    @property
    def transient_mask(self) -> np.ndarray:
        return 1.0 - self.resized_mask.data


@dataclass
class EncoderConfig:
    channels: int = 32
    embed_dim: int = 16
    attn_hidden: int = 8
    unet_channels: int = 16
    mask_bias_init: float = 0.0


# the U-Net halves the quarter-resolution map twice more
PAD_MULTIPLE = 16


@dataclass
class EncoderParams:
    config: EncoderConfig
    p: dict[str, Param] = field(default_factory=dict)

    def params(self) -> list[Param]:
        return list(self.p.values())

    def group(self, prefix: str) -> list[Param]:
        return [v for k, v in self.p.items() if k.startswith(prefix)]

    def __getitem__(self, name: str) -> Param:
        return self.p[name]


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_encoder(rng: np.random.Generator, cfg: EncoderConfig | None = None) -> EncoderParams:
    cfg = cfg or EncoderConfig()
    c, u, d, hid = cfg.channels, cfg.unet_channels, cfg.embed_dim, cfg.attn_hidden
    shapes = {
        "enc1.0": (c, 3, 4, 4),
        "enc1.1": (c, c, 4, 4),
        "enc1.2": (c, c, 3, 3),
        "unet.down0": (u, c, 4, 4),
        "unet.down1": (u, u, 4, 4),
        "enc2.0": (c, c, 3, 3),
        "enc2.1": (c, c, 3, 3),
        "enc2.2": (c, c, 3, 3),
    }
    out = EncoderParams(cfg)
    for name, shape in shapes.items():
        out.p[name + ".w"] = Param(_uniform(rng, shape, np.prod(shape[1:])), name + ".w")
        out.p[name + ".b"] = Param(np.zeros(shape[0], np.float32), name + ".b")
    # transpose kernels are (C_in, C_out, k, k)
    for name, shape in {"unet.up0": (u, u, 2, 2), "unet.up1": (u, 1, 2, 2)}.items():
        out.p[name + ".w"] = Param(_uniform(rng, shape, shape[0] * 4), name + ".w")
        out.p[name + ".b"] = Param(np.zeros(shape[1], np.float32), name + ".b")
    out.p["unet.up1.b"].data[:] = cfg.mask_bias_init
    for name, (i, o) in {"cam.0": (c, hid), "cam.1": (hid, c), "head": (c, d)}.items():
        out.p[name + ".w"] = Param(_uniform(rng, (i, o), i), name + ".w")
        out.p[name + ".b"] = Param(np.zeros(o, np.float32), name + ".b")
    return out


def _conv(x, p, name, stride=1, padding=1):
    return conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride, padding=padding)


def channel_attention(feat: Tensor, p: EncoderParams) -> Tensor:
    def mlp(v):
        h = T.relu(T.linear(v, p["cam.0.w"], p["cam.0.b"]))
        return T.linear(h, p["cam.1.w"], p["cam.1.b"])

    return T.sigmoid(T.add(mlp(pool_spatial(feat, "avg")), mlp(pool_spatial(feat, "max"))))


def unet_mask(feat: Tensor, p: EncoderParams) -> Tensor:
    d0 = T.relu(_conv(feat, p, "unet.down0", stride=2))
    d1 = T.relu(_conv(d0, p, "unet.down1", stride=2))
    u0 = T.relu(conv_transpose2d(d1, p["unet.up0.w"], p["unet.up0.b"], stride=2))
    logits = conv_transpose2d(T.add(u0, d0), p["unet.up1.w"], p["unet.up1.b"], stride=2)
    return T.sigmoid(logits)


def encode(img, p: EncoderParams, style_mode: bool = False) -> AppearanceOutput:
    pixels = img.pixels if isinstance(img, WildImage) else img
    x = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels, dtype=np.float32))
    _, h, w = x.shape
    x = pad_reflect(x, -h % PAD_MULTIPLE, -w % PAD_MULTIPLE)
    _, hp, wp = x.shape

    f = T.relu(_conv(x, p, "enc1.0", stride=2))
    f = T.relu(_conv(f, p, "enc1.1", stride=2))
    f = T.relu(_conv(f, p, "enc1.2"))

    att = channel_attention(f, p)
    f1 = T.mul(f, T.reshape(att, (-1, 1, 1)))
    mask = unet_mask(f1, p)
    if style_mode:
        mask = Tensor(np.zeros(mask.shape, mask.dtype))
    fused = T.add(T.mul(f1, mask), f)

    e = T.relu(_conv(fused, p, "enc2.0"))
    e = T.relu(_conv(e, p, "enc2.1"))
    e = T.relu(_conv(e, p, "enc2.2"))
    emb = T.linear(pool_spatial(e, "avg"), p["head.w"], p["head.b"])

    resized = T.crop2d(resize_mask(mask, hp, wp), h, w)
    return AppearanceOutput(emb, mask, resized)


def resize_mask(mask, h: int, w: int) -> Tensor:
    return resize_bilinear(mask, h, w)
