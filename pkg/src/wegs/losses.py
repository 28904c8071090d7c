"""Training objectives: masked L1 + SSIM, mask and residual regularizers,
and the opacity penalty for Gaussians landing on transient pixels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import Z_NEAR, Camera
from .ops import sandwich
from .tensor import DimensionError, Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class TrainingDivergenceError(FloatingPointError):
    pass


class SizeError(ValueError):
    pass


@dataclass
class LossWeights:
    w_l1: float = 0.8
    w_ssim: float = 0.2
    w_regM: float = 1e-5
    w_regSH: float = 0.1
    w_regTS: float = 1e-5
    eps: float = 0.5

    def __post_init__(self):
        for name in ("w_l1", "w_ssim", "w_regM", "w_regSH", "w_regTS"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def valid_filter_matrix(n: int, kernel: np.ndarray) -> np.ndarray:
    k = len(kernel)
    m = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        m[i, i:i + k] = kernel
    return m


def ssim(a, b) -> Tensor:
    """Mean SSIM of two (H, W, 3) images over channels and all valid window positions."""
    a, b = T._tensor(a), T._tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shapes {a.shape} and {b.shape} differ")
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise SizeError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()
    rows, cols = valid_filter_matrix(h, win), valid_filter_matrix(w, win)
    x = T.transpose(a, (2, 0, 1))
    y = T.transpose(b, (2, 0, 1))

    def blur(v):
        return sandwich(v, rows, cols)

    mx, my = blur(x), blur(y)
    mx2, my2, mxy = T.mul(mx, mx), T.mul(my, my), T.mul(mx, my)
    sxx = T.sub(blur(T.mul(x, x)), mx2)
    syy = T.sub(blur(T.mul(y, y)), my2)
    sxy = T.sub(blur(T.mul(x, y)), mxy)
    num = T.mul(T.add(T.mul(mxy, 2.0), SSIM_C1), T.add(T.mul(sxy, 2.0), SSIM_C2))
    den = T.mul(T.add(T.add(mx2, my2), SSIM_C1), T.add(T.add(sxx, syy), SSIM_C2))
    return T.mean(T.div(num, den))


def l1(a, b) -> Tensor:
    return T.mean(T.tabs(T.sub(a, b)))


def masked_photometric(render, gt, mask, weights: LossWeights | None = None) -> Tensor:
    """``w_l1 * L1(M*r, M*g) + w_ssim * (1 - SSIM(M*r, M*g))`` with M broadcast over colour."""
    weights = weights or LossWeights()
    render, gt, mask = T._tensor(render), T._tensor(gt), T._tensor(mask)
    if render.shape != gt.shape or render.shape[:2] != mask.shape[-2:]:
        raise DimensionError(f"masked_photometric: render {render.shape}, gt {gt.shape}, mask {mask.shape}")
    h, w = render.shape[:2]
    m = T.reshape(mask, (h, w, 1))
    r = T.mul(render, m)
    g = T.mul(gt, m)
    loss = T.mul(l1(r, g), weights.w_l1)
    if weights.w_ssim:
        loss = T.add(loss, T.mul(T.sub(1.0, ssim(r, g)), weights.w_ssim))
    return loss


def reg_mask(mask, reduction: str = "mean") -> Tensor:
    """Penalty on masking: mean (or sum) over pixels of ``(1 - M)^2``."""
    sq = T.square(T.sub(1.0, T._tensor(mask)))
    return T.mean(sq) if reduction == "mean" else T.tsum(sq)


def transient_indicator(means: np.ndarray, cam: Camera, mask: np.ndarray, eps: float) -> np.ndarray:
    """1 where a Gaussian centre projects (nearest pixel) onto mask values below ``eps``."""
    mask = np.asarray(mask).reshape(cam.height, cam.width)
    t = np.asarray(means, dtype=np.float64) @ cam.rotation.T + cam.translation
    z = t[:, 2]
    front = z > Z_NEAR
    zs = np.where(front, z, 1.0)
    u = np.rint(cam.fx * t[:, 0] / zs + cam.cx)
    v = np.rint(cam.fy * t[:, 1] / zs + cam.cy)
    inside = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    out = np.zeros(len(means), bool)
    ui, vi = u[inside].astype(int), v[inside].astype(int)
    out[inside] = mask[vi, ui] < eps
    return out


def reg_transient_gaussians(opacity, means: np.ndarray, cam: Camera, mask: np.ndarray, eps: float = 0.5) -> Tensor:
    """Sum of opacities of Gaussians whose centres fall on transient pixels."""
    opacity = T._tensor(opacity)
    ind = transient_indicator(means, cam, mask, eps).astype(opacity.dtype)
    return T.tsum(T.mul(T.reshape(opacity, (-1,)), ind))


def total_loss(components: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """``L_c + w_regM L_regM + w_regSH L_regSH + w_regTS L_regTS``; absent terms count as zero."""
    for name, value in components.items():
        if not np.all(np.isfinite(T.as_array(value))):
            raise TrainingDivergenceError(f"loss component {name!r} is not finite")
    loss = components["photometric"]
    for name, w in (("reg_mask", weights.w_regM), ("reg_sh", weights.w_regSH), ("reg_ts", weights.w_regTS)):
        if name in components and w:
            loss = T.add(loss, T.mul(components[name], w))
    return loss
