"""Differentiable front-to-back compositing of projected Gaussians.

Two forward/backward implementations share the per-splat preparation:

* ``render_naive`` walks the depth-sorted splats one at a time over the full
  image. It is the reference.
* ``render_tiled`` bins splats into 16x16 tiles by their 3-sigma bounding box
  and composites each tile with array ops.

A splat's footprint is truncated at its 3-sigma ellipse (Mahalanobis
power > 4.5 gives zero alpha), which the bounding box always contains, so
binning never drops a contribution and both paths produce the same pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import GaussianCloud
from .geometry import Camera, Projected, covariances, covariances_backward, project, project_backward
from .tensor import Tensor, _tensor, make

TILE = 16
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
POWER_MAX = 4.5
BBOX_MARGIN = 1e-2


@dataclass
class Splats:
    """Screen-space splats for one camera, in float32."""

    n: int
    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacity: np.ndarray  # (N,)
    cov3d: np.ndarray
    proj: Projected
    conic: np.ndarray  # (N, 3): A, B, C of the inverse 2D covariance
    usable: np.ndarray  # (N,) bool
    order: np.ndarray  # usable indices sorted front to back
    radius: np.ndarray  # (N, 2) half extents of the 3-sigma bounding box
    n_skipped: int


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    n_skipped: int
    method: str
    splats: Splats = field(repr=False)
    colors: np.ndarray = field(repr=False)
    background: np.ndarray = field(repr=False)
    records: object = field(repr=False, default=None)


def _opacity(logits: np.ndarray) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-logits.astype(np.float64)))).astype(logits.dtype)


def prepare(means, quats, log_scales, opacity_logits, cam: Camera) -> Splats:
    dtype = means.dtype
    n = len(means)
    scales = np.exp(log_scales.astype(np.float64)).astype(dtype)
    cov3d = covariances(quats, scales).astype(dtype)
    proj = project(means, cov3d, cam)
    a, b, c = proj.cov2d[:, 0, 0], proj.cov2d[:, 0, 1], proj.cov2d[:, 1, 1]
    det = a * c - b * b
    pd = (det > 0) & (a > 0) & np.isfinite(det)
    n_skipped = int(np.sum(proj.valid & ~pd))
    usable = proj.valid & pd
    safe_det = np.where(pd, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], -1).astype(dtype)
    radius = 3.0 * np.sqrt(np.stack([np.maximum(a, 0), np.maximum(c, 0)], -1)) + BBOX_MARGIN
    idx = np.flatnonzero(usable)
    order = idx[np.lexsort((idx, proj.depth[idx]))]
    return Splats(n, means, quats, scales, _opacity(opacity_logits.reshape(-1)), cov3d, proj, conic, usable, order, radius, n_skipped)


def splat_alpha(conic, mu2d, opacity, px, py):
    """Alpha of K splats at P pixels, shape (K, P), plus the offsets used."""
    dx = px[None, :] - mu2d[:, 0:1]
    dy = py[None, :] - mu2d[:, 1:2]
    power = 0.5 * (conic[:, 0:1] * dx * dx + conic[:, 2:3] * dy * dy) + conic[:, 1:2] * dx * dy
    a = opacity[:, None] * np.exp(-power)
    a = np.where((power <= POWER_MAX) & (a >= ALPHA_MIN), a, 0).astype(mu2d.dtype)
    return a, dx, dy


def _background(bg, dtype) -> np.ndarray:
    return np.zeros(3, dtype) if bg is None else np.asarray(bg, dtype=dtype).reshape(3)


def _pixel_grid(h: int, w: int, dtype):
    py, px = np.mgrid[0:h, 0:w]
    return px.reshape(-1).astype(dtype), py.reshape(-1).astype(dtype)


# ---------------------------------------------------------------- naive reference


def forward_naive(s: Splats, colors: np.ndarray, cam: Camera, bg=None) -> RenderOutput:
    h, w = cam.height, cam.width
    dtype = s.means.dtype
    bg = _background(bg, dtype)
    px, py = _pixel_grid(h, w, dtype)
    t = np.ones(h * w, dtype)
    img = np.zeros((h * w, 3), dtype)
    done = np.zeros(h * w, bool)
    alphas, t_before = [], []
    for i in s.order:
        a, _, _ = splat_alpha(s.conic[i:i + 1], s.proj.mu2d[i:i + 1], s.opacity[i:i + 1], px, py)
        a = np.where(done, 0, a[0]).astype(dtype)
        alphas.append(a)
        t_before.append(t)
        img += (t * a)[:, None] * colors[i]
        t = t * (1 - a)
        done |= t < T_MIN
    img += t[:, None] * bg
    out = RenderOutput(img.reshape(h, w, 3), (1 - t).reshape(h, w), s.n_skipped, "naive", s, colors, bg)
    out.records = (alphas, t_before)
    return out


def backward_naive(out: RenderOutput, d_image: np.ndarray, cam: Camera):
    s = out.splats
    alphas, t_before = out.records
    h, w = cam.height, cam.width
    dtype = s.means.dtype
    px, py = _pixel_grid(h, w, dtype)
    g = d_image.reshape(-1, 3).astype(dtype)
    r = g @ out.background
    d_alpha = np.zeros((s.n, h * w), dtype)
    d_colors = np.zeros((s.n, 3), dtype)
    for j in range(len(s.order) - 1, -1, -1):
        i = s.order[j]
        a, t = alphas[j], t_before[j]
        u = g @ out.colors[i]
        d_colors[i] = (t * a) @ g
        d_alpha[i] = np.where(a > 0, t * (u - r), 0)
        r = a * u + (1 - a) * r
    grads = _alpha_to_screen(s, d_alpha, px, py, np.arange(s.n))
    return grads, d_colors


def _alpha_to_screen(s: Splats, d_alpha, px, py, ids):
    """Push dL/d(alpha) for splats ``ids`` at pixels (px, py) to opacity, 2D mean and conic."""
    a, dx, dy = splat_alpha(s.conic[ids], s.proj.mu2d[ids], s.opacity[ids], px, py)
    d_power = -d_alpha * a
    conic = s.conic[ids]
    op = np.where(s.opacity[ids] > 0, s.opacity[ids], 1)
    d_opacity = np.sum(d_alpha * a, axis=1) / op
    d_mu = np.stack(
        [
            -np.sum(d_power * (conic[:, 0:1] * dx + conic[:, 1:2] * dy), axis=1),
            -np.sum(d_power * (conic[:, 1:2] * dx + conic[:, 2:3] * dy), axis=1),
        ],
        -1,
    )
    d_conic = np.stack(
        [np.sum(0.5 * dx * dx * d_power, 1), np.sum(dx * dy * d_power, 1), np.sum(0.5 * dy * dy * d_power, 1)], -1
    )
    return d_opacity, d_mu, d_conic


# ---------------------------------------------------------------- tiled


def tile_ranges(s: Splats, cam: Camera):
    """Inclusive tile index ranges (x0, x1, y0, y1) per splat; empty when x0 > x1 or y0 > y1."""
    ntx = -(-cam.width // TILE)
    nty = -(-cam.height // TILE)
    mu = s.proj.mu2d.astype(np.float64)
    lo = mu - s.radius
    hi = mu + s.radius
    x0 = np.maximum(0, np.ceil((lo[:, 0] - (TILE - 1)) / TILE)).astype(int)
    x1 = np.minimum(ntx - 1, np.floor(hi[:, 0] / TILE)).astype(int)
    y0 = np.maximum(0, np.ceil((lo[:, 1] - (TILE - 1)) / TILE)).astype(int)
    y1 = np.minimum(nty - 1, np.floor(hi[:, 1] / TILE)).astype(int)
    # border tiles may be partial: a box starting past the last pixel overlaps nothing
    x0 = np.where(lo[:, 0] > cam.width - 1, x1 + 1, x0)
    y0 = np.where(lo[:, 1] > cam.height - 1, y1 + 1, y0)
    return x0, x1, y0, y1


def bin_splats(s: Splats, cam: Camera) -> dict[int, np.ndarray]:
    """Map tile id -> splat indices overlapping it, front to back."""
    ntx = -(-cam.width // TILE)
    x0, x1, y0, y1 = tile_ranges(s, cam)
    tiles, ranks = [], []
    for rank, i in enumerate(s.order):
        if x0[i] > x1[i] or y0[i] > y1[i]:
            continue
        ty, tx = np.mgrid[y0[i]:y1[i] + 1, x0[i]:x1[i] + 1]
        ids = (ty * ntx + tx).reshape(-1)
        tiles.append(ids)
        ranks.append(np.full(len(ids), rank))
    if not tiles:
        return {}
    tiles = np.concatenate(tiles)
    ranks = np.concatenate(ranks)
    perm = np.argsort(tiles, kind="stable")
    tiles, ranks = tiles[perm], ranks[perm]
    bounds = np.flatnonzero(np.diff(tiles)) + 1
    return {int(t[0]): s.order[r] for t, r in zip(np.split(tiles, bounds), np.split(ranks, bounds))}


def _tile_pixels(tile: int, cam: Camera):
    ntx = -(-cam.width // TILE)
    ty, tx = divmod(tile, ntx)
    ys = np.arange(ty * TILE, min((ty + 1) * TILE, cam.height))
    xs = np.arange(tx * TILE, min((tx + 1) * TILE, cam.width))
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return gy.reshape(-1), gx.reshape(-1)


def forward_tiled(s: Splats, colors: np.ndarray, cam: Camera, bg=None) -> RenderOutput:
    h, w = cam.height, cam.width
    dtype = s.means.dtype
    bg = _background(bg, dtype)
    img = np.empty((h, w, 3), dtype)
    img[:] = bg
    t_final = np.ones((h, w), dtype)
    records = {}
    for tile, ids in bin_splats(s, cam).items():
        gy, gx = _tile_pixels(tile, cam)
        a, _, _ = splat_alpha(s.conic[ids], s.proj.mu2d[ids], s.opacity[ids], gx.astype(dtype), gy.astype(dtype))
        tcum = np.cumprod(1 - a, axis=0)
        t_excl = np.vstack([np.ones((1, a.shape[1]), dtype), tcum[:-1]])
        incl = t_excl >= T_MIN
        wgt = np.where(incl, a * t_excl, 0).astype(dtype)
        last = incl.sum(axis=0) - 1
        tf = tcum[last, np.arange(a.shape[1])]
        img[gy, gx] = wgt.T @ colors[ids] + tf[:, None] * bg
        t_final[gy, gx] = tf
        records[tile] = (ids, a, t_excl, tcum, incl, wgt, last, tf)
    out = RenderOutput(img, 1 - t_final, s.n_skipped, "tiled", s, colors, bg)
    out.records = records
    return out


def backward_tiled(out: RenderOutput, d_image: np.ndarray, cam: Camera):
    s = out.splats
    dtype = s.means.dtype
    d_opacity = np.zeros(s.n, dtype)
    d_mu = np.zeros((s.n, 2), dtype)
    d_conic = np.zeros((s.n, 3), dtype)
    d_colors = np.zeros((s.n, 3), dtype)
    for tile, (ids, a, t_excl, tcum, incl, wgt, last, tf) in out.records.items():
        gy, gx = _tile_pixels(tile, cam)
        g = d_image[gy, gx].astype(dtype)  # (P, 3)
        d_colors[ids] += wgt @ g
        u = out.colors[ids] @ g.T  # (K, P): dL/dC . c_k
        beta = g @ out.background
        wu = wgt * u
        suffix = np.cumsum(wu[::-1], axis=0)[::-1]
        behind = np.vstack([suffix[1:], np.zeros((1, a.shape[1]), dtype)]) + tf * beta
        rows = np.arange(a.shape[0])[:, None]
        is_last = rows == last[None, :]
        r = np.where(is_last, beta, behind / np.where(is_last | ~incl, 1, tcum))
        d_alpha = np.where(incl & (a > 0), t_excl * (u - r), 0).astype(dtype)
        d_op, d_m, d_c = _alpha_to_screen(s, d_alpha, gx.astype(dtype), gy.astype(dtype), ids)
        d_opacity[ids] += d_op
        d_mu[ids] += d_m
        d_conic[ids] += d_c
    return (d_opacity, d_mu, d_conic), d_colors


# ---------------------------------------------------------------- chain to Gaussian parameters


@dataclass
class SplatGrads:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    mean2d: np.ndarray  # dL/d(mu') in pixels
    visible: np.ndarray


def _screen_to_params(s: Splats, cam: Camera, d_opacity, d_mu, d_conic, d_colors) -> SplatGrads:
    q = s.conic
    qm = np.stack([np.stack([q[:, 0], q[:, 1]], -1), np.stack([q[:, 1], q[:, 2]], -1)], -2)
    gq = np.stack(
        [np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1), np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2
    )
    d_cov2d = -(qm @ gq @ qm)
    d_cov2d = d_cov2d * s.usable[:, None, None]
    d_mu = d_mu * s.usable[:, None]
    d_means, d_cov3d = project_backward(s.proj, s.cov3d, cam, d_mu, d_cov2d)
    d_quats, d_scales = covariances_backward(s.quats, s.scales, d_cov3d)
    d_logits = d_opacity * s.opacity * (1 - s.opacity)
    dt = s.means.dtype
    return SplatGrads(
        d_means.astype(dt), d_quats.astype(dt), (d_scales * s.scales).astype(dt),
        d_logits[:, None].astype(dt), d_colors.astype(dt), d_mu.astype(dt), np.zeros(s.n, bool),
    )


def render_backward(out: RenderOutput, d_image: np.ndarray, cam: Camera, cloud: GaussianCloud | None = None) -> SplatGrads:
    """Analytic gradients of a render; optionally accumulates densification statistics into ``cloud``."""
    d_image = np.asarray(d_image)
    if out.method == "naive":
        (d_opacity, d_mu, d_conic), d_colors = backward_naive(out, d_image, cam)
    else:
        (d_opacity, d_mu, d_conic), d_colors = backward_tiled(out, d_image, cam)
    grads = _screen_to_params(out.splats, cam, d_opacity, d_mu, d_conic, d_colors)
    grads.visible = visible_mask(out, cam)
    if cloud is not None:
        accumulate_stats(cloud, grads, cam)
    return grads


def visible_mask(out: RenderOutput, cam: Camera) -> np.ndarray:
    s = out.splats
    x0, x1, y0, y1 = tile_ranges(s, cam)
    return s.usable & (x0 <= x1) & (y0 <= y1)


def accumulate_stats(cloud: GaussianCloud, grads: SplatGrads, cam: Camera) -> None:
    # position gradients in normalised device units, as the usual densification threshold expects
    ndc = grads.mean2d.astype(np.float64) * np.array([cam.width / 2.0, cam.height / 2.0])
    norm = np.linalg.norm(ndc, axis=1)
    vis = grads.visible
    cloud.grad_accum[vis] += norm[vis]
    cloud.grad_count[vis] += 1


# ---------------------------------------------------------------- public entry points


def _render(cloud: GaussianCloud, cam: Camera, colors, method: str, bg=None) -> RenderOutput:
    s = prepare(cloud.means, cloud.quats, cloud.log_scales, cloud.opacity_logits, cam)
    colors = np.asarray(colors, dtype=cloud.means.dtype).reshape(len(cloud), 3)
    fwd = forward_naive if method == "naive" else forward_tiled
    return fwd(s, colors, cam, bg)


def render_naive(cloud: GaussianCloud, cam: Camera, per_gaussian_color, bg=None) -> RenderOutput:
    return _render(cloud, cam, per_gaussian_color, "naive", bg)


def render_tiled(cloud: GaussianCloud, cam: Camera, per_gaussian_color, bg=None) -> RenderOutput:
    return _render(cloud, cam, per_gaussian_color, "tiled", bg)


def rasterize(means, quats, log_scales, opacity_logits, colors, cam: Camera, method: str = "tiled", bg=None, on_backward=None):
    """Render as a tape op over tensor inputs; returns (image tensor, RenderOutput).

    ``on_backward(grads)`` is called with the full :class:`SplatGrads` when the
    tape reaches this op.
    """
    ins = [_tensor(x) for x in (means, quats, log_scales, opacity_logits, colors)]
    s = prepare(ins[0].data, ins[1].data, ins[2].data, ins[3].data, cam)
    fwd = forward_naive if method == "naive" else forward_tiled
    out = fwd(s, ins[4].data, cam, bg)

    def back(g):
        grads = render_backward(out, g, cam)
        if on_backward is not None:
            on_backward(grads)
        return grads.means, grads.quats, grads.log_scales, grads.opacity_logits.reshape(ins[3].shape), grads.colors

    return make(out.image, ins, back, "rasterize"), out
