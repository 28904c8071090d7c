"""Closed-form geometry: SH colour, positional encoding, rotations,
covariances and the local-affine (EWA) projection to screen space.

Batched functions operate on leading axis N and come with explicit
backward helpers used by the rasterizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigurationError, Tensor, _tensor, concat, cos, make, mul, sin

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

Z_NEAR = 0.1
COV2D_DILATION = 0.3


class DegenerateRotationError(ValueError):
    pass


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis (3DGS sign convention) at unit directions, shape (..., (L+1)^2)."""
    if degree not in (0, 1, 2, 3):
        raise ConfigurationError(f"unsupported SH degree {degree}")
    dirs = np.asarray(dirs)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def _degree_of(k: int) -> int:
    degree = int(round(np.sqrt(k))) - 1
    if degree not in (0, 1, 2, 3) or n_coeffs(degree) != k:
        raise ConfigurationError(f"{k} coefficients per channel is not a supported SH layout")
    return degree


def sh_eval(coeffs, d, offset: bool = True) -> np.ndarray:
    """RGB from per-channel SH coefficients ``(3, (L+1)^2)`` in direction ``d``.

    With ``offset`` the 3DGS colour convention ``max(result + 0.5, 0)`` applies.
    """
    coeffs = np.asarray(coeffs)
    coeffs = coeffs.reshape(3, -1)
    degree = _degree_of(coeffs.shape[1])
    d = np.asarray(d, dtype=coeffs.dtype)
    if abs(np.linalg.norm(d) - 1.0) > 1e-4:
        raise ValueError("view direction must be unit length")
    rgb = coeffs @ sh_basis(d, degree)
    return np.maximum(rgb + 0.5, 0.0) if offset else rgb


def view_dirs(means: np.ndarray, cam_center: np.ndarray) -> np.ndarray:
    d = means - cam_center
    return d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)


def sh_colors(sh, dirs: np.ndarray, degree: int | None = None) -> Tensor:
    """Per-Gaussian colours from an (N, 3, K) coefficient tensor.

    Only the first ``degree`` bands are evaluated; directions are treated as
    constants.
    """
    sh = _tensor(sh)
    n, _, k = sh.shape
    full = _degree_of(k)
    degree = full if degree is None else min(degree, full)
    kk = n_coeffs(degree)
    basis = sh_basis(dirs, degree).astype(sh.dtype)  # (N, kk)
    pre = np.einsum("nck,nk->nc", sh.data[:, :, :kk], basis) + 0.5
    keep = ~(pre <= 0)  # NaN passes through so divergence stays visible

    def back(g):
        gs = np.zeros_like(sh.data)
        gs[:, :, :kk] = (g * keep)[:, :, None] * basis[:, None, :]
        return (gs,)

    return make(np.where(keep, pre, 0.0).astype(sh.dtype), (sh,), back, "sh_colors")


def positional_encoding(x, n_freq: int) -> Tensor:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(F-1) pi x), cos(2^(F-1) pi x)]`` on the last axis."""
    if n_freq < 0:
        raise ConfigurationError("n_freq must be >= 0")
    x = _tensor(x)
    parts = [x]
    for i in range(n_freq):
        s = mul(x, float(2.0 ** i * np.pi))
        parts += [sin(s), cos(s)]
    return concat(parts, axis=-1) if n_freq else x


# ---------------------------------------------------------------- rotations / covariances


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (N, 4) quaternions ``(w, x, y, z)``; normalised internally."""
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateRotationError("quaternion norm below 1e-12")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def quat_to_rot(q) -> np.ndarray:
    return quat_to_rotmat(np.asarray(q, dtype=np.float64)[None])[0]


def quat_backward(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = d_rot
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
        - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    dy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
        + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    dz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
        - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    dqn = np.stack([dw, dx, dy, dz], -1)
    return (dqn - qn * np.sum(qn * dqn, -1, keepdims=True)) / norm


def covariances(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Batched ``R S S^T R^T`` for (N, 4) quaternions and (N, 3) positive scales."""
    m = quat_to_rotmat(quats) * scales[:, None, :]
    return m @ np.swapaxes(m, 1, 2)


def build_cov3d(q, s) -> np.ndarray:
    return covariances(np.asarray(q, dtype=np.float64)[None], np.asarray(s, dtype=np.float64)[None])[0]


def covariances_backward(quats, scales, d_cov):
    """Gradients of the covariances w.r.t. quaternions and (linear) scales."""
    rot = quat_to_rotmat(quats)
    m = rot * scales[:, None, :]
    d_m = (d_cov + np.swapaxes(d_cov, 1, 2)) @ m
    d_rot = d_m * scales[:, None, :]
    d_scales = np.sum(d_m * rot, axis=1)
    return quat_backward(quats, d_rot), d_scales


# ---------------------------------------------------------------- camera and projection


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)
        if self.world_to_cam.shape != (4, 4):
            raise ValueError("world_to_cam must be 4x4")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = self.world_to_cam[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5) or np.linalg.det(r) < 0:
            raise ValueError("world_to_cam rotation block is not a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` looking at ``target``; +z forward, +y down in the image."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        cx = (width - 1) / 2 if cx is None else cx
        cy = (height - 1) / 2 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, w2c)


@dataclass
class SplatProjection:
    mu2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    valid: bool


@dataclass
class Projected:
    """Batched projection results for N Gaussians."""

    t_cam: np.ndarray  # (N, 3) camera-space centres
    mu2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), dilated
    jac: np.ndarray  # (N, 2, 3)
    depth: np.ndarray
    valid: np.ndarray


def projection_jacobian(t_cam: np.ndarray, cam: Camera) -> np.ndarray:
    x, y, z = t_cam[..., 0], t_cam[..., 1], t_cam[..., 2]
    zero = np.zeros_like(z)
    return np.stack(
        [
            np.stack([cam.fx / z, zero, -cam.fx * x / (z * z)], -1),
            np.stack([zero, cam.fy / z, -cam.fy * y / (z * z)], -1),
        ],
        -2,
    )


def project(means: np.ndarray, cov3d: np.ndarray, cam: Camera, dilation: float = COV2D_DILATION) -> Projected:
    rot = cam.rotation.astype(means.dtype)
    t_cam = means @ rot.T + cam.translation.astype(means.dtype)
    z = t_cam[:, 2]
    valid = z > Z_NEAR
    zs = np.where(valid, z, 1.0)  # keeps culled rows finite
    safe = t_cam.copy()
    safe[:, 2] = zs
    mu2d = np.stack([cam.fx * safe[:, 0] / zs + cam.cx, cam.fy * safe[:, 1] / zs + cam.cy], -1)
    jac = projection_jacobian(safe, cam)
    tm = jac @ rot
    cov2d = tm @ cov3d @ np.swapaxes(tm, 1, 2)
    cov2d = cov2d + dilation * np.eye(2, dtype=means.dtype)
    return Projected(t_cam, mu2d.astype(means.dtype), cov2d.astype(means.dtype), jac, z, valid)


def project_backward(proj: Projected, cov3d: np.ndarray, cam: Camera, d_mu2d: np.ndarray, d_cov2d: np.ndarray):
    """Gradients w.r.t. world means and 3D covariances; culled rows get zero."""
    rot = cam.rotation.astype(cov3d.dtype)
    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], np.where(proj.valid, proj.t_cam[:, 2], 1.0)
    tm = proj.jac @ rot
    d_cov3d = np.swapaxes(tm, 1, 2) @ d_cov2d @ tm
    d_tm = (d_cov2d + np.swapaxes(d_cov2d, 1, 2)) @ tm @ cov3d
    d_jac = d_tm @ rot.T
    fx, fy = cam.fx, cam.fy
    z2, z3 = z * z, z * z * z
    dx = d_mu2d[:, 0] * fx / z - d_jac[:, 0, 2] * fx / z2
    dy = d_mu2d[:, 1] * fy / z - d_jac[:, 1, 2] * fy / z2
    dz = (
        -d_mu2d[:, 0] * fx * x / z2
        - d_mu2d[:, 1] * fy * y / z2
        - d_jac[:, 0, 0] * fx / z2
        + d_jac[:, 0, 2] * 2 * fx * x / z3
        - d_jac[:, 1, 1] * fy / z2
        + d_jac[:, 1, 2] * 2 * fy * y / z3
    )
    d_t = np.stack([dx, dy, dz], -1) * proj.valid[:, None]
    d_cov3d = d_cov3d * proj.valid[:, None, None]
    return d_t @ rot, d_cov3d


def project_gaussian(mu, cov3d, cam: Camera, dilation: float = COV2D_DILATION) -> SplatProjection:
    p = project(np.asarray(mu, dtype=np.float64)[None], np.asarray(cov3d, dtype=np.float64)[None], cam, dilation)
    return SplatProjection(p.mu2d[0], p.cov2d[0], float(p.depth[0]), bool(p.valid[0]))
