"""Gaussian scene container, point ingestion, PLY I/O and density control."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import SH_C0, n_coeffs, quat_to_rotmat


class EmptyInputError(ValueError):
    pass


class PlyFormatError(ValueError):
    pass


class UnsupportedEncodingError(PlyFormatError):
    pass


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass
class SparsePointSet:
    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors differ in length")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError("colors must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.points)


def read_points_txt(text: str) -> SparsePointSet:
    """Parse ``x y z r g b`` lines (colours in [0, 1]); ``#`` starts a comment."""
    rows = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([float(v) for v in line.split()[:6]])
    arr = np.array(rows, dtype=np.float64).reshape(-1, 6)
    return SparsePointSet(arr[:, :3], arr[:, 3:])


def write_points_txt(pts: SparsePointSet) -> str:
    lines = [" ".join(f"{v:.9g}" for v in (*p, *c)) for p, c in zip(pts.points, pts.colors)]
    return "\n".join(lines) + "\n"


def read_colmap_points3d(text: str) -> SparsePointSet:
    """COLMAP ``points3D.txt``: POINT3D_ID X Y Z R G B ERROR TRACK[]; the track is ignored."""
    pts, cols = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        f = line.split()
        pts.append([float(v) for v in f[1:4]])
        cols.append([int(v) / 255.0 for v in f[4:7]])
    return SparsePointSet(np.array(pts).reshape(-1, 3), np.array(cols).reshape(-1, 3))


@dataclass
class GaussianCloud:
    means: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4) as (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N, 1)
    sh: np.ndarray  # (N, 3, (L+1)^2)
    degree: int
    grad_accum: np.ndarray = field(default=None)  # accumulated 2D position-gradient norms
    grad_count: np.ndarray = field(default=None)  # observations
    origin: np.ndarray = field(default=None)  # index of the initial point each Gaussian descends from

    def __post_init__(self):
        n = len(self.means)
        f32 = np.float32
        self.means = np.asarray(self.means, dtype=f32).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=f32).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=f32).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=f32).reshape(n, 1)
        if self.degree not in (0, 1, 2, 3):
            raise ValueError(f"unsupported SH degree {self.degree}")
        self.sh = np.asarray(self.sh, dtype=f32).reshape(n, 3, n_coeffs(self.degree))
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n, dtype=np.float32)
        if self.grad_count is None:
            self.grad_count = np.zeros(n, dtype=np.int64)
        if self.origin is None:
            self.origin = np.arange(n)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits[:, 0])

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    def copy(self) -> "GaussianCloud":
        return replace(
            self,
            **{k: getattr(self, k).copy() for k in ("means", "quats", "log_scales", "opacity_logits", "sh", "grad_accum", "grad_count", "origin")},
        )

    def take(self, idx: np.ndarray) -> "GaussianCloud":
        return GaussianCloud(
            self.means[idx], self.quats[idx], self.log_scales[idx], self.opacity_logits[idx], self.sh[idx],
            self.degree, self.grad_accum[idx], self.grad_count[idx], self.origin[idx],
        )

    def check(self) -> None:
        arrays = (self.means, self.quats, self.log_scales, self.opacity_logits, self.sh)
        assert all(len(a) == len(self) for a in arrays)
        assert all(np.all(np.isfinite(a)) for a in arrays)
        a = self.opacities
        assert np.all((a > 0) & (a < 1))


def empty_cloud(degree: int = 3) -> GaussianCloud:
    k = n_coeffs(degree)
    return GaussianCloud(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros((0, 1)), np.zeros((0, 3, k)), degree)


def knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean distance to the ``k`` nearest other points (brute force)."""
    m = len(points)
    if m < 2:
        return np.full(m, 0.01)
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    k = min(k, m - 1)
    nearest = np.sort(d2, axis=1)[:, :k]
    return np.sqrt(nearest).mean(axis=1)


def init_from_points(pts: SparsePointSet, degree: int = 3, init_opacity: float = 0.1) -> GaussianCloud:
    m = len(pts)
    if m == 0:
        raise EmptyInputError("cannot initialise a cloud from zero points")
    sh = np.zeros((m, 3, n_coeffs(degree)))
    sh[:, :, 0] = (pts.colors - 0.5) / SH_C0
    dist = np.clip(knn_mean_distance(pts.points), 1e-7, None)
    quats = np.zeros((m, 4))
    quats[:, 0] = 1.0
    return GaussianCloud(
        pts.points,
        quats,
        np.repeat(np.log(dist)[:, None], 3, axis=1),
        np.full((m, 1), logit(init_opacity)),
        sh,
        degree,
    )


# ---------------------------------------------------------------- PLY


def ply_properties(degree: int) -> list[str]:
    n_rest = 3 * (n_coeffs(degree) - 1)
    return (
        ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        + [f"f_rest_{i}" for i in range(n_rest)]
        + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    )


def write_ply(cloud: GaussianCloud) -> bytes:
    n = len(cloud)
    props = ply_properties(cloud.degree)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in props]
    header += ["end_header"]
    rest = cloud.sh[:, :, 1:].reshape(n, 3 * (cloud.sh.shape[2] - 1))
    table = np.concatenate(
        [cloud.means, np.zeros((n, 3), np.float32), cloud.sh[:, :, 0], rest,
         cloud.opacity_logits, cloud.log_scales, cloud.quats],
        axis=1,
    ).astype("<f4")
    return ("\n".join(header) + "\n").encode("ascii") + table.tobytes()


def read_ply(buf: bytes) -> GaussianCloud:
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply") or end < 0:
        raise PlyFormatError("missing PLY header")
    lines = buf[:end].decode("ascii").splitlines()
    body = buf[end + len(b"end_header\n"):]
    n = None
    props: list[str] = []
    for line in lines[1:]:
        f = line.split()
        if not f or f[0] == "comment":
            continue
        if f[0] == "format":
            if f[1] != "binary_little_endian":
                raise UnsupportedEncodingError(f"unsupported PLY encoding {f[1]!r}")
        elif f[0] == "element":
            if f[1] != "vertex":
                raise PlyFormatError(f"unexpected element {f[1]!r}")
            n = int(f[2])
        elif f[0] == "property":
            if f[1] != "float":
                raise PlyFormatError(f"property {f[-1]!r} has unsupported type {f[1]!r}")
            props.append(f[2])
    if n is None:
        raise PlyFormatError("no vertex element")
    n_rest = sum(p.startswith("f_rest_") for p in props)
    degree = int(round(np.sqrt(n_rest / 3 + 1))) - 1
    if degree not in (0, 1, 2, 3) or 3 * (n_coeffs(degree) - 1) != n_rest:
        raise PlyFormatError(f"{n_rest} f_rest properties do not form a valid SH layout")
    expected = ply_properties(degree)
    for p in props:
        if p not in expected:
            raise PlyFormatError(f"unknown property {p!r}")
    for p in expected:
        if p not in props:
            raise PlyFormatError(f"missing property {p!r}")
    width = len(props)
    if len(body) < 4 * width * n:
        raise PlyFormatError("vertex data truncated")
    table = np.frombuffer(body, dtype="<f4", count=width * n).reshape(n, width)
    col = {p: i for i, p in enumerate(props)}

    def cols(names):
        return table[:, [col[p] for p in names]].astype(np.float32)

    k = n_coeffs(degree)
    sh = np.zeros((n, 3, k), np.float32)
    sh[:, :, 0] = cols(["f_dc_0", "f_dc_1", "f_dc_2"])
    if k > 1:
        sh[:, :, 1:] = cols([f"f_rest_{i}" for i in range(n_rest)]).reshape(n, 3, k - 1)
    return GaussianCloud(
        cols(["x", "y", "z"]),
        cols(["rot_0", "rot_1", "rot_2", "rot_3"]),
        cols(["scale_0", "scale_1", "scale_2"]),
        cols(["opacity"]),
        sh,
        degree,
    )


# ---------------------------------------------------------------- density control


@dataclass
class DensifyMap:
    """``source[i]`` is the pre-densification index new Gaussian ``i`` came from;
    ``fresh[i]`` marks Gaussians created by cloning or splitting."""

    source: np.ndarray
    fresh: np.ndarray


def densify_and_prune(
    cloud: GaussianCloud,
    grad_threshold: float = 2e-4,
    scale_threshold: float = 0.01,
    min_opacity: float = 0.005,
    scene_extent: float = 1.0,
    rng: np.random.Generator | None = None,
    with_map: bool = False,
):
    """Clone small / split large high-gradient Gaussians, then prune transparent ones."""
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(cloud)
    mean_grad = np.where(cloud.grad_count > 0, cloud.grad_accum / np.maximum(cloud.grad_count, 1), 0.0)
    hot = mean_grad > grad_threshold
    max_scale = cloud.scales.max(axis=1) if n else np.zeros(0)
    small = max_scale <= scale_threshold * scene_extent
    clone = np.flatnonzero(hot & small)
    split = np.flatnonzero(hot & ~small)

    keep = np.setdiff1d(np.arange(n), split)
    parts = [cloud.take(keep), cloud.take(clone)]
    source = [keep, clone]
    fresh = [np.zeros(len(keep), bool), np.ones(len(clone), bool)]
    if len(split):
        children = cloud.take(np.repeat(split, 2))
        s = np.exp(children.log_scales.astype(np.float64))
        local = rng.normal(size=s.shape) * s
        rot = quat_to_rotmat(children.quats.astype(np.float64))
        children.means = (children.means + np.einsum("nij,nj->ni", rot, local)).astype(np.float32)
        children.log_scales = (children.log_scales - np.log(1.6)).astype(np.float32)
        parts.append(children)
        source.append(np.repeat(split, 2))
        fresh.append(np.ones(2 * len(split), bool))
    merged = _concat(parts, cloud.degree)
    source = np.concatenate(source)
    fresh = np.concatenate(fresh)

    alive = merged.opacities >= min_opacity
    merged = merged.take(np.flatnonzero(alive))
    source, fresh = source[alive], fresh[alive]
    merged.grad_accum = np.zeros(len(merged), dtype=np.float32)
    merged.grad_count = np.zeros(len(merged), dtype=np.int64)
    if with_map:
        return merged, DensifyMap(source, fresh)
    return merged


def _concat(parts: list[GaussianCloud], degree: int) -> GaussianCloud:
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return GaussianCloud(
        cat("means"), cat("quats"), cat("log_scales"), cat("opacity_logits"), cat("sh"), degree,
        cat("grad_accum"), cat("grad_count"), cat("origin"),
    )


def reset_opacity(cloud: GaussianCloud, ceiling: float = 0.01) -> GaussianCloud:
    out = cloud.copy()
    out.opacity_logits = np.minimum(out.opacity_logits, np.float32(logit(ceiling)))
    return out
