"""Synthetic in-the-wild scenes, dataset directories, evaluation and
appearance manipulation on top of a trained state."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cloud import GaussianCloud, SparsePointSet, logit, read_points_txt, write_points_txt
from .encoder import WildImage, encode
from .geometry import Camera, n_coeffs, sh_colors, view_dirs
from .losses import ssim
from .rasterizer import render_tiled
from .tensor import DimensionError, Tensor
from .trainer import TrainConfig, TrainState
from .transfer import bake

PSNR_CAP = 99.0


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_gaussians: int = 100
    n_cameras: int = 16
    n_test_cameras: int = 4
    width: int = 64
    height: int = 64
    focal: float = 60.0
    ring_radius: float = 3.5
    ring_height: float = 0.8
    n_appearances: int = 8
    occluded_fraction: float = 0.5
    occluders_per_image: tuple[int, int] = (1, 2)
    occluder_size: tuple[int, int] = (10, 22)
    noise_fraction: float = 0.1
    noise_depth: tuple[float, float] = (1.2, 2.0)
    identity_appearance: bool = False
    sh_degree: int = 3
    # explicit (3, 4) [gain | bias] transforms; overrides the random ones when set
    appearance_transforms: tuple | None = None


@dataclass
class Dataset:
    images: list[WildImage]
    points: SparsePointSet
    n_train: int
    gt_masks: dict[int, np.ndarray] = field(default_factory=dict)  # True on occluder pixels
    gt_appearance: dict[int, np.ndarray] = field(default_factory=dict)  # (3, 4) = [gain | bias]
    appearance_index: dict[int, int] = field(default_factory=dict)
    noise_start: int | None = None  # points from this index on are injected occluder noise
    base_cloud: GaussianCloud | None = None

    @property
    def train(self) -> list[WildImage]:
        return self.images[: self.n_train]

    @property
    def test(self) -> list[WildImage]:
        return self.images[self.n_train:]


# ---------------------------------------------------------------- synthesis


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def base_scene(rng: np.random.Generator, spec: SyntheticSceneSpec) -> GaussianCloud:
    n = spec.n_gaussians
    d = rng.normal(size=(n, 3))
    means = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(0, 1, (n, 1)) ** (1 / 3)
    k = n_coeffs(spec.sh_degree)
    sh = np.zeros((n, 3, k))
    sh[:, :, 0] = (rng.uniform(0.15, 0.85, (n, 3)) - 0.5) / 0.28209479177387814
    sh[:, :, 1:] = rng.normal(0, 0.03, (n, 3, k - 1))
    return GaussianCloud(
        means,
        _random_quats(rng, n),
        np.log(rng.uniform(0.08, 0.2, (n, 3))),
        logit(rng.uniform(0.6, 0.95, (n, 1))),
        sh,
        spec.sh_degree,
    )


def ring_camera(spec: SyntheticSceneSpec, angle: float) -> Camera:
    eye = [spec.ring_radius * np.cos(angle), spec.ring_radius * np.sin(angle), spec.ring_height]
    return Camera.look_at(eye, [0, 0, 0], [0, 0, 1], spec.focal, spec.focal, spec.width, spec.height)


def cloud_colors(cloud: GaussianCloud, cam: Camera, degree: int | None = None) -> np.ndarray:
    degree = cloud.degree if degree is None else degree
    return sh_colors(Tensor(cloud.sh), view_dirs(cloud.means, cam.center), degree).data


def render_cloud(cloud: GaussianCloud, cam: Camera, degree: int | None = None) -> np.ndarray:
    """(H, W, 3) render of a plain cloud."""
    return render_tiled(cloud, cam, cloud_colors(cloud, cam, degree)).image


def random_appearance(rng: np.random.Generator) -> np.ndarray:
    gain = np.diag(rng.uniform(0.6, 1.4, 3)) + rng.normal(0, 0.05, (3, 3)) * (1 - np.eye(3))
    bias = rng.uniform(-0.04, 0.04, 3)
    return np.concatenate([gain, bias[:, None]], axis=1)


def apply_appearance(img: np.ndarray, transform: np.ndarray) -> np.ndarray:
    return np.clip(img @ transform[:, :3].T + transform[:, 3], 0, 1)


def unproject(cam: Camera, u: float, v: float, depth: float) -> np.ndarray:
    t = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.rotation.T @ (t - cam.translation)


def quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def synth(spec: SyntheticSceneSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    cloud = base_scene(rng, spec)
    cams = [ring_camera(spec, 2 * np.pi * i / spec.n_cameras) for i in range(spec.n_cameras)]
    cams += [ring_camera(spec, 2 * np.pi * (j + 0.5) / spec.n_test_cameras) for j in range(spec.n_test_cameras)]
    if spec.n_test_cameras and spec.n_cameras % spec.n_test_cameras == 0:
        # keep held-out views between training views
        step = 2 * np.pi / spec.n_cameras
        cams[spec.n_cameras:] = [
            ring_camera(spec, 2 * np.pi * j / spec.n_test_cameras + step / 2) for j in range(spec.n_test_cameras)
        ]
    transforms = [np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)]
    for _ in range(spec.n_appearances - 1):
        transforms.append(transforms[0].copy() if spec.identity_appearance else random_appearance(rng))
    if spec.appearance_transforms is not None:
        transforms = [np.asarray(t, np.float64).reshape(3, 4) for t in spec.appearance_transforms]

    n_occ = int(round(spec.occluded_fraction * spec.n_cameras))
    occluded = set(int(i) for i in rng.permutation(spec.n_cameras)[:n_occ])
    n_noise = int(round(spec.noise_fraction * spec.n_gaussians)) if occluded else 0

    images, masks, app, app_idx, rects = [], {}, {}, {}, {}
    for i, cam in enumerate(cams):
        a = i % len(transforms)
        img = apply_appearance(render_cloud(cloud, cam), transforms[a])
        mask = np.zeros((spec.height, spec.width), bool)
        if i in occluded:
            rects[i] = []
            for _ in range(rng.integers(spec.occluders_per_image[0], spec.occluders_per_image[1] + 1)):
                rh, rw = rng.integers(spec.occluder_size[0], spec.occluder_size[1] + 1, 2)
                y0 = int(rng.integers(0, spec.height - rh + 1))
                x0 = int(rng.integers(0, spec.width - rw + 1))
                color = rng.uniform(0, 1, 3)
                img[y0:y0 + rh, x0:x0 + rw] = color
                mask[y0:y0 + rh, x0:x0 + rw] = True
                rects[i].append((x0, y0, int(rw), int(rh), color))
        images.append(WildImage(i, quantize(img).transpose(2, 0, 1), cam))
        masks[i], app[i], app_idx[i] = mask, transforms[a], a

    points = [cloud.means.astype(np.float64)]
    colors = [np.clip(cloud.sh[:, :, 0] * 0.28209479177387814 + 0.5, 0, 1)]
    order = sorted(occluded)
    for j in range(n_noise):
        i = order[j % len(order)]
        x0, y0, rw, rh, color = rects[i][int(rng.integers(len(rects[i])))]
        u, v = rng.uniform(x0, x0 + rw - 1), rng.uniform(y0, y0 + rh - 1)
        points.append(unproject(cams[i], u, v, rng.uniform(*spec.noise_depth))[None])
        colors.append(color[None])
    pts = SparsePointSet(np.concatenate(points), np.concatenate(colors))
    return Dataset(images, pts, spec.n_cameras, masks, app, app_idx, spec.n_gaussians, cloud)


# ---------------------------------------------------------------- dataset directories


def _png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Float image in [0, 1], (H, W, 3) or (H, W), as 8-bit PNG."""
    Path(path).write_bytes(_png_bytes(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)))


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float32) / 255.0


def format_cameras(images: list[WildImage]) -> str:
    lines = []
    for img in images:
        c = img.camera
        vals = [c.fx, c.fy, c.cx, c.cy] + list(c.world_to_cam[:3].ravel())
        lines.append(f"{img.id} " + " ".join(f"{v:.17g}" for v in vals[:4]) + f" {c.width} {c.height} "
                     + " ".join(f"{v:.17g}" for v in vals[4:]))
    return "\n".join(lines) + "\n"


def parse_cameras(text: str) -> dict[int, Camera]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        f = line.split("#", 1)[0].split()
        if not f:
            continue
        if len(f) != 19:
            raise DatasetError(f"cameras line {n}: expected 19 fields, got {len(f)}")
        w2c = np.eye(4)
        w2c[:3] = np.array([float(v) for v in f[7:]]).reshape(3, 4)
        fx, fy, cx, cy = (float(v) for v in f[1:5])
        out[int(f[0])] = Camera(fx, fy, cx, cy, int(f[5]), int(f[6]), w2c)
    return out


def write_dataset(ds: Dataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt_masks").mkdir(exist_ok=True)
    for img in ds.images:
        write_png(root / "images" / f"{img.id:04d}.png", img.pixels.transpose(1, 2, 0))
        if img.id in ds.gt_masks:
            write_png(root / "gt_masks" / f"{img.id:04d}.png", ds.gt_masks[img.id].astype(np.float32))
    (root / "cameras.txt").write_text(format_cameras(ds.images))
    (root / "points.txt").write_text(write_points_txt(ds.points))
    lines = [f"{i} {ds.appearance_index.get(i, 0)} " + " ".join(f"{v:.17g}" for v in t.ravel())
             for i, t in sorted(ds.gt_appearance.items())]
    (root / "gt_appearance.txt").write_text("\n".join(lines) + "\n")
    meta = f"n_train = {ds.n_train}\n"
    if ds.noise_start is not None:
        meta += f"noise_start = {ds.noise_start}\n"
    (root / "split.txt").write_text(meta)
    return root


def read_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    if not (root / "cameras.txt").exists():
        raise DatasetError(f"{root} has no cameras.txt")
    cams = parse_cameras((root / "cameras.txt").read_text())
    images = []
    for i, cam in sorted(cams.items()):
        path = root / "images" / f"{i:04d}.png"
        if not path.exists():
            raise DatasetError(f"missing image {path}")
        px = read_png(path)[..., :3]
        if px.shape[:2] != (cam.height, cam.width):
            raise DatasetError(f"{path}: size {px.shape[:2]} does not match its camera")
        images.append(WildImage(i, px.transpose(2, 0, 1), cam))
    masks = {}
    for path in sorted((root / "gt_masks").glob("*.png")) if (root / "gt_masks").exists() else []:
        masks[int(path.stem)] = read_png(path) > 0.5
    app, app_idx = {}, {}
    if (root / "gt_appearance.txt").exists():
        for line in (root / "gt_appearance.txt").read_text().splitlines():
            f = line.split()
            if f:
                app[int(f[0])] = np.array([float(v) for v in f[2:]]).reshape(3, 4)
                app_idx[int(f[0])] = int(f[1])
    meta = {}
    if (root / "split.txt").exists():
        for line in (root / "split.txt").read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = int(v)
    points = read_points_txt((root / "points.txt").read_text())
    return Dataset(images, points, meta.get("n_train", len(images)), masks, app, app_idx, meta.get("noise_start"))


# ---------------------------------------------------------------- desk-scale training


DESK_OVERRIDES = dict(
    total_steps=5000,
    # per-Gaussian NDC gradients at 64x64 sit near 2e-3, so the default threshold doubles N every interval
    grad_threshold=5e-3,
    # resets at 1000 and 2000, then one full interval of pruning
    densify_until=3000,
    opacity_reset_every=1000,
    # with only a few splats per pixel the default weights pin the mask near 0 and the residual at 0
    w_regM=3e-5,
    mask_reg_reduction="sum",
    w_regSH=1e-3,
)


def desk_config(**overrides) -> TrainConfig:
    """Training configuration for the 64x64 synthetic scenes."""
    return TrainConfig(**{**DESK_OVERRIDES, **overrides})


# ---------------------------------------------------------------- metrics


def psnr(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    return PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def masked_psnr(a, b, static: np.ndarray) -> float:
    """PSNR over pixels where ``static`` is True."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if not static.any():
        return PSNR_CAP
    mse = float(np.mean((a[static] - b[static]) ** 2))
    return PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def separation_score(masks: list[np.ndarray], occluders: list[np.ndarray]) -> float:
    """mean(1 - M) on occluder pixels minus mean(1 - M) on static pixels, pooled over images."""
    m = np.concatenate([np.asarray(x, np.float64).ravel() for x in masks])
    o = np.concatenate([np.asarray(x, bool).ravel() for x in occluders])
    if not o.any() or o.all():
        return 0.0
    return float(np.mean(1 - m[o]) - np.mean(1 - m[~o]))


# ---------------------------------------------------------------- model access


def embedding_for(state: TrainState, img: WildImage, style_mode: bool = False) -> np.ndarray | None:
    if state.encoder is None:
        return None
    return encode(img, state.encoder, style_mode=style_mode).embedding.data.copy()


def predicted_mask(state: TrainState, img: WildImage) -> np.ndarray:
    """(H, W) static-content mask; all ones for a baseline model."""
    if state.encoder is None:
        return np.ones(img.hw, np.float32)
    return encode(img, state.encoder).resized_mask.data[0]


def baked_cloud(state: TrainState, embedding) -> GaussianCloud:
    if state.transfer is None or embedding is None:
        return state.cloud.copy()
    return bake(state.cloud, embedding, state.transfer)


def render_with(state: TrainState, embedding, cam: Camera) -> np.ndarray:
    return render_cloud(baked_cloud(state, embedding), cam, state.active_degree)


def render_image(state: TrainState, img: WildImage, cam: Camera | None = None) -> np.ndarray:
    return render_with(state, embedding_for(state, img), cam or img.camera)


def interpolate_appearance(la, lb, t: float) -> np.ndarray:
    la, lb = np.asarray(la, np.float32), np.asarray(lb, np.float32)
    if la.shape != lb.shape:
        raise DimensionError(f"embeddings of shape {la.shape} and {lb.shape}")
    if t == 0:
        return la.copy()
    if t == 1:
        return lb.copy()
    return ((1 - t) * la + t * lb).astype(np.float32)


def interpolation_frames(state: TrainState, la, lb, cam: Camera, n_frames: int) -> list[np.ndarray]:
    ts = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.zeros(1)
    return [render_with(state, interpolate_appearance(la, lb, float(t)), cam) for t in ts]


def style_transfer(style_image: WildImage | np.ndarray, state: TrainState, cam: Camera) -> np.ndarray:
    """Render ``cam`` under the appearance of ``style_image`` with the transient mask zeroed."""
    if not isinstance(style_image, WildImage):
        style_image = WildImage(-1, style_image)
    return render_with(state, embedding_for(state, style_image, style_mode=True), cam)


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    rows: list[dict]
    separation: float

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r["psnr"] for r in self.rows])) if self.rows else 0.0

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.rows])) if self.rows else 0.0

    def to_csv(self) -> str:
        lines = ["image,split,psnr,ssim"]
        lines += [f"{r['image']},{r['split']},{r['psnr']:.6f},{r['ssim']:.6f}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return f"mean_psnr={self.mean_psnr:.4f} mean_ssim={self.mean_ssim:.4f} separation={self.separation:.4f}"


def evaluate(state: TrainState, ds: Dataset, split: str = "test") -> EvalReport:
    """Masked PSNR / SSIM per image of ``split`` and the mask separation score on training images."""
    chosen = {"test": ds.test, "train": ds.train, "all": ds.images}[split]
    rows = []
    for img in chosen:
        gt = img.pixels.transpose(1, 2, 0)
        static = ~ds.gt_masks.get(img.id, np.zeros(img.hw, bool))
        out = render_image(state, img)
        keep = static[..., None].astype(np.float32)
        rows.append({
            "image": img.id,
            "split": "train" if img.id < ds.n_train else "test",
            "psnr": masked_psnr(out, gt, static),
            "ssim": float(ssim(out * keep, gt * keep).data),
        })
    masks, occ = [], []
    for img in ds.train:
        if img.id in ds.gt_masks and ds.gt_masks[img.id].any():
            masks.append(predicted_mask(state, img))
            occ.append(ds.gt_masks[img.id])
    sep = separation_score(masks, occ) if masks else 0.0
    return EvalReport(rows, sep)


def noise_retention(state: TrainState, noise_start: int, n_points: int) -> float:
    """Surviving descendants of injected noise points over the number injected."""
    n_noise = n_points - noise_start
    if n_noise <= 0:
        return 0.0
    return float(np.sum(state.cloud.origin >= noise_start)) / n_noise
