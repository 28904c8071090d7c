"""Differentiable Gaussian splatting with residual SH appearance transfer and
a joint appearance-encoder / transient-mask predictor, on plain numpy."""

from .cloud import GaussianCloud, SparsePointSet, init_from_points, read_ply, write_ply
from .geometry import Camera, sh_eval
from .rasterizer import render_naive, render_tiled
from .tensor import Param, Tape, Tensor
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Camera",
    "GaussianCloud",
    "Param",
    "SparsePointSet",
    "Tape",
    "Tensor",
    "TrainConfig",
    "init_from_points",
    "load_checkpoint",
    "read_ply",
    "render_naive",
    "render_tiled",
    "save_checkpoint",
    "sh_eval",
    "train",
    "write_ply",
]
