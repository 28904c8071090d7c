"""Command-line entry point: ``wegs <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .cloud import PlyFormatError, write_ply
from .harness import (
    DatasetError,
    SyntheticSceneSpec,
    baked_cloud,
    embedding_for,
    evaluate,
    interpolation_frames,
    parse_cameras,
    predicted_mask,
    read_dataset,
    render_with,
    synth,
    write_dataset,
    write_png,
)
from .optim import FormatError
from .tensor import ConfigurationError, DimensionError
from .trainer import load_checkpoint, parse_config, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _pair(text: str) -> tuple[int, int]:
    a, b = text.split(",")
    return int(a), int(b)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wegs", description="Gaussian splatting for in-the-wild photo collections.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-gaussians", type=int, default=100)
    s.add_argument("--n-cameras", type=int, default=16)
    s.add_argument("--n-test-cameras", type=int, default=4)
    s.add_argument("--size", type=int, default=64, help="image width and height")
    s.add_argument("--focal", type=float, help="focal length in pixels (default scales with --size)")
    s.add_argument("--n-appearances", type=int, default=8)
    s.add_argument("--occluded-fraction", type=float, default=0.5)
    s.add_argument("--occluder-size", type=_pair, default=(10, 22), metavar="MIN,MAX")

    s = sub.add_parser("train", help="train on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--config", help="key = value configuration file")
    s.add_argument("--steps", type=int)
    s.add_argument("--mode", choices=("wegs", "vanilla"))
    s.add_argument("--seed", type=int)

    def add_embedding_source(s):
        g = s.add_mutually_exclusive_group(required=True)
        g.add_argument("--image-id", type=int, help="use the stored embedding of this training image")
        g.add_argument("--embedding", help="text file of whitespace-separated floats")

    s = sub.add_parser("render", help="render one view to PNG")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cameras", required=True, help="cameras.txt")
    s.add_argument("--camera-id", type=int, required=True)
    add_embedding_source(s)
    s.add_argument("--out", required=True)

    s = sub.add_parser("bake", help="fold one appearance into a plain PLY cloud")
    s.add_argument("--checkpoint", required=True)
    add_embedding_source(s)
    s.add_argument("--out", required=True)

    s = sub.add_parser("interp", help="render an appearance interpolation sequence")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--camera-id", type=int, required=True)
    s.add_argument("--from-id", type=int, required=True)
    s.add_argument("--to-id", type=int, required=True)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("test", "train", "all"), default="test")
    s.add_argument("--out", required=True, help="CSV report path")

    s = sub.add_parser("mask-dump", help="write predicted static masks as PNGs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    return p


def _embedding(state, args) -> np.ndarray | None:
    if args.embedding:
        emb = np.array(Path(args.embedding).read_text().split(), dtype=np.float32)
        if state.transfer is not None and emb.shape != (state.config.embed_dim,):
            raise DimensionError(f"embedding file has {emb.size} values, expected {state.config.embed_dim}")
        return emb
    if state.transfer is None:
        return None
    if args.image_id not in state.embeddings:
        raise DatasetError(f"checkpoint has no embedding for image {args.image_id}")
    return state.embeddings[args.image_id]


def _camera(args):
    cams = parse_cameras(Path(args.cameras).read_text())
    if args.camera_id not in cams:
        raise DatasetError(f"camera {args.camera_id} not in {args.cameras}")
    return cams[args.camera_id]


def run(args) -> None:
    cmd = args.command
    if cmd == "synth":
        spec = SyntheticSceneSpec(
            seed=args.seed, n_gaussians=args.n_gaussians, n_cameras=args.n_cameras,
            n_test_cameras=args.n_test_cameras, width=args.size, height=args.size,
            focal=args.focal if args.focal is not None else 60.0 * args.size / 64,
            n_appearances=args.n_appearances, occluded_fraction=args.occluded_fraction,
            occluder_size=args.occluder_size,
        )
        write_dataset(synth(spec), args.out)
    elif cmd == "train":
        overrides = {k: v for k, v in (("total_steps", args.steps), ("mode", args.mode), ("seed", args.seed)) if v is not None}
        text = Path(args.config).read_text() if args.config else ""
        cfg = parse_config(text, **overrides)
        ds = read_dataset(args.data)
        state = train(cfg, ds.train, ds.points)
        save_checkpoint(state, args.out)
    elif cmd == "render":
        state = load_checkpoint(args.checkpoint)
        write_png(args.out, render_with(state, _embedding(state, args), _camera(args)))
    elif cmd == "bake":
        state = load_checkpoint(args.checkpoint)
        Path(args.out).write_bytes(write_ply(baked_cloud(state, _embedding(state, args))))
    elif cmd == "interp":
        state = load_checkpoint(args.checkpoint)
        cam = _camera(args)
        ends = []
        for i in (args.from_id, args.to_id):
            if i not in state.embeddings:
                raise DatasetError(f"checkpoint has no embedding for image {i}")
            ends.append(state.embeddings[i])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for k, frame in enumerate(interpolation_frames(state, ends[0], ends[1], cam, args.frames)):
            write_png(out / f"frame_{k:03d}.png", frame)
    elif cmd == "eval":
        state = load_checkpoint(args.checkpoint)
        report = evaluate(state, read_dataset(args.data), args.split)
        Path(args.out).write_text(report.to_csv())
        print(report.summary())
    elif cmd == "mask-dump":
        state = load_checkpoint(args.checkpoint)
        ds = read_dataset(args.data)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for img in ds.images:
            write_png(out / f"{img.id:04d}.png", predicted_mask(state, img))


DATA_ERRORS = (OSError, DatasetError, PlyFormatError, FormatError, ConfigurationError, DimensionError, ValueError)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        run(args)
    except DATA_ERRORS as exc:
        print(f"wegs {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
