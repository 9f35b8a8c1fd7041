"""Command-line entry point: prep, train, fuse and eval subcommands.

Every subcommand echoes its fully resolved configuration to stderr as one
JSON line, so any logged invocation can be rerun byte-exactly.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, metrics, model, training
from .data import DataError
from .tensor import ShapeError
from .weights_io import WeightsFormatError


def _echo_config(command: str, resolved: dict) -> None:
    print(f"config: {json.dumps({'command': command, **resolved}, sort_keys=True)}",
          file=sys.stderr)


def cmd_prep(args) -> int:
    _echo_config("prep", {"manifest": str(args.manifest), "out_dir": str(args.out_dir),
                          "size": args.size, "stride": args.stride,
                          "mirror": not args.no_mirror, "seed": args.seed})
    count = data.prep_tiles(args.manifest, args.out_dir, size=args.size,
                            stride=args.stride, mirror=not args.no_mirror)
    print(f"wrote {count} tiles to {args.out_dir}")
    return 0


def cmd_train(args) -> int:
    config = training.TrainConfig.from_json_file(args.config)
    if args.seed is not None:
        config.seed = args.seed
    _echo_config("train", json.loads(config.to_json()))
    if not config.data_dir:
        raise DataError("config must set data_dir (prep output directory)")
    if not config.checkpoint_dir:
        raise DataError("config must set checkpoint_dir")
    crops = data.load_tiles_dir(config.data_dir)

    def log_fn(epoch, report, lr):
        print(f"epoch {epoch}: pixel={report.pixel:.6g} gradient={report.gradient:.6g} "
              f"color={report.color:.6g} perceptual={report.perceptual:.6g} "
              f"total={report.total:.6g} lr={lr:.3g}")

    training.train(crops, config, resume_from=args.resume, log_fn=log_fn)
    print(f"checkpoints in {config.checkpoint_dir}")
    return 0


def _load_image_tensor(path: Path) -> np.ndarray:
    return data.load_grayscale(path).pixels


def _pad_to_multiple(img: np.ndarray, multiple: int = 8) -> tuple[np.ndarray, int, int]:
    h, w = img.shape[2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return img, h, w


def save_image_png(img: np.ndarray, path: Path) -> None:
    """Clamp to [0, 1], scale x255 and round half to even."""
    arr = np.clip(img[0, 0], 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255.0).astype(np.uint8), mode="L").save(path)


def cmd_fuse(args) -> int:
    _echo_config("fuse", {"ir": str(args.ir), "vis": str(args.vis),
                          "weights": str(args.weights), "strategy": args.strategy,
                          "out": str(args.out), "seed": args.seed})
    ir = _load_image_tensor(args.ir)
    vis = _load_image_tensor(args.vis)
    if ir.shape != vis.shape:
        raise ShapeError(f"image size mismatch: ir {ir.shape[2:]} vs "
                         f"vis {vis.shape[2:]}")
    weights = model.ModelWeights.load(args.weights)
    ir_p, h, w = _pad_to_multiple(ir)
    vis_p, _, _ = _pad_to_multiple(vis)
    fused = model.fuse_images(ir_p, vis_p, weights, strategy=args.strategy)
    save_image_png(fused[:, :, :h, :w], args.out)
    print(f"wrote {args.out}")
    return 0


def _format_report(name: str, values: dict[str, float], fmt: str) -> str:
    if fmt == "json":
        return json.dumps({"image": name, **values}, sort_keys=False)
    return ",".join([name] + [f"{values[k]:.6f}" for k in metrics.MetricReport.COLUMNS])


def _eval_triples(args) -> list[tuple[str, metrics.MetricReport]]:
    paths = (Path(args.fused), Path(args.ir), Path(args.vis))
    if all(p.is_dir() for p in paths):
        names = sorted(set.intersection(
            *({q.name for q in p.iterdir() if q.is_file()} for p in paths)))
        if not names:
            raise DataError("directory mode: no common filenames across "
                            "fused/ir/vis directories")
        triples = [(n, paths[0] / n, paths[1] / n, paths[2] / n) for n in names]
    elif any(p.is_dir() for p in paths):
        raise DataError("either all three eval paths are directories or none is")
    else:
        triples = [(paths[0].name, *paths)]
    out = []
    for name, f, i, v in triples:
        report = metrics.evaluate_all(_load_image_tensor(f), _load_image_tensor(i),
                                      _load_image_tensor(v))
        out.append((name, report))
    return out


def cmd_eval(args) -> int:
    _echo_config("eval", {"fused": str(args.fused), "ir": str(args.ir),
                          "vis": str(args.vis), "format": args.format,
                          "seed": args.seed})
    rows = _eval_triples(args)
    lines = []
    if args.format == "csv":
        lines.append(",".join(("image",) + metrics.MetricReport.COLUMNS))
    for name, report in rows:
        lines.append(_format_report(name, report.to_dict(), args.format))
    if len(rows) > 1:
        mean = {k: float(np.mean([r.to_dict()[k] for _, r in rows]))
                for k in metrics.MetricReport.COLUMNS}
        lines.append(_format_report("mean", mean, args.format))
    text = "\n".join(lines)
    if args.out is not None:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualfuse",
        description="Dual-branch autoencoder image fusion: data prep, "
                    "training, fusing and objective evaluation.")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the configured RNG seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="crop manifest images into training tiles")
    p.add_argument("manifest", type=Path,
                   help="TSV manifest: role<TAB>ir_path<TAB>vis_path")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--size", type=int, default=data.TILE_SIZE)
    p.add_argument("--stride", type=int, default=data.TILE_STRIDE)
    p.add_argument("--no-mirror", action="store_true",
                   help="skip the mirrored copies")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train the autoencoder from a JSON config")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None,
                   help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse one infrared/visible pair")
    p.add_argument("ir", type=Path)
    p.add_argument("vis", type=Path)
    p.add_argument("weights", type=Path, help="DBFW weights file")
    p.add_argument("out", type=Path, help="output PNG path")
    p.add_argument("--strategy", choices=model.FUSION_STRATEGIES,
                   default="channel")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="score a fused triple (files or directories)")
    p.add_argument("fused", type=Path)
    p.add_argument("ir", type=Path)
    p.add_argument("vis", type=Path)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", type=Path, default=None,
                   help="also write the report here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ShapeError, WeightsFormatError, training.TrainingError,
            ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
