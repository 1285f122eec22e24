"""Command-line interface.

Subcommands: train, detect, eval, bench, make-fixtures, inspect-model.
Every run prints its resolved configuration and seed; with a fixed seed,
reruns produce bit-identical output files. Report commands write a
matplotlib figure next to each CSV. Exit codes: 0 success, 1 usage
error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .detect import detect, make_dog_model, make_random_model, write_detections_csv
from .evaluate import bench_matrix, class_averages
from .fixtures import load_pairs, make_fixtures
from .imgio import atomic_write_bytes, load_image, write_heatmap_pgm
from .model import build_model, load_model, save_model
from .training import TrainConfig, train, warp_sources


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="quadrank", description=__doc__)
    parser.add_argument("--version", action="version", version=f"quadrank {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a response model")
    p.add_argument("--arch", default="linear")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--quads", type=int, default=2000, help="quadruples sampled per pair")
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source", choices=["warp-small", "warp-large", "aligned"], default="warp-small")
    p.add_argument("--images", help="directory of training images (warp sources)")
    p.add_argument("--pairs", help="directory of pair manifests (aligned source)")
    p.add_argument("--heldout", type=int, default=1000)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--out", required=True, help="output model file")

    p = sub.add_parser("detect", help="detect interest points")
    p.add_argument("--model", required=True, help="model file, or 'dog' / 'random'")
    p.add_argument("--image", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--octaves", type=int)
    p.add_argument("--seed", type=int, default=0, help="seed for the 'random' model")
    p.add_argument("--heatmaps", help="directory for per-level response PGMs")
    p.add_argument("--out", required=True, help="output detections CSV")

    p = sub.add_parser("eval", help="repeatability of one model")
    p.add_argument("--model", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--budgets", default="50,100,200")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="repeatability matrix over models")
    p.add_argument("--models", required=True, help="comma list: files and/or dog,random")
    p.add_argument("--pairs", required=True)
    p.add_argument("--budgets", default="50,100,200")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-fixtures", help="generate synthetic pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bases", type=int, default=5)
    p.add_argument("--size", type=int, default=256)

    p = sub.add_parser("inspect-model", help="describe a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--figure", help="write first-layer filter figure here")
    return parser


def _print_config(args: argparse.Namespace) -> None:
    items = {k: v for k, v in sorted(vars(args).items()) if k != "command" and v is not None}
    print(f"quadrank {__version__} {args.command}: " + " ".join(f"{k}={v}" for k, v in items.items()))


def _resolve_model(ref: str, seed: int):
    if ref == "dog":
        return "dog", make_dog_model()
    if ref == "random":
        return f"random{seed}", make_random_model(seed)
    return Path(ref).stem, load_model(ref)


def _parse_budgets(text: str) -> list[int]:
    try:
        budgets = [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"bad budget list {text!r}") from None
    if not budgets or any(b < 1 for b in budgets):
        raise UsageError(f"bad budget list {text!r}")
    return budgets


def _rows_to_csv(rows, comment: str) -> str:
    lines = [
        f"# {comment}",
        "# protocol: budget-first truncation, detections restricted to the common region",
        "model,pair,transform_class,budget,n_a,n_b,n_corr,repeatability",
    ]
    for r in rows:
        lines.append(
            f"{r.model},{r.pair},{r.transform_class},{r.budget},"
            f"{r.n_a},{r.n_b},{r.n_corr},{r.repeatability:.6f}"
        )
    return "\n".join(lines) + "\n"


def _cmd_train(args) -> int:
    from .viz import save_training_curves

    config = TrainConfig(
        arch=args.arch,
        epochs=args.epochs,
        quads_per_pair=args.quads,
        batch_size=args.batch,
        seed=args.seed,
        source=args.source,
        heldout_quads=args.heldout,
        checkpoint_every=args.checkpoint_every,
        checkpoint_path=Path(args.out),
    )
    if args.source == "aligned":
        if not args.pairs:
            raise UsageError("aligned source needs --pairs")
        sources = load_pairs(args.pairs)
    else:
        if not args.images:
            raise UsageError(f"{args.source} source needs --images")
        image_dir = Path(args.images)
        paths = sorted(
            p for p in image_dir.iterdir() if p.suffix.lower() in (".pgm", ".png")
        )
        if not paths:
            raise ValueError(f"no images under {image_dir}")
        sources = warp_sources([load_image(p) for p in paths], args.source)

    def progress(rec):
        print(
            f"epoch {rec.epoch}/{config.epochs} loss={rec.mean_loss:.4f} "
            f"misrank={rec.misrank:.4f} heldout={rec.heldout_misrank:.4f} "
            f"[{rec.seconds:.2f}s]"
        )

    model, log = train(config, sources, progress=progress)
    out = Path(args.out)
    save_model(model, out)
    log_path = out.with_suffix(".log.csv")
    atomic_write_bytes(log_path, log.to_csv(f"quadrank {__version__} seed={args.seed}").encode())
    if log.records:
        save_training_curves(log, out.with_suffix(".log.png"))
    print(f"model written to {out}; log to {log_path}")
    return 0


def _cmd_detect(args) -> int:
    _, model = _resolve_model(args.model, args.seed)
    img = load_image(args.image)
    dets = detect(model, img, args.n, threshold=args.threshold, octaves=args.octaves)
    write_detections_csv(args.out, dets, comment=f"quadrank {__version__} seed={args.seed}")
    if args.heatmaps:
        from .detect import compute_volume
        from .image import build_pyramid, max_octaves

        octaves = args.octaves if args.octaves else min(3, max_octaves(img))
        vol = compute_volume(model, build_pyramid(img, octaves))
        heat_dir = Path(args.heatmaps)
        heat_dir.mkdir(parents=True, exist_ok=True)
        for i, level_map in enumerate(vol.maps):
            write_heatmap_pgm(heat_dir / f"level{i:02d}.pgm", level_map)
    print(f"{len(dets)} detections written to {args.out}")
    return 0


def _run_bench(model_refs: list[str], args) -> int:
    from .viz import save_repeatability_figure

    models = [_resolve_model(ref, args.seed) for ref in model_refs]
    pairs = load_pairs(args.pairs)
    budgets = _parse_budgets(args.budgets)
    rows = bench_matrix(models, pairs, budgets)
    out = Path(args.out)
    atomic_write_bytes(out, _rows_to_csv(rows, f"quadrank {__version__} seed={args.seed}").encode())
    save_repeatability_figure(rows, out.with_suffix(".png"))
    for (model, cls, budget), value in sorted(class_averages(rows).items()):
        print(f"{model:>16} {cls:>14} n={budget:<5} mean repeatability {value:.3f}")
    print(f"matrix written to {out}; figure to {out.with_suffix('.png')}")
    return 0


def _cmd_eval(args) -> int:
    return _run_bench([args.model], args)


def _cmd_bench(args) -> int:
    refs = [m.strip() for m in args.models.split(",") if m.strip()]
    if not refs:
        raise UsageError("--models must name at least one model")
    return _run_bench(refs, args)


def _cmd_make_fixtures(args) -> int:
    manifests = make_fixtures(args.out, seed=args.seed, bases=args.bases, size=args.size)
    print(f"{len(manifests)} pairs written under {args.out}")
    return 0


def _cmd_inspect_model(args) -> int:
    _, model = _resolve_model(args.model, args.seed)
    print(f"architecture: {model.arch}")
    print(f"parameters:   {model.param_count}")
    for i, layer in enumerate(model.layers):
        shapes = ", ".join(str(p.shape) for p in layer.params) or "-"
        print(f"  layer {i:2d} {type(layer).__name__:<16} params {shapes}")
    if args.figure:
        from .viz import save_filter_figure

        save_filter_figure(model, args.figure)
        print(f"filter figure written to {args.figure}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "make-fixtures": _cmd_make_fixtures,
    "inspect-model": _cmd_inspect_model,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        _print_config(args)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"quadrank: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
