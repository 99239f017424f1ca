"""``marseg`` command line: gen, train, eval, ablate, render-bev, render-errors.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .bev import BevConfig
from .core import ConfigError, DataError, MarsegError
from .dataset_io import dataset_hash, list_samples, read_sequence, validate_dataset
from .align import align_sequence
from .mars import MarsModel, config_hash, prepare_sample
from .render import render_bev, render_errors
from .train_eval import ABLATIONS, TrainConfig, ablation_suite, ablation_table, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bev_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", type=int, default=3, help="frames per sample k (target last)")
    p.add_argument("--bev-size", type=_bev_size, default=(160, 160), metavar="HxW")
    p.add_argument("--cell", type=float, default=0.5, help="BEV cell size in metres")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--wc", type=float, default=1.0, help="weight of the category loss")
    p.add_argument("--wm", type=float, default=1.0, help="weight of the motion loss")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marseg", description="Multi-scan LiDAR segmentation with motion-aware BEV features.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic sequence dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=10)
    g.add_argument("--frames", type=int, default=3)
    g.add_argument("--points", type=int, default=2000, help="points per frame")
    g.add_argument("--extent", type=float, default=10.0, help="scene half-width in metres")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    _model_flags(t)
    for flag in ("--no-cffe", "--no-bev", "--no-mafl"):
        t.add_argument(flag, action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--out", type=Path, help="write the report here (default: stdout only)")
    e.add_argument("--frames", type=int, help="refuse the checkpoint unless it uses this many frames")

    a = sub.add_parser("ablate", help="baseline / +cffe / +bev / +cffe+bev / full over several seeds")
    a.add_argument("--dataset", type=Path, required=True, help="training dataset")
    a.add_argument("--eval-dataset", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True, help="results table (CSV)")
    a.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    _model_flags(a)

    for name, help_text in (("render-bev", "grayscale map of frame-difference activations"),
                            ("render-errors", "colour map of prediction errors")):
        r = sub.add_parser(name, help=help_text)
        r.add_argument("--checkpoint", type=Path, required=True)
        r.add_argument("--dataset", type=Path, required=True)
        r.add_argument("--sample", type=int, default=0, help="index into the dataset's sample list")
        r.add_argument("--out", type=Path, required=True)
        if name == "render-bev":
            r.add_argument("--seed", type=int, default=0, help="seed for the sampled channels")
            r.add_argument("--channels", type=int, default=8)
    return parser


def _train_config(args, flags=None) -> TrainConfig:
    h, w = args.bev_size
    cffe, bev, mafl = flags if flags is not None else (not args.no_cffe, not args.no_bev, not args.no_mafl)
    return TrainConfig(
        epochs=args.epochs, lr=args.lr, seed=args.seed, w_c=args.wc, w_m=args.wm,
        use_cffe=cffe, use_bev=bev, use_mafl=mafl, frames=args.frames, bev=BevConfig(h, w, args.cell),
    )


def _header(seed, cfg: dict, data: str) -> list[str]:
    return [f"# seed={seed}", f"# config_hash={config_hash(cfg)}", f"# dataset_hash={data}"]


def _emit(lines: Sequence[str]) -> None:
    print("\n".join(lines), flush=True)


def cmd_gen(args) -> None:
    from .synth import generate_dataset

    generate_dataset(args.out, args.scenes, args.seed, k=args.frames, extent=args.extent, points_per_frame=args.points)
    cfg = {"scenes": args.scenes, "frames": args.frames, "points": args.points, "extent": args.extent}
    _emit(_header(args.seed, cfg, dataset_hash(args.out)) + [f"wrote {args.scenes} sequences to {args.out}"])


def cmd_train(args) -> None:
    cfg = _train_config(args)
    result = train(args.dataset, cfg, args.out)
    with open(result.log) as fh:
        _emit([line.rstrip("\n") for line in fh if line.startswith("#")])
    final = result.epoch_losses[-1] if result.epoch_losses else (float("nan"),) * 3
    _emit([f"checkpoint {result.checkpoint}", f"final L={final[0]:.6f} L_c={final[1]:.6f} L_m={final[2]:.6f}"])


def _load_model(checkpoint: Path, dataset: Path, expect=None) -> MarsModel:
    _, taxonomy = validate_dataset(dataset)
    return MarsModel.load(checkpoint, taxonomy, expect)


def cmd_eval(args) -> None:
    expect = {"frames": args.frames} if args.frames is not None else None
    model = _load_model(args.checkpoint, args.dataset, expect)
    report = evaluate(args.checkpoint, args.dataset)
    text = "\n".join(_header("n/a", model.manifest()["config"], dataset_hash(args.dataset))) + "\n" + report.to_csv()
    if args.out:
        try:
            args.out.write_text(text)
        except OSError as exc:
            raise DataError(f"cannot write {args.out}: {exc}") from None
    sys.stdout.write(text)


def cmd_ablate(args) -> None:
    base = _train_config(args, flags=(True, True, True))
    start = time.monotonic()
    rows = ablation_suite(args.dataset, args.eval_dataset, base, args.seeds,
                          progress=lambda m: print(m, file=sys.stderr, flush=True))
    header = _header(",".join(map(str, args.seeds)), {"train": base.to_dict(), "configs": list(ABLATIONS)},
                     dataset_hash(args.dataset))
    text = "\n".join(header) + "\n" + ablation_table(rows)
    try:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from None
    sys.stdout.write(text)
    print(f"elapsed {time.monotonic() - start:.1f} s", file=sys.stderr)


def _sample(model: MarsModel, dataset: Path, index: int):
    samples = list_samples(dataset, model.config.frames)
    if not 0 <= index < len(samples):
        raise DataError(f"sample index {index} outside 0..{len(samples) - 1}")
    seq, target = samples[index]
    frames, poses = read_sequence(seq, model.config.frames, target)
    return prepare_sample(align_sequence(frames, poses), model.config)


def cmd_render_bev(args) -> None:
    model = _load_model(args.checkpoint, args.dataset)
    header = _header(args.seed, model.manifest()["config"], dataset_hash(args.dataset))
    render_bev(model, _sample(model, args.dataset, args.sample), args.out, args.channels, args.seed, header)
    _emit([f"wrote {args.out}"])


def cmd_render_errors(args) -> None:
    model = _load_model(args.checkpoint, args.dataset)
    header = _header("n/a", model.manifest()["config"], dataset_hash(args.dataset))
    counts = render_errors(model, _sample(model, args.dataset, args.sample), args.out, header)
    _emit([f"wrote {args.out}"] + [f"{k}={v}" for k, v in counts.items()])


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "render-bev": cmd_render_bev,
    "render-errors": cmd_render_errors,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MarsegError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
