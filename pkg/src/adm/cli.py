"""Command-line interface: ``adm synth | eval | train | ablate | convert``.

Exit codes: 0 success, 2 usage or parse error, 3 I/O or file-format error,
4 data-shape error (e.g. fewer classes than ways).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .descriptors import COV_KINDS, LabeledDataset, SynthSpec, load_dataset, save_dataset, synth_gaussian_dataset
from .distributions import DEFAULT_SHRINKAGE
from .episodes import DEFAULT_QUERIES, EpisodeSpec, SplitSpec, make_split
from .errors import ADMError, DataShapeError, FormatError, InvalidSpec
from .model import ABLATION_ROWS, MEASURES, MODES, Embedding, FusionHead, MeasureConfig, ablate, evaluate
from .rng import U64_MAX
from .training import TRAINABLE, TrainConfig, train

EXIT_USAGE, EXIT_IO, EXIT_SHAPE = 2, 3, 4


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _seed(text: str) -> int:
    value = _non_negative_int(text)
    if value > U64_MAX:
        raise argparse.ArgumentTypeError("must fit in 64 bits")
    return value


def _unit_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not np.isfinite(value) or value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive number, got {text}")
    return value


def _non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not np.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {text}")
    return value


# ----------------------------------------------------------------- parsers


def _common(required_seed: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=_seed, required=required_seed, default=None if required_seed else 0)
    p.add_argument("-o", "--output", type=Path, default=None)
    p.add_argument("--workers", type=_positive_int, default=1)
    return p


def _episode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="ADMD dataset file")
    p.add_argument("--split", type=Path, default=None, help="split JSON; all classes if omitted")
    p.add_argument("--role", choices=("train", "val", "test"), default="test")
    p.add_argument("--way", type=_positive_int, default=5)
    p.add_argument("--shot", type=_positive_int, default=1)
    p.add_argument("--query", type=_positive_int, default=DEFAULT_QUERIES)
    p.add_argument("--topk", type=_positive_int, default=1)
    p.add_argument("--shrinkage", type=_unit_float, default=DEFAULT_SHRINKAGE)
    p.add_argument("--mode", choices=MODES, default=None, help="standardization mode of the fusion head")
    p.add_argument("--params", type=Path, default=None, help="trained parameters JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adm", description="Asymmetric distribution measures for few-shot episodes")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[_common(False)], help="generate a synthetic Gaussian dataset")
    p.add_argument("--classes", type=_positive_int, required=True)
    p.add_argument("--images", type=_positive_int, required=True)
    p.add_argument("--n", type=_positive_int, required=True, help="descriptors per image")
    p.add_argument("--c", type=_positive_int, required=True, help="descriptor dimension")
    p.add_argument("--cov", choices=COV_KINDS, default="isotropic")
    p.add_argument("--sep", type=_non_negative_float, default=3.0, help="class-mean radius")
    p.add_argument("--split-output", type=Path, default=None, help="default: <output>.split.json")
    p.add_argument("--split-fractions", default="0.5,0.25,0.25")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", parents=[_common(True)], help="evaluate one measure")
    _episode_flags(p)
    p.add_argument("--measure", choices=MEASURES, default="kl")
    p.add_argument("--cms", action="store_true", help="contrastive measure strategy")
    p.add_argument("--tasks", type=_positive_int, default=1000)
    p.add_argument("--reps", type=_positive_int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", parents=[_common(True)], help="train the fusion head (and embedding)")
    _episode_flags(p)
    p.add_argument("--cms", action="store_true")
    p.add_argument("--epochs", type=_non_negative_int, default=10)
    p.add_argument("--episodes", type=_positive_int, default=200, help="episodes per epoch")
    p.add_argument("--lr", type=_positive_float, default=1e-3)
    p.add_argument("--lr-decay", type=_positive_float, default=0.5)
    p.add_argument("--decay-every", type=_positive_int, default=10)
    p.add_argument("--trainable", choices=TRAINABLE, default="fusion")
    p.add_argument("--loss-output", type=Path, default=None, help="default: <output>.loss.json")
    p.add_argument("--tasks", type=_positive_int, default=200, help="final evaluation tasks")
    p.add_argument("--reps", type=_positive_int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", parents=[_common(True)], help="compare measures on shared episodes")
    _episode_flags(p)
    p.add_argument("--rows", default=",".join(ABLATION_ROWS))
    p.add_argument("--tasks", type=_positive_int, default=1000)
    p.add_argument("--reps", type=_positive_int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("convert", parents=[_common(False)], help="text interchange format to ADMD")
    p.add_argument("input", type=Path)
    p.set_defaults(func=cmd_convert)
    return parser


# ----------------------------------------------------------------- helpers


def _load_inputs(args) -> tuple[LabeledDataset, list[int]]:
    dataset = load_dataset(args.data)
    if args.split is None:
        return dataset, list(dataset.class_ids)
    split = SplitSpec.load(args.split)
    split.check_against(dataset)
    return dataset, split.role(args.role)


def _load_params(args) -> tuple[Embedding, FusionHead]:
    embedding, head = Embedding(), FusionHead()
    if args.params is not None:
        try:
            raw = json.loads(args.params.read_text())
            embedding = Embedding.from_dict(raw.get("embedding", {"kind": "identity"}))
            head = FusionHead.from_dict(raw)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{args.params}: not a parameters file ({exc})") from exc
    if args.mode is not None:
        head = FusionHead(**{**head.to_dict(), "mode": args.mode})
    return embedding, head


def _write_json(payload, path: Path | None) -> None:
    text = json.dumps(payload, indent=2) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _table(rows: list[tuple[str, dict]]) -> str:
    header = ("measure", "accuracy (%)", "tasks")
    body = [
        (name, f"{100 * r['mean_acc']:.2f} +- {100 * r['ci95']:.2f}", str(r["tasks"] * r["reps"]))
        for name, r in rows
    ]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(3)]
    fmt = lambda line: "  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
    return "\n".join([fmt(header), fmt(tuple("-" * w for w in widths))] + [fmt(line) for line in body])


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.output is None:
        raise UsageError("synth: -o/--output is required")
    try:
        fractions = tuple(float(x) for x in args.split_fractions.split(","))
        if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
            raise ValueError
    except ValueError:
        raise UsageError("--split-fractions: expected three non-negative numbers summing to at most 1") from None
    spec = SynthSpec(args.classes, args.images, args.n, args.c, args.sep, args.cov)
    dataset = synth_gaussian_dataset(spec, args.seed)
    save_dataset(dataset, args.output)
    split = make_split(dataset.class_ids, fractions)
    split_path = args.split_output or Path(f"{args.output}.split.json")
    split.save(split_path)
    print(f"wrote {args.output} ({args.output.stat().st_size} bytes): "
          f"{dataset.num_classes} classes x {args.images} images, n={args.n}, c={args.c}")
    print(f"wrote {split_path}: train={len(split.train)} val={len(split.val)} test={len(split.test)} classes")
    return 0


def cmd_eval(args) -> int:
    dataset, split = _load_inputs(args)
    embedding, head = _load_params(args)
    spec = EpisodeSpec(args.way, args.shot, args.query)
    config = MeasureConfig(args.measure, args.cms, args.shrinkage, args.topk, embedding, head)
    report = evaluate(dataset, split, spec, config, args.tasks, args.reps, args.seed, args.workers)
    print(_table([(config.name, report.to_dict())]))
    _write_json(report.to_dict(), args.output)
    return 0


def cmd_ablate(args) -> int:
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    if not rows:
        raise UsageError("--rows: at least one row is required")
    for row in rows:
        try:
            MeasureConfig.from_row(row)
        except InvalidSpec as exc:
            raise UsageError(f"--rows: {exc}") from None
    dataset, split = _load_inputs(args)
    embedding, head = _load_params(args)
    spec = EpisodeSpec(args.way, args.shot, args.query)
    results = ablate(
        dataset, split, spec, rows, args.tasks, args.reps, args.seed, args.workers,
        shrinkage=args.shrinkage, k=args.topk, embedding=embedding, head=head,
    )
    table = [(name, report.to_dict()) for name, report in results]
    print(_table(table))
    payload = {
        "seed": args.seed,
        "ways": args.way,
        "shots": args.shot,
        "queries": args.query,
        "tasks": args.tasks,
        "reps": args.reps,
        "rows": [dict(name=name, **report) for name, report in table],
    }
    _write_json(payload, args.output)
    return 0


def cmd_train(args) -> int:
    if args.output is None:
        raise UsageError("train: -o/--output is required")
    dataset = load_dataset(args.data)
    if args.split is not None:
        split = SplitSpec.load(args.split)
        split.check_against(dataset)
        train_ids, test_ids = split.train, split.role(args.role)
    else:
        train_ids = test_ids = list(dataset.class_ids)
    embedding, head = _load_params(args)
    spec = EpisodeSpec(args.way, args.shot, args.query)
    config = TrainConfig(
        epochs=args.epochs,
        episodes_per_epoch=args.episodes,
        lr=args.lr,
        lr_decay=args.lr_decay,
        decay_every=args.decay_every,
        trainable=args.trainable,
        spec=spec,
        shrinkage=args.shrinkage,
        k=args.topk,
        cms=args.cms,
    )
    result = train(dataset, train_ids, config, args.seed, embedding, head)
    args.output.write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    loss_path = args.loss_output or Path(f"{args.output}.loss.json")
    loss_path.write_text(json.dumps(result.loss_curve) + "\n")
    for epoch, loss in enumerate(result.loss_curve):
        print(f"epoch {epoch:3d}  loss {loss:.6f}")
    eval_config = MeasureConfig("adm", args.cms, args.shrinkage, args.topk, result.embedding, result.head)
    report = evaluate(dataset, test_ids, spec, eval_config, args.tasks, args.reps, args.seed, args.workers)
    print(_table([(eval_config.name, report.to_dict())]))
    return 0


def parse_text_dataset(text: str) -> LabeledDataset:
    """Parse the plain-text interchange format.

    First non-blank line ``c=<int>``; then image blocks separated by blank
    lines, each ``class <id>`` followed by one line of ``c`` numbers per
    descriptor.
    """
    lines = text.splitlines()
    dim = None
    order: list[int] = []
    images: dict[int, list[np.ndarray]] = {}
    block: list[list[float]] | None = None
    block_class = block_line = None

    def close() -> None:
        nonlocal block
        if block is None:
            return
        if not block:
            raise UsageError(f"line {block_line}: class {block_class} image has no descriptors")
        images[block_class].append(np.array(block, dtype=np.float32))
        block = None

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if dim is None:
            if not line:
                continue
            key, _, value = line.partition("=")
            if key.strip() != "c" or not value.strip().isdigit() or int(value) < 1:
                raise UsageError(f"line {lineno}: expected header 'c=<positive int>', got {line!r}")
            dim = int(value)
            continue
        if not line:
            close()
            continue
        if line.startswith("class"):
            close()
            parts = line.split()
            if len(parts) != 2 or not parts[1].isdigit():
                raise UsageError(f"line {lineno}: expected 'class <id>', got {line!r}")
            block_class, block_line, block = int(parts[1]), lineno, []
            if block_class not in images:
                order.append(block_class)
                images[block_class] = []
            continue
        if block is None:
            raise UsageError(f"line {lineno}: descriptor line outside a 'class <id>' block")
        try:
            values = [float(v) for v in line.split()]
        except ValueError:
            raise UsageError(f"line {lineno}: could not parse numbers in {line!r}") from None
        if len(values) != dim:
            raise UsageError(f"line {lineno}: expected {dim} numbers, got {len(values)}")
        if not all(np.isfinite(values)):
            raise UsageError(f"line {lineno}: non-finite value")
        block.append(values)
    close()
    if dim is None:
        raise UsageError("line 1: missing header 'c=<int>'")
    if not order:
        raise UsageError(f"line {len(lines)}: no images found")
    return LabeledDataset(order, [images[k] for k in order])


def cmd_convert(args) -> int:
    if args.output is None:
        raise UsageError("convert: -o/--output is required")
    dataset = parse_text_dataset(args.input.read_text())
    save_dataset(dataset, args.output)
    print(f"wrote {args.output}: {dataset.num_classes} classes, "
          f"{sum(len(i) for i in dataset.images)} images, c={dataset.dim}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"adm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataShapeError as exc:
        print(f"adm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (OSError, FormatError) as exc:
        print(f"adm {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ADMError as exc:
        print(f"adm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
