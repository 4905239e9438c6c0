"""Command-line entry point: ``synergy-cl {run,ablate,stream dump,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import FormatError
from .experiment import RunConfig, emit_tables, load_datasets, run_ablation, run_experiment
from .learner import ConfigurationError, Method
from .seeding import RunStreams
from .streams import SCENARIOS, StreamSpec, batch_checksum, build_stream


def _seeds(text):
    """``N`` means N consecutive seeds; ``a,b,c`` lists seeds explicitly."""
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("--seeds needs a positive count")
    return n


def _add_run_flags(p):
    p.add_argument("--config", type=Path, help="JSON run configuration; flags below override it")
    p.add_argument("--method", choices=[m.value for m in Method])
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--dataset", choices=("mnist", "synthetic"))
    p.add_argument("--buffer-size", type=int)
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--seeds", type=_seeds, help="seed count, or comma-separated seed list")
    p.add_argument("--data-dir")
    p.add_argument("--out", help="output directory")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--cadence", choices=("per_task", "end_only"))
    p.add_argument("--eval-working", action="store_true", default=None,
                   help="also evaluate the working model")
    p.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))


def _overrides(args):
    over, syn, stream = {}, {}, {}
    if getattr(args, "method", None):
        over["method"] = args.method
    if args.scenario:
        stream["scenario"] = args.scenario
    if args.dataset:
        stream["dataset"] = args.dataset
    if args.buffer_size is not None:
        syn["buffer_size"] = args.buffer_size
    if args.seed is not None:
        syn["seed"] = args.seed
    if args.precision:
        syn["precision"] = args.precision
    if isinstance(args.seeds, list):
        over["seeds"] = args.seeds
        over["n_seeds"] = len(args.seeds)
    elif args.seeds is not None:
        over["n_seeds"] = args.seeds
        over["seeds"] = None
    for flag, key in (("data_dir", "data_dir"), ("out", "output_dir"), ("cadence", "eval_cadence"),
                      ("eval_working", "eval_working"), ("log_level", "log_level")):
        value = getattr(args, flag, None)
        if value is not None:
            over[key] = value
    if syn:
        over["synergy"] = syn
    if stream:
        over["stream"] = stream
    return over


def _config(args):
    base = {}
    if args.config is not None:
        if not args.config.is_file():
            raise FileNotFoundError(f"config file not found: {args.config}")
        base = json.loads(args.config.read_text())
    return RunConfig.from_dict(base, _overrides(args))


def cmd_run(args):
    config = _config(args)
    report = run_experiment(config)
    print(emit_tables([report]), end="")
    print(f"outputs written to {report.output_dir}")


def cmd_ablate(args):
    config = _config(args)
    reports = run_ablation(config)
    print(emit_tables(reports), end="")


def cmd_stream_dump(args):
    config = _config(args)
    train, test = load_datasets(config)
    seed = config.seed_list[0]
    spec = StreamSpec.from_dict({**config.stream.to_dict(), "seed": seed,
                                 "batch_size": config.synergy.batch_size, "epochs": config.synergy.epochs})
    stream = build_stream(spec, train, test, RunStreams.from_seed(seed).stream)
    batches = []
    for batch in stream:
        if len(batches) >= args.k:
            break
        batches.append({"step": batch.step, "labels": batch.labels.tolist(), "sha256": batch_checksum(batch)})
    text = json.dumps({"stream": spec.to_dict(), "batches": batches}, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_report(args):
    aggs = []
    for root in args.dirs:
        root = Path(root)
        found = sorted(root.rglob("aggregate.json")) if root.is_dir() else [root]
        if not found:
            raise FileNotFoundError(f"no aggregate.json under {root}")
        aggs += [json.loads(p.read_text()) for p in found]
    sys.stdout.write(emit_tables(aggs, metric=args.metric, fmt=args.format))


def build_parser():
    parser = argparse.ArgumentParser(prog="synergy-cl", description="Continual learning with dual memories.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one method over several seeds")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run every ablation variant on one stream")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stream", help="inspect a stream")
    ssub = p.add_subparsers(dest="stream_command", required=True)
    d = ssub.add_parser("dump", help="labels and input checksums of the first k batches")
    _add_run_flags(d)
    d.add_argument("-k", type=int, default=5)
    d.set_defaults(func=cmd_stream_dump)

    p = sub.add_parser("report", help="tabulate aggregate.json files")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--metric", default="avg_accuracy")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(args, "log_level", None) or "INFO",
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigurationError, FileNotFoundError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
