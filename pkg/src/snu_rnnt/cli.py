"""Command-line entry point.

Exit codes: 0 success, 1 usage/config/data error, 2 verification failure,
3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import numerics as nx
from .config import ConfigError, RunConfig
from .dataio import generate_toy_dataset, load_checkpoint, read_dataset, save_checkpoint, write_dataset
from .numerics import ShapeError
from .training import DivergenceError, fit, token_error_rate, write_log
from .transducer import TransducerModel

log = logging.getLogger("snu_rnnt")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _existing(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _run_config(args) -> RunConfig:
    config = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.toy_config()
    return cfgmod.apply_overrides(config, getattr(args, "set", None) or [])


def _check_width(model: TransducerModel, data, source: str) -> None:
    for utt in data:
        if utt.features.shape[1] != model.config.input_size:
            raise UsageError(f"{source}: utterance {utt.id} has {utt.features.shape[1]} features, "
                             f"model expects {model.config.input_size}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    config = _run_config(args)
    data = generate_toy_dataset(config.data)
    write_dataset(data, args.out)
    print(f"wrote {len(data)} utterances to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _run_config(args)
    data_path = _existing(args.data or config.paths.get("train"), "training data")
    eval_arg = args.eval or config.paths.get("eval")
    out = Path(args.out or config.paths.get("out") or "run")
    nx.set_default_dtype(config.dtype)
    train = read_dataset(data_path)
    eval_data = read_dataset(_existing(eval_arg, "eval data")) if eval_arg else None
    model = TransducerModel(config.model, seed=config.training.seed)
    _check_width(model, train, str(data_path))
    out.mkdir(parents=True, exist_ok=True)
    digest = config.digest()
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = fit(model, train, config.training, eval_data=eval_data,
               checkpoint_dir=out / "checkpoints",
               on_epoch=lambda r: print(f"epoch {r.epoch:3d}  step {r.step:5d}  lr {r.lr:.2e}  "
                                        f"loss {r.loss:.4f}  token_error {r.token_error:.4f}",
                                        flush=True))
    save_checkpoint(out / "model.ckpt", model, {"config_hash": digest})
    write_log(rows, out / "train_log.csv", header=f"config_hash={digest}")
    print(f"saved {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_decode(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint")
    data = read_dataset(_existing(args.data, "data"))
    model, meta = load_checkpoint(ckpt)
    _check_width(model, data, args.data)
    if args.width < 1:
        raise UsageError("beam width must be >= 1")
    hyps = []
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for utt in data:
            if args.mode == "beam":
                res = model.beam_decode(utt.features, args.width)
            else:
                res = model.greedy_decode(utt.features)
            hyps.append(res.labels)
            out.write(json.dumps({"id": utt.id, "labels": res.labels, "log_prob": res.log_prob,
                                  "truncated": res.truncated}) + "\n")
    finally:
        if args.out:
            out.close()
    if any(utt.labels for utt in data):
        ter = token_error_rate(hyps, [u.labels for u in data])
        print(f"token_error {ter:.4f}", file=sys.stderr)
    return EXIT_OK


def _parse_lengths(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        lengths = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"invalid lengths {text!r}") from None
    if not lengths or any(T < 1 for T in lengths):
        raise UsageError(f"invalid lengths {text!r}")
    return lengths


def cmd_profile(args) -> int:
    from .profiler import CostReport, cost_rows, reference_report, time_decode, timing_model

    lengths = _parse_lengths(args.lengths)
    if args.repeats < 1:
        raise UsageError("repeats must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = None
    if args.checkpoint:
        model, _ = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
        report = CostReport(cost_rows(model.config))
    elif args.config:
        config = _run_config(args)
        nx.set_default_dtype(config.dtype)
        report = CostReport(cost_rows(config.model))
        if lengths:
            model = timing_model(config.model)
    else:
        report = reference_report()
    report.write_counts(out / "counts.csv")
    print(f"wrote {out / 'counts.csv'}")
    if lengths:
        if model is None:
            raise UsageError("timing needs --config or --checkpoint")
        report.timing = time_decode(model, lengths, args.repeats)
        report.write_timing(out / "timing.csv")
        print(f"wrote {out / 'timing.csv'}")
    return EXIT_OK


def cmd_count(args) -> int:
    from .profiler import cost_rows, format_percent, reference_report

    rows = cost_rows(_run_config(args).model) if args.config else reference_report().rows
    print(f"{'variant':<22} {'subnetwork':<11} {'params':>12} {'%':>4} {'mults':>12} {'%':>4}")
    for r in rows:
        print(f"{r.variant:<22} {r.subnetwork:<11} {r.params:>12,} {format_percent(r.percent_params):>4} "
              f"{r.mults:>12,} {format_percent(r.percent_mults):>4}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    if not args.tol > 0:
        raise UsageError("tolerance must be positive")
    results = run_all(args.tol, args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snu-rnnt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run config (default: built-in toy config)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value; repeatable")
        return p

    p = with_config(sub.add_parser("gen-data", help="generate the synthetic toy dataset"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("train", help="train a transducer"))
    p.add_argument("--data")
    p.add_argument("--eval")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = with_config(sub.add_parser("profile", help="write count and timing CSVs"))
    p.add_argument("--checkpoint")
    p.add_argument("--lengths", help="comma-separated utterance lengths for timing")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_profile)

    p = with_config(sub.add_parser("count", help="print parameter/multiplication counts"))
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        nx.set_default_dtype("float64")


if __name__ == "__main__":
    sys.exit(main())
