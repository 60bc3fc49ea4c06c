"""Command-line entry point: ``dmps <verb> [flags]``.

Exit codes: 0 success, 1 invariant failure, 2 configuration error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import TASKS, RunConfig, default_config, defaults_text, load_config
from .latent_graph import ConfigError
from .model import BLOCK_KINDS
from .training import (
    NumericalAbort,
    evaluate,
    export_kernel,
    sweep_gamma,
    sweep_rho,
    train,
)

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("dmps")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _gamma(text: str):
    if text == "learnable":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be a number or 'learnable', got {text!r}") from None


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer, got {value}")
    return value


def _add_run_flags(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--seed", type=_seed)
    p.add_argument("--out", type=Path, help=out_help)
    p.add_argument("--rho", type=float, help="gaussian task correlation")
    p.add_argument("--gamma", type=_gamma, help="fixed diffusion coefficient or 'learnable'")
    p.add_argument("--blocks", choices=BLOCK_KINDS)
    p.add_argument("--depth", type=int, help="number of blocks")
    p.add_argument("--batches", type=int, help="training batches")
    p.add_argument(
        "--print-defaults", dest="sub_print_defaults", action="store_true",
        help="print the annotated default config for --task and exit",
    )


def _add_checkpoint_flags(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, help=out_help)
    p.add_argument("--seed", type=_seed, help="seed for the held-out sets")
    p.add_argument("--n-sets", type=int, help="number of held-out sets")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmps", description="Message passing on sets.")
    parser.add_argument(
        "--print-defaults", action="store_true", help="print the annotated default config and exit"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb")

    p = sub.add_parser("train", help="train one model")
    _add_run_flags(p, "run directory (metrics.jsonl, checkpoint.bin, config.yaml)")

    p = sub.add_parser("evaluate", help="test accuracy of a checkpoint")
    _add_checkpoint_flags(p, "directory for eval.json")

    for verb, what in (("sweep-rho", "rho"), ("sweep-gamma", "gamma")):
        p = sub.add_parser(verb, help=f"test accuracy over a {what} grid and seeds")
        _add_run_flags(p, "directory for results.csv")
        p.add_argument("--grid", type=_float_list, help=f"comma-separated {what} values")
        p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
        p.add_argument("--jobs", type=int, default=1, help="parallel training jobs")

    p = sub.add_parser("export-kernel", help="write kernel and graph matrices of held-out sets")
    _add_checkpoint_flags(p, "directory for kernel_*.csv")
    p.add_argument("--n-export", type=int, default=3, help="individual sets written per class")

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--out", type=Path, help="directory or .json path for the report")

    p = sub.add_parser("print-defaults", help="print the annotated default config")
    p.add_argument("--task", choices=TASKS, default="gaussian")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
        if args.task is not None and args.task != cfg.task:
            raise ConfigError(f"--task {args.task} contradicts task {cfg.task!r} in {args.config}")
    else:
        cfg = default_config(args.task or "gaussian")
    cfg = cfg.with_overrides(
        seed=args.seed,
        out_dir=args.out,
        rho=args.rho,
        gamma=args.gamma,
        blocks=args.blocks,
        depth=args.depth,
    )
    if args.batches is not None:
        cfg = cfg.replace(batches=args.batches)
    return cfg


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out_dir) if cfg.out_dir else Path("runs") / f"{cfg.task}-seed{cfg.seed}"
    result = train(cfg, out_dir=out, progress=args.verbose)
    acc = evaluate(result.params, cfg).accuracy
    last = result.metrics[-1]
    _emit({"out": str(out), "step": last.step, "train_loss": last.train_loss, "test_accuracy": acc})
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    res = evaluate(params, cfg, n_sets=args.n_sets, seed=args.seed)
    payload = {
        "checkpoint": str(args.checkpoint),
        "task": cfg.task,
        "n_sets": len(res.labels),
        "accuracy": res.accuracy,
    }
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _emit(payload)
    return EXIT_OK


def _cmd_sweep(args, gamma: bool) -> int:
    if args.task is None and args.config is None:
        args.task = "counting" if gamma else "gaussian"
    cfg = resolve_config(args)
    out = args.out or Path("runs") / ("sweep-gamma" if gamma else "sweep-rho")
    run = sweep_gamma if gamma else sweep_rho
    table = run(cfg, grid=args.grid, seeds=args.seeds, out_dir=out, jobs=args.jobs)
    _emit(
        {
            "out": str(out / "results.csv"),
            table.parameter: table.values,
            "mean": table.mean.tolist(),
            "sd": table.sd.tolist(),
        }
    )
    return EXIT_OK


def _cmd_export(args) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    out = args.out or args.checkpoint.parent
    summary = export_kernel(params, cfg, out, n_sets=args.n_sets, n_export=args.n_export, seed=args.seed)
    slim = {k: v for k, v in summary.items() if not isinstance(v, dict)}
    for name in ("sigma", "identity"):
        if name in summary:
            slim[name] = {k: v for k, v in summary[name].items() if k != "mean_K"}
    _emit({"out": str(out), **slim})
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .invariants import run_invariant_suite

    report = run_invariant_suite(args.out or Path("report.json"))
    for check in report.checks:
        print(f"{'PASS' if check.passed else 'FAIL'}  {check.name}  {check.detail.splitlines()[0] if check.detail else ''}")
    print(f"{len(report.checks) - len(report.failures)}/{len(report.checks)} invariants hold")
    return EXIT_OK if report.passed else EXIT_INVARIANT


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.print_defaults or getattr(args, "sub_print_defaults", False):
        sys.stdout.write(defaults_text(getattr(args, "task", None) or "gaussian"))
        return EXIT_OK
    if args.verb is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    try:
        if args.verb == "print-defaults":
            sys.stdout.write(defaults_text(args.task))
            return EXIT_OK
        if args.verb == "train":
            return _cmd_train(args)
        if args.verb == "evaluate":
            return _cmd_evaluate(args)
        if args.verb in ("sweep-rho", "sweep-gamma"):
            return _cmd_sweep(args, gamma=args.verb == "sweep-gamma")
        if args.verb == "export-kernel":
            return _cmd_export(args)
        return _cmd_verify(args)
    except NumericalAbort as exc:
        print(f"dmps: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"dmps: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
