"""Command-line entry point ``lfi``.

    lfi run --config exp.cfg --seed 3 --out runs/s3
    lfi sweep --config exp.cfg --seeds 0..9 --out runs/sweep
    lfi validate --suite oracle

Failures print one ``error[<category>]: <message>`` line to stderr and exit
with a category-specific nonzero code.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .diffcore import ContractViolation, NumericFailure
from .harness import CheckpointFormatError, ConfigError, ExperimentConfig, run_experiment
from .sampling import LeakageFailure

EXIT_CODES = {
    "validation": 1,
    "config": 2,
    "format": 3,
    "contract": 4,
    "numeric": 5,
    "leakage": 6,
    "io": 7,
    "usage": 64,
}


class UsageError(ValueError):
    pass


def _category(exc: BaseException) -> str:
    for typ, name in ((ConfigError, "config"), (CheckpointFormatError, "format"), (LeakageFailure, "leakage"),
                      (NumericFailure, "numeric"), (ContractViolation, "contract"), (UsageError, "usage"),
                      (OSError, "io")):
        if isinstance(exc, typ):
            return name
    raise exc


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0..9"`` (inclusive) or ``"1,4,7"``."""
    m = re.fullmatch(r"\s*(-?\d+)\s*\.\.\s*(-?\d+)\s*", text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        if b < a:
            raise UsageError(f"empty seed range {text!r}")
        return list(range(a, b + 1))
    try:
        return [int(s) for s in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse seeds {text!r}; use a..b or a,b,c") from None


def _run_one(config_path: str, seed: int, out: str) -> str:
    cfg = ExperimentConfig.from_file(config_path, seed=seed, output_dir=out)
    rows = run_experiment(cfg)
    last = rows[-1]
    return (f"seed {seed}: {len(rows)} rounds, final -log p(theta*) {last.neg_log_prob_true:.3f}, "
            f"median distance {last.median_distance:.3f} -> {out}")


def cmd_run(args) -> int:
    print(_run_one(args.config, args.seed, args.out))
    return 0


def cmd_sweep(args) -> int:
    seeds = parse_seeds(args.seeds)
    ExperimentConfig.from_file(args.config)  # fail fast on a bad config
    outs = [str(Path(args.out) / f"seed_{s}") for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for line in pool.map(_run_one, [args.config] * len(seeds), seeds, outs):
                print(line)
    else:
        for s, o in zip(seeds, outs):
            print(_run_one(args.config, s, o))
    return 0


def cmd_validate(args) -> int:
    from .validation import CRITERIA, SUITES, run_suite

    if args.criteria:
        try:
            numbers = [int(c) for c in args.criteria.split(",")]
        except ValueError:
            raise UsageError(f"bad criteria list {args.criteria!r}") from None
        unknown = [n for n in numbers if n not in CRITERIA]
        if unknown:
            raise UsageError(f"unknown criteria {unknown}")
        results = []
        for n in numbers:
            res = CRITERIA[n]()
            print(res.line(), flush=True)
            results.append(res)
    else:
        results = run_suite(args.suite, report=lambda line: print(line, flush=True))
    failed = [r.number for r in results if not r.passed]
    if failed:
        print(f"error[validation]: {len(failed)} of {len(results)} criteria failed: {failed}", file=sys.stderr)
        return EXIT_CODES["validation"]
    print(f"all {len(results)} criteria passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lfi", description="Contrastive likelihood-free inference experiments.")
    p.add_argument("--log-level", default="WARNING", help="python logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run one experiment per seed, each in <out>/seed_<n>")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", required=True, help="a..b (inclusive) or a comma list")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1, help="experiments to run concurrently")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("validate", help="run an acceptance suite")
    v.add_argument("--suite", choices=["oracle", "fast", "full"], default="oracle")
    v.add_argument("--criteria", help="comma list of criterion numbers, overrides --suite")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to a category or re-raised
        cat = _category(exc)
        print(f"error[{cat}]: {exc}", file=sys.stderr)
        return EXIT_CODES[cat]


if __name__ == "__main__":
    sys.exit(main())
