"""Command line: ``run``, ``sweep``, ``summarize`` and ``validate``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys

from ..errors import ConfigError
from .config import load_config, load_sweep, reset_period
from .experiment import format_tables, run_experiment, summarize_directory

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="altnet-lab", description="Alternating-network reset experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override the config's output_dir")
    s = sub.add_parser("sweep", help="run the cartesian product of strategies x replay ratios x seeds")
    s.add_argument("config")
    s.add_argument("--output-dir")
    m = sub.add_parser("summarize", help="rebuild AUC and fixed-budget tables from run directories")
    m.add_argument("directory")
    m.add_argument("--json", action="store_true", help="emit the recomputed summaries as JSON")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    return p


def _run(cfgs, output_dir) -> int:
    failed = False
    for cfg in cfgs:
        record = run_experiment(cfg, output_dir, progress=_say)
        auc = record.summary.get("normalized_auc")
        print(f"{cfg.label}: {record.run_dir} "
              f"(median AUC {'n/a' if auc is None else round(auc['median'], 3)})")
        failed |= not record.ok
    return EXIT_RUNTIME if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            period = reset_period(cfg)
            print(f"ok: {cfg.label}, reset period {period if period is not None else 'none'} env steps")
            return EXIT_OK
        if args.command == "run":
            return _run([load_config(args.config)], args.output_dir)
        if args.command == "sweep":
            return _run(load_sweep(args.config), args.output_dir)
        if args.command == "summarize":
            runs = summarize_directory(args.directory)
            if args.json:
                print(json.dumps([{k: r[k] for k in ("label", "summary", "per_seed")} for r in runs],
                                 indent=2, sort_keys=True, default=str))
            else:
                print(format_tables(runs))
            return EXIT_OK
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures of any kind map to exit code 2
        _say(f"runtime failure: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
