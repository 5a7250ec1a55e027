"""Command line for dataset simulation, fitting, baselines, and benchmarks.

Subcommands:
  simulate   draw one dataset from a configured design and write it as CSV
  fit        one EFI run on replication 0's data; writes chain and intervals
  cqr        the conformal baselines only, full replication loop
  benchmark  every configured method, full replication loop, summary JSON
  report     re-score an existing intervals.csv

Every subcommand accepts --config (a YAML file or a preset name), --seed,
--out, --paper-scale, and --workers, although not all of them use workers.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

from .config import PRESETS, ExperimentConfig, load_config, preset_config
from .runner import (
    _efi_results,
    _replication_data,
    replication_ints,
    rescore,
    run_experiment,
    run_replication,
    write_rows_csv,
)


def _resolve_config(args) -> ExperimentConfig:
    if args.config is None:
        raise SystemExit("a --config file or preset name is required")
    if os.path.exists(args.config):
        cfg = load_config(args.config, paper_scale=args.paper_scale or None)
    elif args.config in PRESETS:
        cfg = preset_config(args.config, paper_scale=bool(args.paper_scale))
    else:
        raise SystemExit(
            f"--config {args.config!r} is neither a file nor one of {sorted(PRESETS)}"
        )
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, outdir=args.out)
    return cfg


def _write_dataset_csv(data, path) -> None:
    cols = [f"x{j + 1}" for j in range(data.d)] + ["t", "y"]
    extra = []
    for name in ("y0", "y1", "tau_true", "z_true"):
        if getattr(data, name, None) is not None:
            extra.append(name)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols + extra)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.x[i]]
            row += [repr(float(data.t[i])), repr(float(data.y[i]))]
            row += [repr(float(getattr(data, name)[i])) for name in extra]
            wr.writerow(row)


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    if cfg.design is None:
        raise SystemExit("simulate needs a design-based config, not a csv one")
    train, test = _replication_data(cfg, replication_ints(cfg.seed, 0))
    os.makedirs(cfg.outdir, exist_ok=True)
    _write_dataset_csv(train, os.path.join(cfg.outdir, "train.csv"))
    if test is not None:
        _write_dataset_csv(test, os.path.join(cfg.outdir, "test.csv"))
    print(f"wrote train.csv ({train.n} rows) to {cfg.outdir}")
    return 0


def cmd_fit(args) -> int:
    cfg = _resolve_config(args)
    if "efi" not in cfg.methods:
        cfg = replace(cfg, methods=("efi",) + cfg.methods)
    os.makedirs(cfg.outdir, exist_ok=True)
    ints = replication_ints(cfg.seed, 0)
    train, _ = _replication_data(cfg, ints)
    chain, layout = _efi_results(cfg, train, ints, cfg.outdir if cfg.trace else None)
    with open(os.path.join(cfg.outdir, "chain.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"theta_{j}" for j in range(layout.theta_dim)] + ["sigma", "energy"])
        for k in range(chain.n_draws):
            wr.writerow(
                [repr(float(v)) for v in chain.draws[k]]
                + [repr(float(chain.sigmas[k])), repr(float(chain.energies[k]))]
            )
    rep = run_replication(replace(cfg, methods=("efi",)), 0)
    write_rows_csv(rep["rows"], os.path.join(cfg.outdir, "intervals.csv"))
    print(f"wrote chain.csv ({chain.n_draws} draws) and intervals.csv to {cfg.outdir}")
    return 0


def cmd_cqr(args) -> int:
    cfg = _resolve_config(args)
    methods = tuple(m for m in cfg.methods if m.startswith("cqr-"))
    if not methods:
        methods = ("cqr-naive", "cqr-exact", "cqr-inexact")
    cfg = replace(cfg, methods=methods)
    run_experiment(cfg, workers=args.workers)
    print(f"wrote summary.json to {cfg.outdir}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _resolve_config(args)
    run_experiment(cfg, workers=args.workers)
    print(f"wrote summary.json to {cfg.outdir}")
    return 0


def cmd_report(args) -> int:
    scores = rescore(args.intervals)
    text = json.dumps(scores, sort_keys=True, indent=2)
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            fh.write(text)
            fh.write("\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fidte", description="fiducial treatment-effect experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file or preset name")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the config output directory")
        p.add_argument(
            "--paper-scale", action="store_true",
            help="use full published iteration budgets instead of desk-scale halves",
        )
        p.add_argument("--workers", type=int, default=1, help="parallel replications")

    p = sub.add_parser("simulate", help="write one replication's datasets as CSV")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="single EFI run: chain draws plus intervals")
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cqr", help="conformal baselines only")
    common(p)
    p.set_defaults(func=cmd_cqr)

    p = sub.add_parser("benchmark", help="all configured methods, all replications")
    common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("report", help="re-score an intervals.csv")
    common(p)
    p.add_argument("intervals", help="path to an intervals.csv written by this tool")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
