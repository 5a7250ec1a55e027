"""Replication harness behind the command line.

One experiment = R independent replications.  Each replication draws its own
dataset (or reuses the CSV one), runs every configured method, and scores the
resulting intervals against the simulation truth.  Replication r derives all
of its randomness from a splittable seed sequence keyed by (seed, r), so any
single replication can be re-run in isolation and workers can run them in
any order without changing results.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict
from multiprocessing import get_context
from typing import Optional

import numpy as np

from .config import ExperimentConfig
from .cqr import cqr_ite
from .datagen import GenSpec, generate
from .engine import Dataset, ThetaLayout
from .inference import (
    PredictionInterval,
    assign_cases,
    ate_interval,
    ite_intervals,
    ite_truth,
    pehe,
    score_intervals,
)
from .nn import MlpSpec
from .sampler import RunConfig, ScheduleParams, run_efi

# fixed init seeds for the data-model networks: the warm-start blocks are
# part of the model family, not of the per-replication randomness
TAU_NET_SEED = 5
C_NET_SEED = 6


def load_csv_dataset(path: str, schema: dict) -> Dataset:
    """Read (x, t, y) columns from a CSV file per the given schema.

    schema maps "y" and "t" to column names and "x" to a list of column
    names.  The treatment column must be binary 0/1.
    """
    for key in ("y", "t", "x"):
        if key not in schema:
            raise ValueError(f"csv schema is missing the {key!r} entry")
    x_cols = list(schema["x"])
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in [schema["y"], schema["t"], *x_cols] if c not in header]
        if missing:
            raise ValueError(f"csv file {path} is missing columns {missing}")
        xs, ts, ys = [], [], []
        for i, row in enumerate(reader, start=2):  # header is line 1
            def cell(col):
                raw = row[col]
                try:
                    return float(raw)
                except (TypeError, ValueError):
                    raise ValueError(
                        f"non-numeric value {raw!r} at line {i}, column {col!r}"
                    ) from None
            tv = cell(schema["t"])
            if tv not in (0.0, 1.0):
                raise ValueError(
                    f"treatment column {schema['t']!r} must be binary 0/1, "
                    f"got {tv} at line {i}"
                )
            xs.append([cell(c) for c in x_cols])
            ts.append(tv)
            ys.append(cell(schema["y"]))
    if not ys:
        raise ValueError(f"csv file {path} holds no data rows")
    return Dataset(
        x=np.array(xs, dtype=np.float64),
        t=np.array(ts, dtype=np.float64),
        y=np.array(ys, dtype=np.float64),
    )


def build_layout(config: ExperimentConfig, d: int) -> ThetaLayout:
    if config.layout_kind == "linear_ate":
        return ThetaLayout("linear_ate", c_spec=d + 1)
    tau_spec = MlpSpec((d, *config.tau_widths, 1), seed=TAU_NET_SEED)
    if config.layout_kind == "dnn_tau_linear_c":
        return ThetaLayout("dnn_tau_linear_c", c_spec=d + 1, tau_spec=tau_spec)
    if config.layout_kind == "dnn_both":
        c_spec = MlpSpec((d, *config.c_widths, 1), seed=C_NET_SEED)
        return ThetaLayout("dnn_both", c_spec=c_spec, tau_spec=tau_spec)
    raise ValueError(f"unknown layout kind {config.layout_kind!r}")


def build_schedule(config: ExperimentConfig) -> ScheduleParams:
    return ScheduleParams(
        C_upsilon=config.C_upsilon,
        c_upsilon=config.c_upsilon,
        gamma_map=dict(config.gamma_map),
        alpha_exp=config.alpha_exp,
        varpi=config.varpi,
    )


def replication_ints(seed: int, r: int) -> list[int]:
    """Four independent 32-bit seeds for replication r of a run."""
    ss = np.random.SeedSequence(seed, spawn_key=(r,))
    return [int(v) for v in ss.generate_state(4)]


def _replication_data(config: ExperimentConfig, ints) -> tuple[Dataset, Optional[Dataset]]:
    if config.csv is not None:
        return load_csv_dataset(config.csv, config.csv_schema), None
    train = generate(GenSpec(config.design, config.n_train, seed=ints[0]))
    test = None
    if config.n_test > 0:
        test = generate(GenSpec(config.design, config.n_test, seed=ints[1]))
    return train, test


def _efi_results(config, train, ints, rep_dir):
    layout = build_layout(config, train.d)
    inv_spec = MlpSpec(
        (train.d + 3, *config.inverse_widths, layout.theta_dim),
        seed=ints[2],
        out_scale=config.out_scale,
    )
    m_batch = None
    if config.n_batches > 1:
        m_batch = max(1, train.n // config.n_batches)
    run_cfg = RunConfig(
        eta=config.eta,
        eps=config.eps,
        k_burn=config.k_burn,
        m_keep=config.m_keep,
        thin=config.thin,
        m_batch=m_batch,
        init_iters=config.init_iters,
        clip_norm=config.clip_norm,
        clip_iters=config.clip_iters,
        seed=ints[2],
    )
    sched = build_schedule(config)
    trace_fh = None
    if config.trace and rep_dir is not None:
        trace_fh = open(os.path.join(rep_dir, "trace_efi.csv"), "w", newline="")
    try:
        chain = run_efi(train, layout, inv_spec, sched, run_cfg, trace=trace_fh)
    finally:
        if trace_fh is not None:
            trace_fh.close()
    return chain, layout


def _truth_for(iv: PredictionInterval, truth_vec, ate_truth) -> Optional[float]:
    if iv.case == "ATE":
        return ate_truth
    if truth_vec is None or iv.subject_id < 0:
        return None
    return float(truth_vec[iv.subject_id])


def run_replication(config: ExperimentConfig, r: int) -> dict:
    """All methods on replication r's data; returns metrics and interval rows."""
    ints = replication_ints(config.seed, r)
    try:
        train, test = _replication_data(config, ints)
        truth_vec = None
        ate_truth = None
        if test is not None and test.y1 is not None and test.y0 is not None:
            truth_vec = ite_truth(test)
        if config.design == "linear_ate" and train.tau_true is not None:
            ate_truth = float(train.tau_true[0])

        chain = layout = None
        if "efi" in config.methods:
            chain, layout = _efi_results(config, train, ints, None)

        rows = []
        metrics = {}
        for method in config.methods:
            per_alpha = {}
            for a_idx, alpha in enumerate(config.alphas):
                if method == "efi":
                    if config.layout_kind == "linear_ate":
                        ivs = [ate_interval(chain, layout, alpha=alpha)]
                    else:
                        if test is None:
                            raise RuntimeError("treatment-effect intervals need a test set")
                        cases = assign_cases(test, np.random.default_rng(ints[3]))
                        ivs = ite_intervals(
                            chain, layout, test, alpha=alpha,
                            rng=np.random.default_rng([ints[3], a_idx]),
                            cases=cases,
                        )
                else:
                    if test is None:
                        raise RuntimeError("covariates-only methods need a test set")
                    mode = method.split("-", 1)[1]
                    ivs = cqr_ite(train, test, alpha=alpha, mode=mode, seed=ints[3])
                truths = [_truth_for(iv, truth_vec, ate_truth) for iv in ivs]

                for iv, tv in zip(ivs, truths):
                    rows.append((method, alpha, iv, tv))
                if len(ivs) == 1 and ivs[0].case == "ATE":
                    iv, tv = ivs[0], truths[0]
                    per_alpha[repr(float(alpha))] = {
                        "coverage": None if tv is None else float(iv.contains(tv)),
                        "mean_length": iv.length,
                        "per_case": {},
                    }
                elif truth_vec is not None:
                    rep = score_intervals(ivs, truth_vec)
                    per_alpha[repr(float(alpha))] = {
                        "coverage": rep.coverage,
                        "mean_length": rep.mean_length,
                        "per_case": rep.per_case,
                    }
                else:
                    per_alpha[repr(float(alpha))] = {
                        "coverage": None,
                        "mean_length": float(np.mean([iv.length for iv in ivs])),
                        "per_case": {},
                    }
            entry = {"alphas": per_alpha}
            if method == "efi" and config.layout_kind != "linear_ate" and test is not None \
                    and test.tau_true is not None:
                entry["pehe"] = pehe(chain, layout, test, treated_only=True)
            metrics[method] = entry
        return {"r": r, "metrics": metrics, "rows": rows}
    except RuntimeError as e:
        raise RuntimeError(f"replication {r}: {e}") from e


def write_rows_csv(rows, path) -> None:
    """Interval rows of one replication, one line per interval."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["method", "alpha", "subject_id", "case", "lower", "upper", "truth", "covered"])
        for method, alpha, iv, tv in rows:
            base = [method, repr(float(alpha)), iv.subject_id, iv.case, repr(iv.lower), repr(iv.upper)]
            if tv is None:
                wr.writerow(base + ["", ""])
            else:
                wr.writerow(base + [repr(float(tv)), int(iv.contains(float(tv)))])


def _mean_sd(values) -> dict:
    arr = np.array([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return {"mean": None, "sd": None}
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(np.mean(arr)), "sd": sd}


def summarize(config: ExperimentConfig, reps: list[dict]) -> dict:
    """Cross-replication summary: per method and level, mean and sd."""
    methods = {}
    for method in config.methods:
        blocks = {}
        for alpha in config.alphas:
            key = repr(float(alpha))
            cov = [rep["metrics"][method]["alphas"][key]["coverage"] for rep in reps]
            lng = [rep["metrics"][method]["alphas"][key]["mean_length"] for rep in reps]
            blocks[key] = {
                "coverage": _mean_sd(cov),
                "length": _mean_sd(lng),
                "per_replication": [
                    {
                        "r": rep["r"],
                        "coverage": rep["metrics"][method]["alphas"][key]["coverage"],
                        "mean_length": rep["metrics"][method]["alphas"][key]["mean_length"],
                    }
                    for rep in reps
                ],
            }
        entry = {"alphas": blocks}
        pehes = [rep["metrics"][method].get("pehe") for rep in reps]
        if any(p is not None for p in pehes):
            entry["pehe"] = _mean_sd(pehes)
            entry["pehe"]["per_replication"] = [
                {"r": rep["r"], "pehe": rep["metrics"][method].get("pehe")} for rep in reps
            ]
        methods[method] = entry
    cfg = asdict(config)
    for name in ("tau_widths", "c_widths", "inverse_widths", "alphas", "methods"):
        cfg[name] = list(cfg[name])
    cfg["gamma_map"] = {g: list(pair) for g, pair in cfg["gamma_map"].items()}
    return {"config": cfg, "replications": config.R, "methods": methods}


def _rep_worker(args):
    config, r = args
    return run_replication(config, r)


def run_experiment(config: ExperimentConfig, workers: int = 1) -> dict:
    """Run all replications, write per-replication CSVs and summary JSON."""
    os.makedirs(config.outdir, exist_ok=True)
    jobs = [(config, r) for r in range(config.R)]
    if workers > 1 and config.R > 1:
        with get_context("fork").Pool(min(workers, config.R)) as pool:
            reps = pool.map(_rep_worker, jobs)
    else:
        reps = [_rep_worker(job) for job in jobs]
    reps.sort(key=lambda rep: rep["r"])
    for rep in reps:
        rep_dir = os.path.join(config.outdir, f"rep_{rep['r']:03d}")
        os.makedirs(rep_dir, exist_ok=True)
        write_rows_csv(rep["rows"], os.path.join(rep_dir, "intervals.csv"))
    summary = summarize(config, reps)
    with open(os.path.join(config.outdir, "summary.json"), "w") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=2))
        fh.write("\n")
    return summary


def rescore(intervals_path: str) -> dict:
    """Re-read an intervals.csv and recompute coverage and length per block.

    The covered flag is recomputed from (lower, upper, truth); rows without
    truth contribute to lengths only.
    """
    groups = {}
    with open(intervals_path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"method", "alpha", "case", "lower", "upper", "truth"}
        have = set(reader.fieldnames or [])
        if not needed <= have:
            raise ValueError(f"intervals file is missing columns {sorted(needed - have)}")
        for row in reader:
            key = (row["method"], row["alpha"], row["case"])
            lo, hi = float(row["lower"]), float(row["upper"])
            tv = float(row["truth"]) if row["truth"] != "" else None
            groups.setdefault(key, []).append((lo, hi, tv))
    out = {}
    for (method, alpha, case), triples in sorted(groups.items()):
        lengths = [hi - lo for lo, hi, _ in triples]
        scored = [(lo, hi, tv) for lo, hi, tv in triples if tv is not None]
        block = {
            "n": len(triples),
            "mean_length": float(np.mean(lengths)),
            "coverage": (
                float(np.mean([lo <= tv <= hi for lo, hi, tv in scored])) if scored else None
            ),
        }
        out.setdefault(method, {}).setdefault(alpha, {})[case] = block
    return out
