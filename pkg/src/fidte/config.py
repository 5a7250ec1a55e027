"""Experiment configuration: presets, config files, validation.

A config fully determines one benchmark run: the data source (simulation
design or CSV), the model layout, the sampler schedules and budgets, the
methods to run, and the output location.  Presets carry the published
constants for the simulation studies; iteration budgets are halved at load
time unless paper scale is requested, so a default run finishes on a desk
machine while --paper-scale reproduces the full schedule exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import yaml

VALID_METHODS = ("efi", "cqr-naive", "cqr-exact", "cqr-inexact")
VALID_DESIGNS = ("linear_ate", "example1", "example2")

# iteration-budget fields subject to desk-scale halving
_BUDGET_FIELDS = ("k_burn", "m_keep", "init_iters")


@dataclass(frozen=True)
class ExperimentConfig:
    """One benchmark run, fully specified.

    Either design (with n_train / n_test) or csv + csv_schema must be set.
    k_burn / m_keep / init_iters are the counts actually run; presets fill
    them at the requested scale.  n_batches is the weight-update minibatch
    count per epoch (batch size = n_train // n_batches; 1 = full batch).
    """

    design: Optional[str] = None
    csv: Optional[str] = None
    csv_schema: Optional[dict] = None
    R: int = 1
    n_train: int = 250
    n_test: int = 0
    layout_kind: str = "linear_ate"
    tau_widths: tuple = (10, 10)
    c_widths: tuple = (10, 10)
    inverse_widths: tuple = (90, 30)
    out_scale: float = 1.0 / 25.0
    C_upsilon: float = 200000.0
    c_upsilon: float = 1e6
    gamma_map: dict = field(default_factory=lambda: {"rest": (54000.0, 1e6)})
    alpha_exp: float = 1.0 / 7.0
    varpi: float = 0.1
    eta: float = 500.0
    eps: float = 0.1
    k_burn: int = 5000
    m_keep: int = 50000
    thin: int = 5
    n_batches: int = 5
    init_iters: int = 0
    clip_norm: Optional[float] = 5000.0
    clip_iters: int = 100
    alphas: tuple = (0.05,)
    methods: tuple = ("efi",)
    seed: int = 0
    outdir: str = "out"
    paper_scale: bool = False
    trace: bool = False

    def __post_init__(self):
        if (self.design is None) == (self.csv is None):
            raise ValueError("config needs exactly one of design or csv")
        if self.design is not None and self.design not in VALID_DESIGNS:
            raise ValueError(
                f"design: unknown design {self.design!r}, expected one of {VALID_DESIGNS}"
            )
        if self.csv is not None and self.csv_schema is None:
            raise ValueError("csv_schema: required when loading from csv")
        if self.R < 1:
            raise ValueError(f"R: must be >= 1, got {self.R}")
        if not self.methods:
            raise ValueError("methods: must not be empty")
        for m in self.methods:
            if m not in VALID_METHODS:
                raise ValueError(f"methods: unknown method {m!r}, expected subset of {VALID_METHODS}")
        if any(m != "efi" for m in self.methods) and self.n_test < 1 and self.design is not None:
            raise ValueError("n_test: covariates-only methods need a test set (n_test >= 1)")
        if not self.alphas or any(not 0.0 < a < 1.0 for a in self.alphas):
            raise ValueError(f"alphas: levels must lie in (0, 1), got {self.alphas}")
        if self.n_train < 2:
            raise ValueError(f"n_train: must be >= 2, got {self.n_train}")
        if self.n_batches < 1 or self.n_batches > self.n_train:
            raise ValueError(f"n_batches: must be in [1, n_train], got {self.n_batches}")
        for name in ("k_burn", "m_keep", "init_iters", "clip_iters"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be nonnegative")
        if self.thin < 1:
            raise ValueError(f"thin: must be >= 1, got {self.thin}")


# Published constants per study.  Budgets here are the full-schedule values;
# load-time halving produces the desk-scale defaults.
PRESETS = {
    "linear_ate_n250": dict(
        design="linear_ate", R=20, n_train=250, n_test=0,
        layout_kind="linear_ate",
        C_upsilon=200000.0, c_upsilon=1e6,
        gamma_map={"rest": (54000.0, 1e6)},
        eta=500.0, eps=0.1, k_burn=5000, m_keep=50000, n_batches=5,
        init_iters=0, methods=("efi",),
    ),
    "linear_ate_n500": dict(
        design="linear_ate", R=20, n_train=500, n_test=0,
        layout_kind="linear_ate",
        C_upsilon=500000.0, c_upsilon=1e6,
        gamma_map={"rest": (54000.0, 1e6)},
        eta=500.0, eps=0.1, k_burn=5000, m_keep=50000, n_batches=5,
        init_iters=0, methods=("efi",),
    ),
    "linear_ate_n1000": dict(
        design="linear_ate", R=20, n_train=1000, n_test=0,
        layout_kind="linear_ate",
        C_upsilon=500000.0, c_upsilon=1e6,
        gamma_map={"rest": (54000.0, 1e6)},
        eta=500.0, eps=0.1, k_burn=5000, m_keep=50000, n_batches=5,
        init_iters=0, methods=("efi",),
    ),
    "example1": dict(
        design="example1", R=20, n_train=500, n_test=1000,
        layout_kind="dnn_tau_linear_c", tau_widths=(10, 10),
        C_upsilon=200000.0, c_upsilon=1e6,
        gamma_map={"tau_head": (20.0, 20000.0), "rest": (20000.0, 200000.0)},
        eta=10.0, eps=0.1, k_burn=20000, m_keep=50000, n_batches=5,
        init_iters=5000,
        methods=("efi", "cqr-naive", "cqr-exact", "cqr-inexact"),
    ),
    "example2": dict(
        design="example2", R=20, n_train=1000, n_test=1000,
        layout_kind="dnn_both", tau_widths=(10, 10), c_widths=(10, 10),
        C_upsilon=500000.0, c_upsilon=1e6,
        gamma_map={
            "tau_head": (2.5, 1e6),
            "c_head": (2.5, 1e6),
            "rest": (20000.0, 200000.0),
        },
        eta=10.0, eps=0.1, k_burn=20000, m_keep=50000, n_batches=5,
        init_iters=5000,
        methods=("efi", "cqr-naive", "cqr-exact", "cqr-inexact"),
    ),
}

_TUPLE_FIELDS = {"tau_widths", "c_widths", "inverse_widths", "alphas", "methods"}
_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name: str, value):
    """Normalize YAML-level values onto config field types, or complain."""
    if name not in _FIELD_TYPES:
        raise ValueError(f"{name}: unknown config field")
    if name in _TUPLE_FIELDS:
        if isinstance(value, (list, tuple)):
            return tuple(value)
        if isinstance(value, (str, int, float)):
            return (value,)
        raise ValueError(f"{name}: expected a list, got {type(value).__name__}")
    if name == "gamma_map":
        if not isinstance(value, dict):
            raise ValueError(f"{name}: expected a mapping of group -> [C, c]")
        out = {}
        for g, pair in value.items():
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise ValueError(f"{name}: group {g!r} needs a [C, c] pair")
            out[str(g)] = (float(pair[0]), float(pair[1]))
        return out
    if name == "csv_schema":
        if not isinstance(value, dict):
            raise ValueError(f"{name}: expected a mapping with keys y, t, x")
        return value
    return value


def preset_config(name: str, paper_scale: bool = False, **overrides) -> ExperimentConfig:
    """Expand a named preset into a config at the requested scale."""
    if name not in PRESETS:
        raise ValueError(f"preset: unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    values = dict(PRESETS[name])
    if not paper_scale:
        for f in _BUDGET_FIELDS:
            values[f] = values[f] // 2
    values["paper_scale"] = paper_scale
    values.update(overrides)
    return ExperimentConfig(**values)


def load_config(path: str, paper_scale: Optional[bool] = None) -> ExperimentConfig:
    """Read a YAML config file, expanding its preset if one is named.

    File keys override preset values.  paper_scale, when not None, overrides
    the file's own setting (the --paper-scale flag).
    """
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must hold a mapping at top level")
    preset = raw.pop("preset", None)
    scale = raw.pop("paper_scale", False)
    if paper_scale is not None:
        scale = paper_scale
    overrides = {}
    for key, value in raw.items():
        overrides[str(key)] = _coerce(str(key), value)
    if preset is not None:
        return preset_config(str(preset), paper_scale=bool(scale), **overrides)
    overrides["paper_scale"] = bool(scale)
    return ExperimentConfig(**overrides)
