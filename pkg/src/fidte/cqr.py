"""Conformalized quantile regression baselines for individual effects.

A single network with a treatment input slot and two output neurons learns
the lower and upper conditional quantiles by pinball loss.  Split-conformal
calibration per arm expands the raw band by the finite-sample score quantile.
Three constructions cover the covariates-only test case: per-arm bands
differenced (naive), interval-outcome conformal on a second fold (exact), and
median regression of the fold-two interval endpoints (inexact, no coverage
guarantee).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine import Dataset
from .inference import PredictionInterval
from .nn import MlpParams, MlpSpec, mlp_backward_batch, mlp_forward_batch, mlp_init, param_count


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 3000
    lr: float = 0.02

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError("iters must be positive")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")


@dataclass
class QuantileModel:
    """Two-output quantile net over (x, t) with its input/output scaling."""

    net: MlpParams
    alpha: float
    f_mean: np.ndarray
    f_sd: np.ndarray
    y_mean: np.ndarray
    y_sd: np.ndarray

    def __post_init__(self):
        if self.net.spec.d_out != 2:
            raise ValueError(f"quantile net needs 2 outputs, got {self.net.spec.d_out}")


@dataclass(frozen=True)
class ConformalCorrection:
    s_hat: Dict[int, float] = field(default_factory=dict)
    alpha: float = 0.05

    def __post_init__(self):
        for arm, s in self.s_hat.items():
            if math.isnan(s):
                raise ValueError(f"correction for arm {arm} is NaN")


def _standardize_columns(mat: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = mat.mean(axis=0)
    sd = mat.std(axis=0)
    sd = np.where(sd < 1e-9, 1.0, sd)
    return (mat - mean) / sd, mean, sd


def _fit_pinball_net(
    features: np.ndarray,
    targets: np.ndarray,
    qs: Sequence[float],
    spec: MlpSpec,
    config: TrainConfig,
) -> MlpParams:
    """Full-batch Adam on the summed pinball losses, one level per output."""
    n = features.shape[0]
    qvec = np.asarray(qs, dtype=np.float64)[None, :]
    net = mlp_init(spec)
    flat = net.flat.copy()
    m = np.zeros_like(flat)
    v = np.zeros_like(flat)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for step in range(1, config.iters + 1):
        pred = mlp_forward_batch(net, features)
        # d/du of rho_q(y - u) is 1{y < u} - q
        out_grad = ((targets < pred).astype(np.float64) - qvec) / n
        grad, _ = mlp_backward_batch(net, features, out_grad)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad**2
        mh = m / (1.0 - b1**step)
        vh = v / (1.0 - b2**step)
        flat = flat - config.lr * mh / (np.sqrt(vh) + eps)
        net = MlpParams(spec, flat)
    return net


def _features(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.column_stack([x, t.astype(np.float64)])


def pinball_fit(
    train: Dataset,
    alpha: float,
    spec: Optional[MlpSpec] = None,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
) -> QuantileModel:
    """Quantile net for the (alpha/2, 1-alpha/2) conditional quantiles of y."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if spec is None:
        spec = MlpSpec((train.d + 1, 10, 10, 2), seed=seed)
    raw = _features(train.x, train.t)
    feats, f_mean, f_sd = _standardize_columns(raw)
    ys, y_mean, y_sd = _standardize_columns(train.y[:, None])
    targets = np.repeat(ys, 2, axis=1)
    net = _fit_pinball_net(feats, targets, (alpha / 2.0, 1.0 - alpha / 2.0), spec, config)
    return QuantileModel(net=net, alpha=alpha, f_mean=f_mean, f_sd=f_sd, y_mean=y_mean, y_sd=y_sd)


def predict_quantiles(model: QuantileModel, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Per-row (lower, upper) in data units, sorted to undo quantile crossing."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    feats = (_features(x, t) - model.f_mean) / model.f_sd
    out = mlp_forward_batch(model.net, feats) * model.y_sd + model.y_mean
    return np.sort(out, axis=1)


def conformal_scores(model: QuantileModel, valid: Dataset, arm: int) -> np.ndarray:
    """Signed exceedance of each arm-t validation outcome over the raw band."""
    keep = valid.t == arm
    if not np.any(keep):
        raise ValueError(f"validation set has no rows with arm {arm}")
    q = predict_quantiles(model, valid.x[keep], np.full(int(keep.sum()), arm))
    y = valid.y[keep]
    return np.maximum(q[:, 0] - y, y - q[:, 1])


def calibrate(scores: np.ndarray, alpha: float) -> float:
    """Finite-sample score quantile: the ceil((n+1)(1-alpha))-th order statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot calibrate on an empty score set")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = scores.size
    rank = math.ceil((n + 1) * (1.0 - alpha))
    if rank > n:
        return float("inf")
    return float(np.sort(scores)[rank - 1])


def _band(
    model: QuantileModel, corr: ConformalCorrection, x: np.ndarray, arm: int
) -> Tuple[np.ndarray, np.ndarray]:
    if arm not in corr.s_hat:
        raise ValueError(f"no calibrated correction for arm {arm}")
    x = np.atleast_2d(x)
    q = predict_quantiles(model, x, np.full(x.shape[0], arm))
    s = corr.s_hat[arm]
    return q[:, 0] - s, q[:, 1] + s


def cqr_counterfactual(
    model: QuantileModel,
    corr: ConformalCorrection,
    x: np.ndarray,
    arm: int,
    alpha: float,
    subject_id: int = -1,
) -> PredictionInterval:
    """Conformal interval for Y(arm) at one covariate row.

    Serves case Ic when arm = 1 (shift by the observed control outcome) and
    case It when arm = 0, per the handling of observed-arm subjects.
    """
    lo, hi = _band(model, corr, np.atleast_2d(x), arm)
    return PredictionInterval(
        subject_id=subject_id,
        case="Ic" if arm == 1 else "It",
        lower=float(lo[0]),
        upper=float(hi[0]),
        alpha=alpha,
    )


def _split(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    half = n // 2
    return perm[:half], perm[half:]


def _arm_bands(
    train: Dataset,
    level_alpha: float,
    rng: np.random.Generator,
    config: TrainConfig,
    seed: int,
) -> Tuple[QuantileModel, ConformalCorrection]:
    """Split-conformal per-arm outcome bands at level 1 - level_alpha."""
    fit_idx, cal_idx = _split(train.n, rng)
    model = pinball_fit(train.subset(fit_idx), level_alpha, config=config, seed=seed)
    cal = train.subset(cal_idx)
    corr = ConformalCorrection(
        s_hat={arm: calibrate(conformal_scores(model, cal, arm), level_alpha) for arm in (0, 1)},
        alpha=level_alpha,
    )
    return model, corr


def _interval_outcomes(
    fold2: Dataset, model: QuantileModel, corr: ConformalCorrection
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row ITE interval outcomes from observed arms and counterfactual bands."""
    lo1, hi1 = _band(model, corr, fold2.x, 1)
    lo0, hi0 = _band(model, corr, fold2.x, 0)
    treated = fold2.t == 1
    c_lo = np.where(treated, fold2.y - hi0, lo1 - fold2.y)
    c_hi = np.where(treated, fold2.y - lo0, hi1 - fold2.y)
    return c_lo, c_hi


def cqr_ite(
    train: Dataset,
    test: Dataset,
    alpha: float = 0.05,
    mode: str = "naive",
    seed: int = 0,
    config: TrainConfig = TrainConfig(),
) -> List[PredictionInterval]:
    """Covariates-only ITE intervals for every test row, tagged Im."""
    if mode not in ("naive", "exact", "inexact"):
        raise ValueError(f"unknown mode {mode!r}, expected naive, exact, or inexact")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    rng = np.random.default_rng(seed)

    if mode == "naive":
        # per-arm bands at level 1 - alpha/2, differenced
        model, corr = _arm_bands(train, alpha / 2.0, rng, config, seed)
        lo1, hi1 = _band(model, corr, test.x, 1)
        lo0, hi0 = _band(model, corr, test.x, 0)
        lower, upper = lo1 - hi0, hi1 - lo0
    else:
        fold1_idx, fold2_idx = _split(train.n, rng)
        model, corr = _arm_bands(train.subset(fold1_idx), alpha / 2.0, rng, config, seed)
        fold2 = train.subset(fold2_idx)
        c_lo, c_hi = _interval_outcomes(fold2, model, corr)
        if not (np.all(np.isfinite(c_lo)) and np.all(np.isfinite(c_hi))):
            raise ValueError(
                "calibration returned an infinite band, so interval outcomes "
                "cannot be regressed; use more training rows or a larger alpha"
            )
        if mode == "inexact":
            # median regression of both endpoints, no second conformal step
            feats, f_mean, f_sd = _standardize_columns(fold2.x)
            targets, t_mean, t_sd = _standardize_columns(np.column_stack([c_lo, c_hi]))
            spec = MlpSpec((fold2.d, 10, 10, 2), seed=seed + 1)
            net = _fit_pinball_net(feats, targets, (0.5, 0.5), spec, config)
            out = mlp_forward_batch(net, (test.x - f_mean) / f_sd) * t_sd + t_mean
            out = np.sort(out, axis=1)
            lower, upper = out[:, 0], out[:, 1]
        else:
            # least-squares endpoint surfaces on one half, interval-outcome
            # conformal scores on the other
            reg_idx, cal_idx = _split(fold2.n, rng)
            design = np.column_stack([np.ones(len(reg_idx)), fold2.x[reg_idx]])
            coef_lo, *_ = np.linalg.lstsq(design, c_lo[reg_idx], rcond=None)
            coef_hi, *_ = np.linalg.lstsq(design, c_hi[reg_idx], rcond=None)
            cal_design = np.column_stack([np.ones(len(cal_idx)), fold2.x[cal_idx]])
            s = np.maximum(
                cal_design @ coef_lo - c_lo[cal_idx], c_hi[cal_idx] - cal_design @ coef_hi
            )
            s_hat = calibrate(s, alpha)
            test_design = np.column_stack([np.ones(test.n), test.x])
            lower = test_design @ coef_lo - s_hat
            upper = test_design @ coef_hi + s_hat

    # crossed endpoints mean an empty interval; report the degenerate point
    swap = lower > upper
    if np.any(swap):
        mid = 0.5 * (lower[swap] + upper[swap])
        lower = np.where(swap, mid, lower)
        upper = np.where(swap, mid, upper)

    return [
        PredictionInterval(subject_id=i, case="Im", lower=float(lower[i]),
                           upper=float(upper[i]), alpha=alpha)
        for i in range(test.n)
    ]
