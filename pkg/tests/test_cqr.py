import numpy as np
import pytest
from scipy import stats

from fidte.cqr import (
    ConformalCorrection,
    QuantileModel,
    TrainConfig,
    calibrate,
    conformal_scores,
    cqr_counterfactual,
    cqr_ite,
    pinball_fit,
    predict_quantiles,
)
from fidte.datagen import GenSpec, generate
from fidte.engine import Dataset
from fidte.nn import MlpSpec, mlp_init

FAST = TrainConfig(iters=600, lr=0.05)


def flat_data(rng, n, sd=1.0):
    # outcome independent of x: true quantiles are the same everywhere
    x = rng.uniform(size=(n, 2))
    t = (rng.random(n) < 0.5).astype(float)
    y = rng.normal(scale=sd, size=n)
    return Dataset(x=x, t=t, y=y)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iters=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_quantile_model_needs_two_outputs():
    net = mlp_init(MlpSpec((3, 4, 1), seed=0))
    with pytest.raises(ValueError, match="2 outputs"):
        QuantileModel(
            net=net, alpha=0.1,
            f_mean=np.zeros(3), f_sd=np.ones(3),
            y_mean=np.zeros(1), y_sd=np.ones(1),
        )


def test_conformal_correction_rejects_nan():
    with pytest.raises(ValueError, match="NaN"):
        ConformalCorrection(s_hat={1: float("nan")})


def test_pinball_fit_constant_outcome():
    # fixed-step subgradient descent dithers at a floor proportional to the
    # learning rate, so the fit lands near the point mass but not on it
    rng = np.random.default_rng(0)
    data = flat_data(rng, 120, sd=1.0)
    data = Dataset(x=data.x, t=data.t, y=np.full(120, 3.25))
    model = pinball_fit(data, alpha=0.1, config=FAST)
    q = predict_quantiles(model, data.x[:20], data.t[:20])
    np.testing.assert_allclose(q, 3.25, atol=0.12)


def test_pinball_fit_gaussian_quantiles():
    # y ~ N(0,1) regardless of x, so the fitted (0.05, 0.95) curves should be
    # calibrated on fresh outcomes and average near the normal quantiles
    rng = np.random.default_rng(1)
    data = flat_data(rng, 4000)
    model = pinball_fit(data, alpha=0.1, config=TrainConfig(iters=2000, lr=0.05))
    grid = rng.uniform(size=(2000, 2))
    q = predict_quantiles(model, grid, np.zeros(2000))
    zq = stats.norm.ppf(0.95)
    assert abs(np.mean(q[:, 0]) + zq) < 0.12
    assert abs(np.mean(q[:, 1]) - zq) < 0.12
    fresh = rng.standard_normal(2000)
    assert 0.01 < np.mean(fresh < q[:, 0]) < 0.10
    assert 0.90 < np.mean(fresh < q[:, 1]) < 0.99


def test_predict_quantiles_never_cross():
    # an undertrained net can emit crossed raw outputs; the per-row sort has
    # to leave lower <= upper everywhere
    rng = np.random.default_rng(2)
    data = flat_data(rng, 60)
    model = pinball_fit(data, alpha=0.5, config=TrainConfig(iters=2, lr=0.5))
    q = predict_quantiles(model, rng.uniform(size=(200, 2)), np.zeros(200))
    assert np.all(q[:, 0] <= q[:, 1])


def exact_model(lo, hi):
    # zero-weight net emits (0, 0); shifting by y_mean and scaling y_sd makes
    # a model with constant band [lo, hi] at alpha irrelevant for these tests
    spec = MlpSpec((3, 2, 2), seed=0)
    net = mlp_init(spec)
    net.flat[:] = 0.0
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
    # bias of the output layer sets (-1, +1) before scaling
    net.flat[-2:] = np.array([-1.0, 1.0]) if half > 0 else np.zeros(2)
    return QuantileModel(
        net=net, alpha=0.1,
        f_mean=np.zeros(3), f_sd=np.ones(3),
        y_mean=np.array([mid]), y_sd=np.array([half if half > 0 else 1.0]),
    )


def test_conformal_scores_sign_convention():
    model = exact_model(-1.0, 1.0)
    x = np.zeros((3, 2))
    valid = Dataset(x=x, t=np.ones(3), y=np.array([0.0, 1.0, 2.5]))
    s = conformal_scores(model, valid, arm=1)
    # inside the band -> negative, on the upper edge -> zero, outside -> gap
    np.testing.assert_allclose(s, [-1.0, 0.0, 1.5], atol=1e-12)


def test_conformal_scores_requires_arm_rows():
    model = exact_model(-1.0, 1.0)
    valid = Dataset(x=np.zeros((2, 2)), t=np.zeros(2), y=np.zeros(2))
    with pytest.raises(ValueError, match="no rows with arm 1"):
        conformal_scores(model, valid, arm=1)


def test_calibrate_order_statistic():
    assert calibrate(np.zeros(99), alpha=0.05) == 0.0
    # with scores 1..99 and alpha 0.05 the ceil(100 * 0.95) = 95th order
    # statistic is picked
    assert calibrate(np.arange(1.0, 100.0), alpha=0.05) == 95.0
    # too few scores for the requested level: rank 6 of 5 -> unbounded
    assert calibrate(np.arange(5.0), alpha=0.05) == float("inf")


def test_calibrate_monotone_in_alpha():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=40)
    vals = [calibrate(scores, a) for a in (0.01, 0.05, 0.1, 0.25, 0.5)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_calibrate_validation():
    with pytest.raises(ValueError, match="empty"):
        calibrate(np.array([]), alpha=0.1)
    with pytest.raises(ValueError, match="alpha"):
        calibrate(np.ones(3), alpha=1.0)


def test_cqr_counterfactual_applies_correction():
    model = exact_model(-1.0, 1.0)
    x = np.zeros(2)
    raw = cqr_counterfactual(model, ConformalCorrection({1: 0.0}), x, 1, 0.1)
    widened = cqr_counterfactual(model, ConformalCorrection({1: 2.0}), x, 1, 0.1)
    assert (raw.lower, raw.upper) == (-1.0, 1.0)
    assert (widened.lower, widened.upper) == (-3.0, 3.0)
    assert raw.case == "Ic"
    assert cqr_counterfactual(model, ConformalCorrection({0: 0.0}), x, 0, 0.1).case == "It"


def test_cqr_counterfactual_missing_arm():
    model = exact_model(-1.0, 1.0)
    with pytest.raises(ValueError, match="no calibrated correction"):
        cqr_counterfactual(model, ConformalCorrection({0: 0.0}), np.zeros(2), 1, 0.1)


def test_split_conformal_marginal_coverage():
    # the finite-sample guarantee P(y in band) >= 1 - alpha holds for any
    # regressor, even a deliberately undertrained one; check the Monte Carlo
    # coverage over exchangeable replications against a 3-sigma binomial band
    alpha, reps = 0.2, 300
    rng = np.random.default_rng(4)
    hits = 0
    cheap = TrainConfig(iters=40, lr=0.05)
    for _ in range(reps):
        x = rng.uniform(size=(41, 2))
        y = np.sin(3.0 * x[:, 0]) + rng.normal(scale=0.5, size=41)
        t = np.ones(41)
        fit = Dataset(x=x[:20], t=t[:20], y=y[:20])
        cal = Dataset(x=x[20:40], t=t[20:40], y=y[20:40])
        model = pinball_fit(fit, alpha=alpha, config=cheap, seed=int(rng.integers(2**31)))
        s_hat = calibrate(conformal_scores(model, cal, arm=1), alpha)
        q = predict_quantiles(model, x[40:41], np.ones(1))
        hits += int(q[0, 0] - s_hat <= y[40] <= q[0, 1] + s_hat)
    floor = (1.0 - alpha) - 3.0 * np.sqrt(alpha * (1.0 - alpha) / reps)
    assert hits / reps >= floor


def test_cqr_ite_modes_run_and_tag_im():
    # large enough that every calibration fold supports a finite band
    train = generate(GenSpec("example1", 400, seed=5))
    test = generate(GenSpec("example1", 40, seed=6))
    for mode in ("naive", "exact", "inexact"):
        out = cqr_ite(train, test, alpha=0.1, mode=mode, seed=0, config=FAST)
        assert len(out) == test.n
        assert all(iv.case == "Im" for iv in out)
        assert all(iv.lower <= iv.upper for iv in out)
        assert [iv.subject_id for iv in out] == list(range(test.n))


def test_cqr_ite_deterministic_in_seed():
    train = generate(GenSpec("example1", 120, seed=7))
    test = generate(GenSpec("example1", 20, seed=8))
    a = cqr_ite(train, test, alpha=0.1, mode="naive", seed=3, config=FAST)
    b = cqr_ite(train, test, alpha=0.1, mode="naive", seed=3, config=FAST)
    assert [(iv.lower, iv.upper) for iv in a] == [(iv.lower, iv.upper) for iv in b]


def test_cqr_ite_naive_wider_than_inexact():
    # differencing two outcome bands stacks both arms' widths; the inexact
    # variant regresses interval endpoints instead and should come out tighter
    train = generate(GenSpec("example1", 400, seed=9))
    test = generate(GenSpec("example1", 100, seed=10))
    naive = cqr_ite(train, test, alpha=0.05, mode="naive", seed=1, config=FAST)
    inexact = cqr_ite(train, test, alpha=0.05, mode="inexact", seed=1, config=FAST)
    assert np.mean([iv.length for iv in naive]) > np.mean([iv.length for iv in inexact])


def test_cqr_ite_naive_covers_noise_free_effect():
    # with sigma -> 0 both potential outcomes are deterministic functions of
    # x, so the differenced bands must catch y1 - y0 nearly everywhere
    rng = np.random.default_rng(11)
    n = 400
    x = rng.uniform(size=(n, 2))
    t = (rng.random(n) < 0.5).astype(float)
    c = 1.0 + x[:, 0] + x[:, 1]
    tau = 2.0 * x[:, 0]
    y = c + tau * t
    train = Dataset(x=x[:300], t=t[:300], y=y[:300])
    test_x = x[300:]
    out = cqr_ite(train, Dataset(x=test_x, t=t[300:], y=y[300:]), alpha=0.1,
                  mode="naive", seed=2, config=TrainConfig(iters=2000, lr=0.05))
    truth = 2.0 * test_x[:, 0]
    covered = np.mean([iv.lower <= tr <= iv.upper for iv, tr in zip(out, truth)])
    assert covered >= 0.9


def test_cqr_ite_unknown_mode():
    train = generate(GenSpec("example1", 40, seed=12))
    with pytest.raises(ValueError, match="unknown mode"):
        cqr_ite(train, train, mode="magic")
    with pytest.raises(ValueError, match="alpha"):
        cqr_ite(train, train, alpha=0.0)


def test_cqr_ite_endpoint_modes_reject_infinite_band():
    # too few calibration rows per arm for alpha/2 push the conformal margin
    # to infinity; the endpoint-regression modes must refuse rather than fit
    # infinite targets
    train = generate(GenSpec("example1", 120, seed=13))
    test = generate(GenSpec("example1", 20, seed=14))
    with pytest.raises(ValueError, match="infinite band"):
        cqr_ite(train, test, alpha=0.05, mode="inexact", seed=1, config=FAST)
