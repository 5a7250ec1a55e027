import math

import numpy as np
import pytest

from fidte.nn import (
    MlpParams,
    MlpSpec,
    mlp_backward,
    mlp_backward_batch,
    mlp_forward,
    mlp_forward_batch,
    mlp_init,
    param_count,
)

from conftest import assert_grad_close, central_diff


def test_param_count_matches_formula():
    # sum over layers of d_l * (d_{l-1} + 1)
    assert param_count(MlpSpec((4, 90, 30, 6))) == 3366
    assert param_count(MlpSpec((1, 1, 1))) == 4
    assert param_count(MlpSpec((2, 10, 10, 1))) == 151
    assert param_count(MlpSpec((5, 10, 10, 1))) == 181


def test_forward_tiny_tanh_by_hand():
    # 1-1-1 net, hidden weight 1 bias 0, output weight 2 bias 0
    spec = MlpSpec((1, 1, 1), activation="tanh")
    params = MlpParams(spec, np.array([1.0, 0.0, 2.0, 0.0]))
    out = mlp_forward(params, np.array([0.5]))
    assert out.shape == (1,)
    assert out[0] == pytest.approx(2.0 * math.tanh(0.5), abs=1e-15)


def test_output_layer_is_linear():
    # output must not be squashed: scale the output weights, output scales too
    spec = MlpSpec((2, 3, 1), activation="sigmoid", seed=3)
    p1 = mlp_init(spec)
    p2 = MlpParams(spec, p1.flat.copy())
    w_slice = slice(2 * 3 + 3, 2 * 3 + 3 + 3)  # output layer weights
    p2.flat[w_slice] *= 10.0
    x = np.array([0.3, -0.7])
    np.testing.assert_allclose(mlp_forward(p2, x), 10.0 * mlp_forward(p1, x), rtol=1e-12)


def test_init_glorot_bounds_and_zero_biases():
    spec = MlpSpec((4, 90, 30, 6), seed=11)
    params = mlp_init(spec)
    widths = spec.layer_widths
    for (W, b), l in zip(params.layers(), range(1, len(widths))):
        bound = math.sqrt(6.0 / (widths[l - 1] + widths[l]))
        assert np.abs(W).max() <= bound
        assert np.abs(W).max() > 0.5 * bound  # actually spread out, not degenerate
        np.testing.assert_array_equal(b, 0.0)


def test_init_deterministic_in_seed():
    spec = MlpSpec((3, 5, 2), seed=7)
    np.testing.assert_array_equal(mlp_init(spec).flat, mlp_init(spec).flat)
    other = MlpSpec((3, 5, 2), seed=8)
    assert not np.array_equal(mlp_init(spec).flat, mlp_init(other).flat)


def test_forward_deterministic():
    spec = MlpSpec((3, 8, 2), seed=0)
    params = mlp_init(spec)
    x = np.array([0.1, -2.0, 0.7])
    np.testing.assert_array_equal(mlp_forward(params, x), mlp_forward(params, x))


@pytest.mark.parametrize("activation", ["tanh", "relu", "sigmoid"])
def test_batch_matches_stacked_singles(activation, rng):
    spec = MlpSpec((4, 7, 5, 3), activation=activation, seed=21)
    params = mlp_init(spec)
    x = rng.normal(size=(6, 4))
    batch = mlp_forward_batch(params, x)
    singles = np.stack([mlp_forward(params, row) for row in x])
    np.testing.assert_allclose(batch, singles, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("activation", ["tanh", "relu", "sigmoid"])
def test_backward_param_grad_matches_fd(activation, rng):
    spec = MlpSpec((3, 6, 4, 2), activation=activation, seed=5)
    params = mlp_init(spec)
    x = rng.normal(size=3)
    out_grad = rng.normal(size=2)

    def loss(flat):
        return float(mlp_forward(MlpParams(spec, flat), x) @ out_grad)

    analytic, _ = mlp_backward(params, x, out_grad)
    assert_grad_close(analytic, central_diff(loss, params.flat))


@pytest.mark.parametrize("activation", ["tanh", "relu", "sigmoid"])
def test_backward_input_grad_matches_fd(activation, rng):
    spec = MlpSpec((5, 6, 3), activation=activation, seed=9)
    params = mlp_init(spec)
    x = rng.normal(size=5)
    out_grad = rng.normal(size=3)

    def loss(xv):
        return float(mlp_forward(params, xv) @ out_grad)

    _, analytic = mlp_backward(params, x, out_grad)
    assert_grad_close(analytic, central_diff(loss, x))


def test_backward_batch_sums_per_row_grads(rng):
    spec = MlpSpec((3, 5, 2), seed=4)
    params = mlp_init(spec)
    x = rng.normal(size=(7, 3))
    gout = rng.normal(size=(7, 2))
    pg_batch, ig_batch = mlp_backward_batch(params, x, gout)
    pg_sum = np.zeros_like(params.flat)
    for i in range(7):
        pg_i, ig_i = mlp_backward(params, x[i], gout[i])
        pg_sum += pg_i
        np.testing.assert_allclose(ig_batch[i], ig_i, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(pg_batch, pg_sum, rtol=1e-12, atol=1e-13)


def test_relu_subgradient_at_zero_is_zero():
    # preactivation exactly 0 at the hidden unit: all upstream grads vanish
    spec = MlpSpec((1, 1, 1), activation="relu")
    params = MlpParams(spec, np.array([1.0, 0.0, 1.0, 0.0]))
    pg, ig = mlp_backward(params, np.array([0.0]), np.array([1.0]))
    np.testing.assert_array_equal(pg, [0.0, 0.0, 0.0, 1.0])  # only output bias moves
    np.testing.assert_array_equal(ig, [0.0])


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ValueError):
        MlpSpec((3, 1))  # no hidden layer
    with pytest.raises(ValueError):
        MlpSpec((3, 4, 1), activation="softplus")


def test_dimension_errors():
    spec = MlpSpec((3, 4, 2))
    params = mlp_init(spec)
    with pytest.raises(ValueError):
        mlp_forward(params, np.zeros(4))
    with pytest.raises(ValueError):
        mlp_backward(params, np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        MlpParams(spec, np.zeros(10))
    with pytest.raises(ValueError):
        MlpParams(spec, np.full(param_count(spec), np.nan))
