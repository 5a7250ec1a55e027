"""Plain-numpy multilayer perceptrons with exact gradients.

Every network in the package (inverse network, data-model networks,
quantile networks) is built on the same flat-parameter MLP defined here.
Parameters live in a single 1-d float64 vector so samplers and optimizers
can treat a network as a point in R^P.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ACTIVATIONS = ("tanh", "relu", "sigmoid")


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    layer_widths includes input and output, so a 2-10-10-1 network is
    (2, 10, 10, 1).  The activation applies to hidden layers only; the
    output layer is linear.

    out_scale multiplies the output-layer weight matrix (not its biases) in
    the forward pass.  A small value lets the stored weights sit at the
    magnitude the sparsity prior favors while the effective output map
    stays proportionally smaller.
    """

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0
    out_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 3:
            raise ValueError(
                f"need input, at least one hidden, and output layer, got widths {self.layer_widths}"
            )
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"zero or negative layer width in {self.layer_widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}, expected one of {_ACTIVATIONS}")
        object.__setattr__(self, "out_scale", float(self.out_scale))
        if not np.isfinite(self.out_scale) or self.out_scale <= 0.0:
            raise ValueError(f"out_scale must be positive and finite, got {self.out_scale}")

    @property
    def d_in(self) -> int:
        return self.layer_widths[0]

    @property
    def d_out(self) -> int:
        return self.layer_widths[-1]


def param_count(spec: MlpSpec) -> int:
    """Total number of parameters: sum over layers of d_l * (d_{l-1} + 1)."""
    w = spec.layer_widths
    return sum(w[l] * (w[l - 1] + 1) for l in range(1, len(w)))


def _layer_slices(spec: MlpSpec) -> list[tuple[slice, slice, tuple[int, int]]]:
    # per layer: (weight slice, bias slice, weight shape), weights row-major (d_l, d_{l-1})
    out = []
    pos = 0
    w = spec.layer_widths
    for l in range(1, len(w)):
        n_w = w[l] * w[l - 1]
        out.append((slice(pos, pos + n_w), slice(pos + n_w, pos + n_w + w[l]), (w[l], w[l - 1])))
        pos += n_w + w[l]
    return out


@dataclass
class MlpParams:
    """A network: its architecture plus one flat parameter vector."""

    spec: MlpSpec
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.ndim != 1 or self.flat.shape[0] != param_count(self.spec):
            raise ValueError(
                f"flat vector has length {self.flat.shape}, spec needs {param_count(self.spec)}"
            )
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("non-finite parameter values")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W_l, b_l) into the flat vector, W_l of shape (d_l, d_{l-1})."""
        return [
            (self.flat[ws].reshape(shape), self.flat[bs])
            for ws, bs, shape in _layer_slices(self.spec)
        ]


def mlp_init(spec: MlpSpec) -> MlpParams:
    """Glorot-uniform weights, zero biases, deterministic in spec.seed.

    Weights of layer l are drawn uniform on +-sqrt(6 / (d_{l-1} + d_l)).
    """
    rng = np.random.default_rng(spec.seed)
    flat = np.zeros(param_count(spec))
    w = spec.layer_widths
    for (ws, _, shape), l in zip(_layer_slices(spec), range(1, len(w))):
        bound = np.sqrt(6.0 / (w[l - 1] + w[l]))
        flat[ws] = rng.uniform(-bound, bound, size=shape[0] * shape[1])
    return MlpParams(spec, flat)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    # sigmoid, numerically safe on both tails
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act_grad_from_act(name: str, a: np.ndarray) -> np.ndarray:
    # derivative of the activation expressed through its output; for relu
    # this makes the subgradient at 0 exactly 0
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (a > 0).astype(np.float64)
    return a * (1.0 - a)


def _forward_cached(params: MlpParams, x: np.ndarray) -> list[np.ndarray]:
    # returns [input, hidden activations..., linear output], all (n, d_l)
    acts = [x]
    layers = params.layers()
    a = x
    for l, (W, b) in enumerate(layers):
        if l < len(layers) - 1:
            a = _act(params.spec.activation, a @ W.T + b)
        else:
            a = (a @ W.T) * params.spec.out_scale + b
        acts.append(a)
    return acts


def _check_input(params: MlpParams, x: np.ndarray, batched: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = 2 if batched else 1
    if x.ndim != want or x.shape[-1] != params.spec.d_in:
        raise ValueError(
            f"input shape {x.shape} does not match network input width {params.spec.d_in}"
        )
    return x


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass for a single observation x of shape (d_in,)."""
    x = _check_input(params, x, batched=False)
    return _forward_cached(params, x[None, :])[-1][0]


def mlp_forward_batch(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass for a batch x of shape (n, d_in); returns (n, d_out)."""
    x = _check_input(params, x, batched=True)
    return _forward_cached(params, x)[-1]


def _backward_from_cache(
    params: MlpParams, acts: list[np.ndarray], out_grads: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    layers = params.layers()
    param_grad = np.zeros_like(params.flat)
    slices = _layer_slices(params.spec)
    last = len(layers) - 1
    delta = out_grads
    for l in range(last, -1, -1):
        W, _ = layers[l]
        ws, bs, shape = slices[l]
        # out_scale multiplies the output weight matrix only, so it enters
        # that layer's weight gradient and the signal flowing past it
        wg = (delta.T @ acts[l]).ravel()
        param_grad[ws] = wg * params.spec.out_scale if l == last else wg
        param_grad[bs] = delta.sum(axis=0)
        if l > 0:
            back = delta @ W
            if l == last:
                back = back * params.spec.out_scale
            delta = back * _act_grad_from_act(params.spec.activation, acts[l])
    input_grads = delta @ layers[0][0]
    return param_grad, input_grads


def mlp_backward(
    params: MlpParams, x: np.ndarray, out_grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate d(loss)/d(output) through the network at input x.

    Args:
        x: single input, shape (d_in,).
        out_grad: gradient of a scalar loss w.r.t. the network output,
            shape (d_out,).

    Returns:
        (param_grad, input_grad): gradient w.r.t. the flat parameter vector,
        shape (P,), and w.r.t. the input, shape (d_in,).
    """
    x = _check_input(params, x, batched=False)
    out_grad = np.asarray(out_grad, dtype=np.float64)
    if out_grad.shape != (params.spec.d_out,):
        raise ValueError(f"out_grad shape {out_grad.shape} != ({params.spec.d_out},)")
    acts = _forward_cached(params, x[None, :])
    pg, ig = _backward_from_cache(params, acts, out_grad[None, :])
    return pg, ig[0]


def mlp_backward_batch(
    params: MlpParams, x: np.ndarray, out_grads: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Batched backward pass.

    out_grads has one row per observation; the parameter gradient is the sum
    over rows (each row is an independent additive loss term), the input
    gradient is returned per row.
    """
    x = _check_input(params, x, batched=True)
    out_grads = np.asarray(out_grads, dtype=np.float64)
    if out_grads.shape != (x.shape[0], params.spec.d_out):
        raise ValueError(
            f"out_grads shape {out_grads.shape} != ({x.shape[0]}, {params.spec.d_out})"
        )
    acts = _forward_cached(params, x)
    return _backward_from_cache(params, acts, out_grads)
