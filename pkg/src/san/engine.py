"""Deterministic dense-network engine.

A network is an ordered list of fully connected layers, each followed by one
of three activations.  ``forward`` returns the output together with a trace
of every pre- and post-activation, ``backward`` consumes that trace to give
exact reverse-mode gradients, and ``adam_step`` applies a bias-corrected Adam
update in place.  All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, StateError

ACTIVATIONS = ("relu", "identity", "sigmoid")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_grad(grad, pre, post, activation):
    # ReLU subgradient at exactly 0 is 0.
    if activation == "relu":
        return grad * (pre > 0)
    if activation == "sigmoid":
        return grad * post * (1.0 - post)
    return grad


def _check_finite(array, what):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {what}")


@dataclass(eq=False)
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not agree")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass(eq=False)
class DenseNet:
    layers: list[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in layer order, ``[W0, b0, W1, b1, ...]``.

        The arrays are the live storage; mutating them mutates the network.
        """
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([DenseLayer(l.weight.copy(), l.bias.copy(), l.activation)
                         for l in self.layers])

    def equals(self, other: "DenseNet") -> bool:
        """Bitwise equality of architecture and parameters."""
        if self.dims != other.dims or self.activations != other.activations:
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.params(), other.params()))

    def __call__(self, x):
        return forward(self, x)[0]


@dataclass(eq=False)
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.post)


def mlp_activations(n_layers: int, hidden: str = "relu", last: str = "identity") -> list[str]:
    return [hidden] * (n_layers - 1) + [last]


def init_net(layer_dims: Sequence[int], activations: Sequence[str] | str, seed: int) -> DenseNet:
    """He-normal weights (std ``sqrt(2 / in_dim)``) and zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError("layer_dims needs an input and at least one output size")
    if any(d <= 0 for d in dims):
        raise ConfigError(f"layer dims must be positive, got {dims}")
    n_layers = len(dims) - 1
    if isinstance(activations, str):
        activations = [activations] * n_layers
    if len(activations) != n_layers:
        raise ConfigError(f"{len(activations)} activations for {n_layers} layers")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out, act in zip(dims[:-1], dims[1:], activations):
        w = rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
        layers.append(DenseLayer(w, np.zeros(d_out), act))
    return DenseNet(layers)


def forward(net: DenseNet, inputs) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in_dim {net.in_dim}")
    trace = ForwardTrace(x)
    a = x
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in net.layers:
            z = a @ layer.weight + layer.bias
            a = _activate(z, layer.activation)
            trace.pre.append(z)
            trace.post.append(a)
    _check_finite(a, "network output")
    return a, trace


def backward(net: DenseNet, trace: ForwardTrace | None, output_grad):
    """Reverse-mode gradients for one traced batch.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
    ``net.params()``.
    """
    if trace is None or trace.depth != len(net.layers):
        raise StateError("forward trace missing or recorded for a different network")
    for layer, post in zip(net.layers, trace.post):
        if post.shape[1] != layer.out_dim:
            raise StateError("forward trace does not match network layer widths")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.post[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {trace.post[-1].shape}")
    _check_finite(g, "output gradient")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = _activation_grad(g, trace.pre[i], trace.post[i], layer.activation)
        layer_in = trace.inputs if i == 0 else trace.post[i - 1]
        grads[2 * i] = layer_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.weight.T
    return grads, g


@dataclass(eq=False)
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], beta1=0.9, beta2=0.999,
                   epsilon=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, beta1, beta2, epsilon)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              learning_rate: float) -> Sequence[np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Gradients are validated before anything is touched, so a non-finite
    gradient leaves both parameters and optimizer state unchanged.
    """
    if learning_rate <= 0:
        raise ConfigError("learning_rate must be positive")
    if len(grads) != len(params) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimizer state differ in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at optimizer step {state.step_count + 1}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
    return params


LossFn = Callable[[], tuple[float, Sequence[np.ndarray]]]


def finite_diff_check(loss_fn: LossFn, net: DenseNet | Sequence[DenseNet],
                      eps: float = 1e-5) -> float:
    """Largest elementwise relative error between analytic and numeric gradients.

    ``loss_fn()`` evaluates the loss at the current parameters and returns
    ``(value, grads)`` where ``grads`` lines up with the concatenated
    ``params()`` of ``net`` (one network or several).  Parameters are
    perturbed in place and restored exactly.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    nets = [net] if isinstance(net, DenseNet) else list(net)
    params = [p for n in nets for p in n.params()]
    _, analytic = loss_fn()
    if len(analytic) != len(params):
        raise ShapeError("loss_fn returned a gradient list of the wrong length")
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        g_flat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()[0]
            flat[i] = orig - eps
            down = loss_fn()[0]
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = g_flat[i]
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
