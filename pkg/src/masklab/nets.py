"""Dense feedforward nets with hand-written exact gradients.

Everything runs in float64 on numpy. The layer set is deliberately small:
affine maps followed by relu, sigmoid, tanh, identity, or a row-wise
softmax. Gradients are closed-form and are validated against central
finite differences by grad_check().
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    NonFiniteError,
    ShapeError,
    StaleCacheError,
    ValidationError,
)

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity", "softmax")


class Rng:
    """Deterministic random stream on the counter-based Philox 4x64 generator.

    The same (seed, stream) pair yields the same draw sequence on every
    platform; numpy guarantees stream stability for a fixed bit generator.
    Independent streams come from distinct ``stream`` values under the same
    seed, which map to distinct Philox keys.
    """

    def __init__(self, seed: int, stream: int = 0):
        if seed < 0 or stream < 0:
            raise ValidationError("seed and stream must be nonnegative integers")
        self.seed = int(seed)
        self.stream = int(stream)
        self.gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, stream: int) -> "Rng":
        """Independent stream under the same seed."""
        return Rng(self.seed, stream)

    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int):
        return self.gen.permutation(n)

    def dirichlet(self, alpha):
        return self.gen.dirichlet(alpha)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under large logits; rows are strictly
    positive and sum to 1."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    if kind == "softmax":
        return softmax(z)
    raise ValidationError(f"unknown activation {kind!r}")


def _grad_through_activation(kind: str, z: np.ndarray, a: np.ndarray,
                             upstream: np.ndarray) -> np.ndarray:
    """dL/dz given dL/da for one activation; softmax needs the full
    row Jacobian, the rest are elementwise."""
    if kind == "relu":
        return upstream * (z > 0.0)
    if kind == "sigmoid":
        return upstream * a * (1.0 - a)
    if kind == "tanh":
        return upstream * (1.0 - a * a)
    if kind == "identity":
        return upstream
    if kind == "softmax":
        inner = (upstream * a).sum(axis=1, keepdims=True)
        return a * (upstream - inner)
    raise ValidationError(f"unknown activation {kind!r}")


@dataclass
class Layer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str


class DenseNet:
    """Feedforward stack of affine layers, one activation each.

    Weights start Glorot-uniform in +-sqrt(6/(fan_in+fan_out)), biases at
    zero. ``version`` increments whenever parameters are stepped so a stale
    forward cache can be detected.
    """

    def __init__(self, dims: list[int], activations: list[str], rng: Rng):
        if len(dims) < 2:
            raise ValidationError("a net needs at least input and output dims")
        if len(activations) != len(dims) - 1:
            raise ValidationError(
                f"got {len(activations)} activations for {len(dims) - 1} layers"
            )
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {act!r}")
        if any(d < 1 for d in dims):
            raise ValidationError("layer dims must be positive")
        self.layers: list[Layer] = []
        for k, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-limit, limit, size=(n_out, n_in))
            self.layers.append(Layer(w, np.zeros(n_out), activations[k]))
        self.input_dim = dims[0]
        self.output_dim = dims[-1]
        self.version = 0

    def params(self) -> list[np.ndarray]:
        """Flat parameter list, (w, b) per layer, shared storage."""
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.append(layer.w)
            out.append(layer.b)
        return out

    def touch(self) -> None:
        """Mark parameters as changed; outstanding forward caches go stale."""
        self.version += 1

    def apply_step(self, grads: list[np.ndarray], state: "OptimizerState",
                   t: int) -> None:
        step(self.params(), grads, state, t)
        self.touch()


@dataclass
class ForwardCache:
    """Intermediate results of one forward() call, consumed by backward()."""

    net: DenseNet
    version: int
    x: np.ndarray
    zs: list[np.ndarray]
    acts: list[np.ndarray]  # post-activation per layer; acts[-1] is the output

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]


def forward(net: DenseNet, batch: np.ndarray) -> tuple[ForwardCache, np.ndarray]:
    """Run a batch through the net, caching every intermediate activation."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-d, got shape {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("batch must hold at least one sample")
    if x.shape[1] != net.input_dim:
        raise ShapeError(
            f"layer 0 expects input width {net.input_dim}, batch has {x.shape[1]}"
        )
    zs: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    a = x
    for k, layer in enumerate(net.layers):
        if a.shape[1] != layer.w.shape[1]:
            raise ShapeError(
                f"layer {k} expects input width {layer.w.shape[1]}, got {a.shape[1]}"
            )
        z = a @ layer.w.T + layer.b
        a = _activate(z, layer.activation)
        zs.append(z)
        acts.append(a)
    return ForwardCache(net, net.version, x, zs, acts), a


def backward(net: DenseNet, cache: ForwardCache,
             loss_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact gradients of a scalar loss with dL/d(output) = loss_grad.

    Returns (parameter gradients in params() order, gradient wrt the input
    batch). The cache must come from forward() on this net at its current
    parameter version; anything else raises immediately rather than
    silently producing garbage.
    """
    if cache.net is not net:
        raise StaleCacheError("cache was built by a different net")
    if cache.version != net.version:
        raise StaleCacheError(
            "parameters changed since forward(); rerun forward before backward"
        )
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.shape != cache.acts[-1].shape:
        raise ShapeError(
            f"loss_grad shape {g.shape} does not match output {cache.acts[-1].shape}"
        )
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.layers))
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        delta = _grad_through_activation(layer.activation, cache.zs[k],
                                         cache.acts[k], g)
        a_prev = cache.x if k == 0 else cache.acts[k - 1]
        grads[2 * k] = delta.T @ a_prev
        grads[2 * k + 1] = delta.sum(axis=0)
        g = delta @ layer.w
    return grads, g


def grad_check(net: DenseNet, batch: np.ndarray, loss_fn,
               fd_step: float) -> float:
    """Max relative disagreement between analytic and central-difference
    gradients over every parameter entry.

    ``loss_fn(output) -> (loss, dloss_doutput)``; only the loss value is
    used on perturbed evaluations. Relative error is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if not (0.0 < fd_step <= 1e-3):
        raise ValidationError("fd_step must lie in (0, 1e-3]")
    cache, out = forward(net, batch)
    _, g_out = loss_fn(out)
    analytic, _ = backward(net, cache, g_out)
    worst = 0.0
    for p_idx, (p, ga) in enumerate(zip(net.params(), analytic)):
        flat = p.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            lo_plus, _ = loss_fn(forward(net, batch)[1])
            flat[i] = orig - fd_step
            lo_minus, _ = loss_fn(forward(net, batch)[1])
            flat[i] = orig
            if not (np.isfinite(lo_plus) and np.isfinite(lo_minus)):
                raise NonFiniteError(
                    f"non-finite loss while perturbing parameter {p_idx} entry {i}"
                )
            numeric = (lo_plus - lo_minus) / (2.0 * fd_step)
            rel = abs(ga_flat[i] - numeric) / max(1e-8,
                                                  abs(ga_flat[i]) + abs(numeric))
            worst = max(worst, rel)
    net.touch()  # parameters were perturbed and restored; invalidate caches
    return worst


@dataclass
class OptimizerState:
    """State for the two supported update rules.

    sgd_staircase: rate(t) = base_rate * decay_factor ** floor(t / decay_every).
    rmsprop: square-gradient accumulators, smoothing 0.9 and epsilon 1e-8
    (conventional defaults); update is base_rate * g / (sqrt(acc) + eps).
    """

    kind: str
    base_rate: float
    decay_factor: float = 1.0
    decay_every: int = 1
    smoothing: float = 0.9
    epsilon: float = 1e-8
    accumulators: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd_staircase", "rmsprop"):
            raise ValidationError(f"unknown optimizer kind {self.kind!r}")
        if not self.base_rate > 0:
            raise ValidationError("base_rate must be positive")
        if not (0.0 < self.decay_factor <= 1.0):
            raise ValidationError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValidationError("decay_every must be a positive step count")
        if not self.epsilon > 0:
            raise ValidationError("epsilon must be positive")


def learning_rate(state: OptimizerState, t: int) -> float:
    """Effective rate at step t; a staircase for sgd, constant for rmsprop."""
    if state.kind == "sgd_staircase":
        return state.base_rate * state.decay_factor ** (t // state.decay_every)
    return state.base_rate


def step(params: list[np.ndarray], grads: list[np.ndarray],
         state: OptimizerState, t: int) -> tuple[list[np.ndarray], OptimizerState]:
    """Apply one in-place update; rejects non-finite gradients before
    touching any parameter."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i}")
    if state.kind == "sgd_staircase":
        rate = learning_rate(state, t)
        for p, g in zip(params, grads):
            p -= rate * g
    else:
        if state.accumulators is None:
            state.accumulators = [np.zeros_like(p) for p in params]
        rho = state.smoothing
        for p, g, acc in zip(params, grads, state.accumulators):
            acc *= rho
            acc += (1.0 - rho) * g * g
            p -= state.base_rate * g / (np.sqrt(acc) + state.epsilon)
    for i, p in enumerate(params):
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"parameter {i} went non-finite after update")
    return params, state


def scalar_output_and_input_grad(net: DenseNet,
                                 x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For a single-output net: per-sample scores and d(score)/d(input)."""
    if net.output_dim != 1:
        raise ShapeError("input-gradient helper expects a single-output net")
    cache, out = forward(net, x)
    _, input_grad = backward(net, cache, np.ones_like(out))
    return out[:, 0], input_grad


def input_grad_param_grads(net: DenseNet, x: np.ndarray,
                           cotangent: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients of h = sum_n cotangent_n . d(net(x_n))/dx_n for a
    scalar-output net whose activations are relu or identity only.

    For such nets the input gradient is multilinear in the weights with
    activation masks constant almost everywhere, so the exact derivative is
    one masked forward tangent sweep followed by one reverse sweep reusing
    the same masks. Bias gradients vanish on this path (biases only move
    the masks). This is what the gradient-norm penalty needs.
    """
    if net.output_dim != 1:
        raise ShapeError("penalty helper expects a single-output net")
    for k, layer in enumerate(net.layers):
        if layer.activation not in ("relu", "identity"):
            raise ValidationError(
                f"penalty helper supports relu/identity activations only; "
                f"layer {k} uses {layer.activation!r}"
            )
    cache, _ = forward(net, x)
    masks = [
        (cache.zs[k] > 0.0).astype(np.float64)
        if net.layers[k].activation == "relu"
        else np.ones_like(cache.zs[k])
        for k in range(len(net.layers))
    ]
    n_layers = len(net.layers)
    c = np.asarray(cotangent, dtype=np.float64)
    if c.shape != cache.x.shape:
        raise ShapeError(f"cotangent shape {c.shape} != input shape {cache.x.shape}")

    # tangent sweep: v[k] is the tangent entering layer k
    v = [c]
    for k in range(n_layers - 1):
        v.append((v[k] @ net.layers[k].w.T) * masks[k])

    grads = [np.zeros_like(p) for p in net.params()]
    grads[2 * (n_layers - 1)] = v[-1].sum(axis=0, keepdims=True)
    r = np.ones((c.shape[0], 1)) @ net.layers[-1].w  # dh/dv entering the top
    for k in range(n_layers - 2, -1, -1):
        s = r * masks[k]
        grads[2 * k] = s.T @ v[k]
        r = s @ net.layers[k].w
    return grads
