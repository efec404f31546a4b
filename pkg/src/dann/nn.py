"""Minimal dense-network engine: layers, activations, exact backprop, optimizers.

Everything runs in double precision on plain numpy arrays. The network
topology used elsewhere in this package is fixed and small, so gradients
are hand-derived rather than traced through an autodiff graph.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


class ActivationKind(enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    ELU = "elu"
    SOFTMAX = "softmax"

    @classmethod
    def from_name(cls, name: str) -> "ActivationKind":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(
                f"unknown activation {name!r}; expected one of "
                f"{[k.value for k in cls]}"
            ) from None


def activate(kind: ActivationKind, z: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    if kind is ActivationKind.IDENTITY:
        return z
    if kind is ActivationKind.RELU:
        return np.maximum(z, 0.0)
    if kind is ActivationKind.TANH:
        return np.tanh(z)
    if kind is ActivationKind.ELU:
        # max(z,0) + alpha*(exp(min(z,0)) - 1): branch-free, SIMD-friendly
        t = np.minimum(z, 0.0)
        np.exp(t, out=t)
        t -= 1.0
        if alpha != 1.0:
            t *= alpha
        out = np.maximum(z, 0.0)
        out += t
        return out
    if kind is ActivationKind.SOFTMAX:
        # max-subtraction keeps exp() finite for logits up to ~1e300
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    raise ConfigError(f"unknown activation kind {kind!r}")


def activation_input_grad(
    kind: ActivationKind, z: np.ndarray, a: np.ndarray, upstream: np.ndarray,
    alpha: float = 1.0,
) -> np.ndarray:
    """Gradient w.r.t. pre-activations given dL/d(activations)."""
    if kind is ActivationKind.IDENTITY:
        return upstream
    if kind is ActivationKind.RELU:
        return upstream * (z > 0.0)
    if kind is ActivationKind.TANH:
        return upstream * (1.0 - a * a)
    if kind is ActivationKind.ELU:
        # derivative: 1 above zero, alpha*exp(z) below; continuous at 0 for
        # alpha = 1, where exp(min(z, 0)) covers both branches at once
        if alpha == 1.0:
            f = np.minimum(z, 0.0)
            np.exp(f, out=f)
            f *= upstream
            return f
        return upstream * np.where(z > 0.0, 1.0, alpha * np.exp(np.minimum(z, 0.0)))
    if kind is ActivationKind.SOFTMAX:
        # full Jacobian contraction: dz_j = a_j * (g_j - sum_i g_i a_i)
        inner = (upstream * a).sum(axis=1, keepdims=True)
        return a * (upstream - inner)
    raise ConfigError(f"unknown activation kind {kind!r}")


@dataclass
class DenseLayer:
    """One fully connected layer. Weights are stored (out, in)."""

    weights: np.ndarray
    biases: np.ndarray
    activation: ActivationKind
    elu_alpha: float = 1.0

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]


def xavier_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weight matrix of shape (fan_out, fan_in).

    Entries are uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
    """
    if fan_in < 1 or fan_out < 1:
        raise ConfigError(f"layer dimensions must be >= 1, got {fan_in}x{fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def make_layer(
    fan_in: int, fan_out: int, activation: ActivationKind,
    rng: np.random.Generator, elu_alpha: float = 1.0,
) -> DenseLayer:
    return DenseLayer(
        weights=xavier_init(fan_in, fan_out, rng),
        biases=np.zeros(fan_out),
        activation=activation,
        elu_alpha=elu_alpha,
    )


@dataclass
class ForwardCache:
    """Per-layer intermediates kept for the backward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    activations: list[np.ndarray] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def forward(stack: list[DenseLayer], batch: np.ndarray) -> ForwardCache:
    """Run a batch through a layer stack, caching every intermediate."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"batch must be 2-d, got shape {x.shape}")
    if stack and x.shape[1] != stack[0].fan_in:
        raise ConfigError(
            f"batch width {x.shape[1]} does not match first layer input "
            f"width {stack[0].fan_in}"
        )
    cache = ForwardCache()
    for layer in stack:
        z = x @ layer.weights.T + layer.biases
        a = activate(layer.activation, z, layer.elu_alpha)
        cache.inputs.append(x)
        cache.pre_activations.append(z)
        cache.activations.append(a)
        x = a
    return cache


def backward(
    stack: list[DenseLayer],
    cache: ForwardCache,
    upstream: np.ndarray,
    from_logits: bool = False,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate `upstream` through the stack.

    `upstream` is dL/d(output) of the final layer, or dL/d(final
    pre-activation) when ``from_logits`` is set (used to fuse softmax with
    cross-entropy). Returns per-layer (dW, db) and the gradient w.r.t. the
    stack input.
    """
    if len(cache.activations) != len(stack):
        raise RuntimeError("forward cache does not match the layer stack")
    if upstream.shape != cache.output.shape and not from_logits:
        raise RuntimeError(
            f"upstream shape {upstream.shape} does not match output "
            f"shape {cache.output.shape}"
        )
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(stack)  # type: ignore
    g = upstream
    for k in range(len(stack) - 1, -1, -1):
        layer = stack[k]
        if k == len(stack) - 1 and from_logits:
            dz = g
        else:
            dz = activation_input_grad(
                layer.activation, cache.pre_activations[k],
                cache.activations[k], g, layer.elu_alpha,
            )
        grads[k] = (dz.T @ cache.inputs[k], dz.sum(axis=0))
        g = dz @ layer.weights
    return grads, g


@dataclass
class RMSProp:
    learning_rate: float = 0.001
    rho: float = 0.9
    epsilon: float = 1e-7

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError("rho must be in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")


@dataclass
class Adam:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7

    def validate(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")


OptimizerKind = RMSProp | Adam


def optimizer_kind_from_dict(d: dict) -> OptimizerKind:
    d = dict(d)
    kind = d.pop("kind", "rmsprop").lower()
    try:
        if kind == "rmsprop":
            opt = RMSProp(**d)
        elif kind == "adam":
            opt = Adam(**d)
        else:
            raise ConfigError(f"unknown optimizer kind {kind!r}")
    except TypeError as exc:
        raise ConfigError(f"bad optimizer config: {exc}") from None
    opt.validate()
    return opt


def optimizer_kind_to_dict(kind: OptimizerKind) -> dict:
    d = {"kind": "rmsprop" if isinstance(kind, RMSProp) else "adam"}
    d.update(vars(kind))
    return d


class OptimizerState:
    """Per-parameter accumulators, shaped exactly like the parameter list."""

    def __init__(self, params: list[np.ndarray], kind: OptimizerKind):
        self.kind = kind
        self.step_count = 0
        if isinstance(kind, RMSProp):
            self.square_avg = [np.zeros_like(p) for p in params]
        else:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def copy(self) -> "OptimizerState":
        dup = OptimizerState.__new__(OptimizerState)
        dup.kind = self.kind
        dup.step_count = self.step_count
        if isinstance(self.kind, RMSProp):
            dup.square_avg = [s.copy() for s in self.square_avg]
        else:
            dup.m = [m.copy() for m in self.m]
            dup.v = [v.copy() for v in self.v]
        return dup

    def load(self, other: "OptimizerState") -> None:
        """Overwrite accumulators in place from a snapshot."""
        self.step_count = other.step_count
        if isinstance(self.kind, RMSProp):
            for dst, src in zip(self.square_avg, other.square_avg):
                dst[...] = src
        else:
            for dst, src in zip(self.m, other.m):
                dst[...] = src
            for dst, src in zip(self.v, other.v):
                dst[...] = src


def optimizer_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: OptimizerState,
    kind: OptimizerKind,
) -> None:
    """Update parameters in place.

    RMSProp: s <- rho*s + (1-rho)*g^2, theta <- theta - lr*g/(sqrt(s)+eps).
    Adam: bias-corrected first/second moments, eps outside the sqrt.
    """
    if len(params) != len(grads):
        raise RuntimeError("params and grads length mismatch")
    state.step_count += 1
    if isinstance(kind, RMSProp):
        for p, g, s in zip(params, grads, state.square_avg):
            s *= kind.rho
            s += (1.0 - kind.rho) * g * g
            p -= kind.learning_rate * g / (np.sqrt(s) + kind.epsilon)
    else:
        t = state.step_count
        c1 = 1.0 - kind.beta1 ** t
        c2 = 1.0 - kind.beta2 ** t
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m *= kind.beta1
            m += (1.0 - kind.beta1) * g
            v *= kind.beta2
            v += (1.0 - kind.beta2) * g * g
            p -= kind.learning_rate * (m / c1) / (np.sqrt(v / c2) + kind.epsilon)
