"""Three-branch adversarial network for debiasing a signal/background classifier.

A shared feature extractor feeds two heads: a label predictor (signal vs
background, trained on source events only) and a domain classifier (source
vs target). The reversal layer is the identity in the forward direction;
during backprop the domain classifier's gradient is sign-flipped and scaled
by ``grl_lambda`` before it reaches the extractor, so the extractor is pushed
toward features the domain classifier cannot use.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .nn import (
    ActivationKind,
    DenseLayer,
    ForwardCache,
    backward,
    forward,
    make_layer,
)

CHECKPOINT_FORMAT_VERSION = 1

SIGNAL, BACKGROUND = 1, 0
SOURCE, TARGET = 1, 0


class LossSetup(enum.Enum):
    """Domain-head variant.

    SOFTMAX_XENT: two-unit softmax output with cross-entropy on both heads.
    LINEAR: single linear output unit on the domain head; its loss is the
    weighted mean score of target events minus that of source events, so it
    vanishes exactly when the two domains' mean scores coincide and its
    per-event gradient is independent of the score itself.
    """

    SOFTMAX_XENT = "softmax_xent"
    LINEAR = "linear"

    @classmethod
    def from_name(cls, name: str) -> "LossSetup":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(
                f"unknown loss_setup {name!r}; expected one of "
                f"{[k.value for k in cls]}"
            ) from None


class Head(enum.Enum):
    LABEL = "label"
    DOMAIN = "domain"


@dataclass
class DannConfig:
    input_dim: int
    feature_extractor_sizes: tuple[int, ...] = (20, 16, 13, 10)
    label_predictor_sizes: tuple[int, ...] = (2,)
    domain_classifier_sizes: tuple[int, ...] = (20, 35, 50, 2)
    hidden_activation: ActivationKind = ActivationKind.ELU
    elu_alpha: float = 1.0
    grl_lambda: float = 0.0
    loss_setup: LossSetup = LossSetup.SOFTMAX_XENT

    def validate(self) -> "DannConfig":
        if self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        for name in ("feature_extractor_sizes", "label_predictor_sizes",
                     "domain_classifier_sizes"):
            sizes = getattr(self, name)
            if not sizes or any(s < 1 for s in sizes):
                raise ConfigError(f"{name} must be a non-empty list of positive ints")
        if self.label_predictor_sizes[-1] != 2:
            raise ConfigError("label predictor must end in a 2-unit layer")
        if self.domain_classifier_sizes[-1] != 2:
            raise ConfigError("domain classifier must end in a 2-unit layer "
                              "(built as one linear unit under the linear setup)")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda must be >= 0")
        return self

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "feature_extractor_sizes": list(self.feature_extractor_sizes),
            "label_predictor_sizes": list(self.label_predictor_sizes),
            "domain_classifier_sizes": list(self.domain_classifier_sizes),
            "hidden_activation": self.hidden_activation.value,
            "elu_alpha": self.elu_alpha,
            "lambda": self.grl_lambda,
            "loss_setup": self.loss_setup.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DannConfig":
        d = dict(d)
        try:
            cfg = cls(
                input_dim=int(d.pop("input_dim")),
                feature_extractor_sizes=tuple(d.pop("feature_extractor_sizes", (20, 16, 13, 10))),
                label_predictor_sizes=tuple(d.pop("label_predictor_sizes", (2,))),
                domain_classifier_sizes=tuple(d.pop("domain_classifier_sizes", (20, 35, 50, 2))),
                hidden_activation=ActivationKind.from_name(d.pop("hidden_activation", "elu")),
                elu_alpha=float(d.pop("elu_alpha", 1.0)),
                grl_lambda=float(d.pop("lambda", d.pop("grl_lambda", 0.0))),
                loss_setup=LossSetup.from_name(d.pop("loss_setup", "softmax_xent")),
            )
        except KeyError as exc:
            raise ConfigError(f"model config missing field {exc}") from None
        if d:
            raise ConfigError(f"unknown model config fields: {sorted(d)}")
        return cfg.validate()

    def with_lambda(self, value: float) -> "DannConfig":
        return replace(self, grl_lambda=float(value)).validate()


@dataclass
class DannNetwork:
    """Parameter sets of the three branches plus the coupling settings."""

    config: DannConfig
    extractor: list[DenseLayer]
    label_head: list[DenseLayer]
    domain_head: list[DenseLayer]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for stack in (self.extractor, self.label_head, self.domain_head):
            for layer in stack:
                out.append(layer.weights)
                out.append(layer.biases)
        return out

    def parameter_snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def load_parameter_snapshot(self, snapshot: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(params) != len(snapshot):
            raise RuntimeError("snapshot does not match parameter count")
        for p, s in zip(params, snapshot):
            p[...] = s


def _build_stack(sizes, input_dim, hidden, elu_alpha, final, rng):
    stack = []
    fan_in = input_dim
    for width in sizes[:-1]:
        stack.append(make_layer(fan_in, width, hidden, rng, elu_alpha))
        fan_in = width
    final_width, final_activation = final
    stack.append(make_layer(fan_in, final_width, final_activation, rng, elu_alpha))
    return stack


def build_network(config: DannConfig, rng: np.random.Generator) -> DannNetwork:
    """Initialize all three branches (Glorot-uniform weights, zero biases).

    The extractor layers all use the hidden activation; each head's last
    layer is its output layer. Under the linear setup the domain head ends
    in a single identity unit instead of the configured 2-unit softmax.
    """
    config.validate()
    hidden = config.hidden_activation
    alpha = config.elu_alpha
    extractor = []
    fan_in = config.input_dim
    for width in config.feature_extractor_sizes:
        extractor.append(make_layer(fan_in, width, hidden, rng, alpha))
        fan_in = width
    feat_dim = config.feature_extractor_sizes[-1]
    label_head = _build_stack(
        config.label_predictor_sizes, feat_dim, hidden, alpha,
        final=(2, ActivationKind.SOFTMAX), rng=rng,
    )
    if config.loss_setup is LossSetup.SOFTMAX_XENT:
        domain_final = (config.domain_classifier_sizes[-1], ActivationKind.SOFTMAX)
    else:
        domain_final = (1, ActivationKind.IDENTITY)
    domain_head = _build_stack(
        config.domain_classifier_sizes, feat_dim, hidden, alpha,
        final=domain_final, rng=rng,
    )
    return DannNetwork(config, extractor, label_head, domain_head)


@dataclass
class DannOutputs:
    """Forward results plus the caches needed for dann_backward."""

    features: np.ndarray
    label_probs: np.ndarray       # rows (1 - y_i, y_i), y_i = signal probability
    domain_out: np.ndarray        # (n, 2) probabilities, or (n,) linear scores
    extractor_cache: ForwardCache = field(repr=False, default=None)
    label_cache: ForwardCache = field(repr=False, default=None)
    domain_cache: ForwardCache = field(repr=False, default=None)

    @property
    def signal_scores(self) -> np.ndarray:
        return self.label_probs[:, 1]


def dann_forward(net: DannNetwork, batch: np.ndarray) -> DannOutputs:
    """Shared extractor pass feeding both heads. ``grl_lambda`` plays no role here."""
    cache_f = forward(net.extractor, batch)
    features = cache_f.output
    cache_y = forward(net.label_head, features)
    cache_d = forward(net.domain_head, features)
    domain_out = cache_d.output
    if net.config.loss_setup is LossSetup.LINEAR:
        domain_out = domain_out[:, 0]
    return DannOutputs(
        features=features,
        label_probs=cache_y.output,
        domain_out=domain_out,
        extractor_cache=cache_f,
        label_cache=cache_y,
        domain_cache=cache_d,
    )


def _as_int_array(values, name):
    arr = np.asarray(values)
    if arr.dtype == bool:
        arr = arr.astype(np.int64)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ConfigError(f"{name} must be integer-coded (0/1)")
    return arr


def label_loss(outputs: DannOutputs, labels, domains, weights) -> float:
    """Weighted mean cross-entropy over source events; target events are gated out.

    Signal events contribute -ln(y_i), background events -ln(1 - y_i).
    """
    labels = _as_int_array(labels, "labels")
    domains = _as_int_array(domains, "domains")
    weights = np.asarray(weights, dtype=np.float64)
    src = domains == SOURCE
    w_src = weights[src]
    total = w_src.sum()
    if not total > 0.0:
        raise ConfigError("empty source batch: label loss needs source events "
                          "with positive weight")
    y = outputs.label_probs[src, 1]
    with np.errstate(divide="ignore"):
        ce = np.where(labels[src] == SIGNAL, -np.log(y), -np.log1p(-y))
    return float(np.dot(w_src, ce) / total)


def domain_loss(outputs: DannOutputs, domains, weights, setup: LossSetup) -> float:
    """Domain-classifier loss; source is class 1, target class 0."""
    domains = _as_int_array(domains, "domains")
    weights = np.asarray(weights, dtype=np.float64)
    src = domains == SOURCE
    if src.all() or not src.any():
        warnings.warn("domain loss evaluated on a single-domain batch",
                      stacklevel=2)
    if setup is LossSetup.SOFTMAX_XENT:
        q = outputs.domain_out
        if q.ndim != 2:
            raise ConfigError("softmax_xent setup expects 2-column domain output")
        with np.errstate(divide="ignore"):
            ce = np.where(src, -np.log(q[:, 1]), -np.log(q[:, 0]))
        total = weights.sum()
        if not total > 0.0:
            raise ConfigError("domain loss needs positive total weight")
        return float(np.dot(weights, ce) / total)
    score = np.asarray(outputs.domain_out, dtype=np.float64)
    if score.ndim != 1:
        raise ConfigError("linear setup expects a scalar domain score per event")
    loss = 0.0
    w_src = weights[src].sum()
    w_tgt = weights[~src].sum()
    if w_src > 0.0:
        loss -= np.dot(weights[src], score[src]) / w_src
    if w_tgt > 0.0:
        loss += np.dot(weights[~src], score[~src]) / w_tgt
    return float(loss)


@dataclass
class DannGradients:
    """(dW, db) per layer, aligned with the network's stacks."""

    extractor: list[tuple[np.ndarray, np.ndarray]]
    label_head: list[tuple[np.ndarray, np.ndarray]]
    domain_head: list[tuple[np.ndarray, np.ndarray]]

    def flatten(self) -> list[np.ndarray]:
        out = []
        for stack in (self.extractor, self.label_head, self.domain_head):
            for dw, db in stack:
                out.append(dw)
                out.append(db)
        return out


def _label_logit_grad(outputs, labels, domains, weights):
    labels = _as_int_array(labels, "labels")
    domains = _as_int_array(domains, "domains")
    weights = np.asarray(weights, dtype=np.float64)
    src = domains == SOURCE
    w = np.where(src, weights, 0.0)
    total = w.sum()
    if not total > 0.0:
        raise ConfigError("empty source batch: label loss needs source events "
                          "with positive weight")
    probs = outputs.label_probs
    dz = np.zeros_like(probs)
    # fused softmax + cross-entropy: d/dz = w * (p - onehot) / total_weight
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(probs)), labels] = 1.0
    dz[src] = (w[src, None] / total) * (probs[src] - onehot[src])
    return dz


def _domain_output_grad(outputs, domains, weights, setup):
    domains = _as_int_array(domains, "domains")
    weights = np.asarray(weights, dtype=np.float64)
    src = domains == SOURCE
    if setup is LossSetup.SOFTMAX_XENT:
        q = outputs.domain_out
        onehot = np.zeros_like(q)
        onehot[:, 1] = src
        onehot[:, 0] = ~src
        total = weights.sum()
        if not total > 0.0:
            raise ConfigError("domain loss needs positive total weight")
        return (weights[:, None] / total) * (q - onehot)
    w_src = weights[src].sum()
    w_tgt = weights[~src].sum()
    dscore = np.zeros(len(domains))
    if w_src > 0.0:
        dscore[src] = -weights[src] / w_src
    if w_tgt > 0.0:
        dscore[~src] = weights[~src] / w_tgt
    return dscore[:, None]


def dann_backward(
    net: DannNetwork,
    outputs: DannOutputs,
    labels,
    domains,
    label_weights,
    domain_weights,
    grl_lambda: float | None = None,
) -> DannGradients:
    """Gradients of both losses with the reversal applied at the extractor boundary.

    Head gradients are the plain gradients of their own losses (the domain
    head itself is never sign-flipped). Each extractor parameter gets
    d(label loss)/d(theta) - lambda * d(domain loss)/d(theta), with the two
    contributions computed by separate passes so the decomposition is exact
    in floating point.
    """
    lam = net.config.grl_lambda if grl_lambda is None else float(grl_lambda)
    if lam < 0:
        raise ConfigError("grl_lambda must be >= 0")
    dz_y = _label_logit_grad(outputs, labels, domains, label_weights)
    label_grads, g_feat_y = backward(
        net.label_head, outputs.label_cache, dz_y, from_logits=True)
    dz_d = _domain_output_grad(outputs, domains, domain_weights,
                               net.config.loss_setup)
    domain_grads, g_feat_d = backward(
        net.domain_head, outputs.domain_cache, dz_d, from_logits=True)
    ext_label, _ = backward(net.extractor, outputs.extractor_cache, g_feat_y)
    if lam == 0.0:
        ext = ext_label
    else:
        ext_domain, _ = backward(net.extractor, outputs.extractor_cache, g_feat_d)
        ext = [(dw_y - lam * dw_d, db_y - lam * db_d)
               for (dw_y, db_y), (dw_d, db_d) in zip(ext_label, ext_domain)]
    return DannGradients(extractor=ext, label_head=label_grads,
                         domain_head=domain_grads)


def balance_weights(
    labels,
    domains,
    weights,
    head: Head,
    target_signal_fraction: float = 0.05,
) -> np.ndarray:
    """Per-event weights rescaled for one head's loss.

    LABEL head: source signal and source background are scaled to equal
    weight sums (preserving the total source weight); target events get
    weight 0, implementing the gate that keeps them out of the label loss.

    DOMAIN head: target weights are kept as-is (their labels are never
    read); source class weights are rescaled so the source signal fraction
    by weight equals ``target_signal_fraction`` and the total source weight
    equals the total target weight.
    """
    labels = _as_int_array(labels, "labels")
    domains = _as_int_array(domains, "domains")
    weights = np.asarray(weights, dtype=np.float64)
    if len(labels) == 0:
        raise ConfigError("cannot balance an empty event list")
    src = domains == SOURCE
    src_sig = src & (labels == SIGNAL)
    src_bkg = src & (labels == BACKGROUND)
    w_sig = weights[src_sig].sum()
    w_bkg = weights[src_bkg].sum()
    if w_sig <= 0.0:
        raise ConfigError("no source signal events to balance")
    if w_bkg <= 0.0:
        raise ConfigError("no source background events to balance")
    out = weights.astype(np.float64).copy()
    if head is Head.LABEL:
        half = (w_sig + w_bkg) / 2.0
        out[src_sig] *= half / w_sig
        out[src_bkg] *= half / w_bkg
        out[~src] = 0.0
        return out
    if not 0.0 < target_signal_fraction < 1.0:
        raise ConfigError("target_signal_fraction must be in (0, 1)")
    w_tgt = weights[~src].sum()
    if w_tgt <= 0.0:
        raise ConfigError("no target events to balance against")
    out[src_sig] *= target_signal_fraction * w_tgt / w_sig
    out[src_bkg] *= (1.0 - target_signal_fraction) * w_tgt / w_bkg
    return out


def _layer_to_dict(layer: DenseLayer) -> dict:
    return {
        "weights": layer.weights.tolist(),    # row-major, shape (out, in)
        "biases": layer.biases.tolist(),
        "activation": layer.activation.value,
        "elu_alpha": layer.elu_alpha,
    }


def _layer_from_dict(d: dict) -> DenseLayer:
    try:
        weights = np.asarray(d["weights"], dtype=np.float64)
        biases = np.asarray(d["biases"], dtype=np.float64)
        activation = ActivationKind.from_name(d["activation"])
    except KeyError as exc:
        raise ConfigError(f"checkpoint layer missing field {exc}") from None
    if weights.ndim != 2 or biases.ndim != 1 or weights.shape[0] != biases.shape[0]:
        raise ConfigError("checkpoint layer has inconsistent shapes")
    if not (np.isfinite(weights).all() and np.isfinite(biases).all()):
        raise ConfigError("checkpoint layer contains non-finite values")
    return DenseLayer(weights, biases, activation, float(d.get("elu_alpha", 1.0)))


def network_to_dict(net: DannNetwork) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": net.config.to_dict(),
        "extractor": [_layer_to_dict(l) for l in net.extractor],
        "label_head": [_layer_to_dict(l) for l in net.label_head],
        "domain_head": [_layer_to_dict(l) for l in net.domain_head],
    }


def network_from_dict(d: dict) -> DannNetwork:
    version = d.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"unsupported checkpoint format_version {version!r}; "
            f"this build reads version {CHECKPOINT_FORMAT_VERSION}")
    config = DannConfig.from_dict(d["config"])
    net = DannNetwork(
        config=config,
        extractor=[_layer_from_dict(l) for l in d["extractor"]],
        label_head=[_layer_from_dict(l) for l in d["label_head"]],
        domain_head=[_layer_from_dict(l) for l in d["domain_head"]],
    )
    for stack in (net.extractor, net.label_head, net.domain_head):
        for prev, cur in zip(stack, stack[1:]):
            if cur.fan_in != prev.fan_out:
                raise ConfigError("checkpoint layers have incompatible widths")
    return net
