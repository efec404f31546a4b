"""Training loop: 1:1 domain batches, dynamic stopping, best-epoch selection.

Per epoch every source training event is consumed once; each batch is half
source, half target, with the smaller stream cycling through fresh shuffles.
The run keeps the parameters from the epoch with the lowest label-predictor
loss on a designated split, and can watch for the rare loss blow-ups that
adversarial training produces, optionally restoring an earlier snapshot.
"""

from __future__ import annotations

import enum
import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Standardizer
from .errors import ConfigError, TrainingDiverged
from .model import (
    SOURCE,
    TARGET,
    DannConfig,
    DannNetwork,
    Head,
    balance_weights,
    build_network,
    dann_backward,
    dann_forward,
    domain_loss,
    label_loss,
    network_from_dict,
    network_to_dict,
)
from .nn import (
    OptimizerKind,
    OptimizerState,
    RMSProp,
    optimizer_kind_from_dict,
    optimizer_kind_to_dict,
    optimizer_step,
)


class SpikeAction(enum.Enum):
    NONE = "none"
    FLAG = "flag"
    ROLLBACK = "rollback"


@dataclass
class SpikeGuard:
    """Loss-spike policy: 'off', 'detect' (flag only) or 'rollback'."""

    policy: str = "off"
    depth: int = 10          # epochs to rewind on rollback
    window: int = 50         # trailing epochs used for the spike threshold
    n_sigma: float = 10.0

    def validate(self) -> "SpikeGuard":
        if self.policy not in ("off", "detect", "rollback"):
            raise ConfigError("spike_guard policy must be off, detect or rollback")
        if self.depth < 1 or self.window < 1:
            raise ConfigError("spike_guard depth and window must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {"policy": self.policy, "depth": self.depth,
                "window": self.window, "n_sigma": self.n_sigma}

    @classmethod
    def from_dict(cls, d) -> "SpikeGuard":
        if isinstance(d, str):
            return cls(policy=d).validate()
        return cls(policy=d.get("policy", "off"), depth=int(d.get("depth", 10)),
                   window=int(d.get("window", 50)),
                   n_sigma=float(d.get("n_sigma", 10.0))).validate()


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 16384
    optimizer: OptimizerKind = field(default_factory=RMSProp)
    stop_window: int = 50
    stop_threshold: float = 0.0005
    epoch_bounds: tuple[int, int] = (200, 1000)
    target_signal_fraction: float = 0.05
    validation_fraction: float = 0.2
    best_epoch_split: str = "validation"
    spike_guard: SpikeGuard = field(default_factory=SpikeGuard)

    def validate(self) -> "TrainConfig":
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise ConfigError("batch_size must be even (1:1 domain split)")
        if self.stop_window < 1:
            raise ConfigError("stop_window must be >= 1")
        if not 0.0 <= self.stop_threshold < 1.0:
            raise ConfigError("stop_threshold must be in [0, 1)")
        lo, hi = self.epoch_bounds
        if lo < 1 or hi < lo:
            raise ConfigError("epoch_bounds must satisfy 1 <= min <= max")
        if not 0.0 < self.target_signal_fraction < 1.0:
            raise ConfigError("target_signal_fraction must be in (0, 1)")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction must be in [0, 1)")
        if self.best_epoch_split not in ("validation", "train"):
            raise ConfigError("best_epoch_split must be 'validation' or 'train'")
        if self.best_epoch_split == "validation" and self.validation_fraction == 0:
            raise ConfigError("validation split requested but validation_fraction=0")
        self.optimizer.validate()
        self.spike_guard.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "batch_size": self.batch_size,
            "optimizer": optimizer_kind_to_dict(self.optimizer),
            "stop_window": self.stop_window,
            "stop_threshold": self.stop_threshold,
            "epoch_bounds": list(self.epoch_bounds),
            "target_signal_fraction": self.target_signal_fraction,
            "validation_fraction": self.validation_fraction,
            "best_epoch_split": self.best_epoch_split,
            "spike_guard": self.spike_guard.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        try:
            cfg = cls(
                seed=int(d.pop("seed", 0)),
                batch_size=int(d.pop("batch_size", 16384)),
                optimizer=optimizer_kind_from_dict(d.pop("optimizer", {})),
                stop_window=int(d.pop("stop_window", 50)),
                stop_threshold=float(d.pop("stop_threshold", 0.0005)),
                epoch_bounds=tuple(d.pop("epoch_bounds", (200, 1000))),
                target_signal_fraction=float(d.pop("target_signal_fraction", 0.05)),
                validation_fraction=float(d.pop("validation_fraction", 0.2)),
                best_epoch_split=str(d.pop("best_epoch_split", "validation")),
                spike_guard=SpikeGuard.from_dict(d.pop("spike_guard", {})),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad train config: {exc}") from None
        if d:
            raise ConfigError(f"unknown train config fields: {sorted(d)}")
        return cfg.validate()


@dataclass
class TrainRecord:
    """Per-epoch loss history plus best-epoch and spike bookkeeping."""

    train_label: list[float] = field(default_factory=list)
    train_domain: list[float] = field(default_factory=list)
    train_total: list[float] = field(default_factory=list)
    val_label: list[float] = field(default_factory=list)
    val_domain: list[float] = field(default_factory=list)
    val_total: list[float] = field(default_factory=list)
    spike_epochs: list[int] = field(default_factory=list)
    rollback_epochs: list[tuple[int, int]] = field(default_factory=list)
    best_epoch: int = -1
    best_label_loss: float = math.inf
    stop_reason: str = ""

    @property
    def n_epochs(self) -> int:
        return len(self.train_label)

    def monitored_label(self, split: str) -> list[float]:
        return self.val_label if split == "validation" else self.train_label

    def summary(self) -> dict:
        n = self.n_epochs
        return {
            "n_epochs": n,
            "best_epoch": self.best_epoch,
            "best_label_loss": self.best_label_loss,
            "stop_reason": self.stop_reason,
            "n_spikes": len(self.spike_epochs),
            "spike_rate": len(self.spike_epochs) / n if n else 0.0,
        }

    def to_dict(self) -> dict:
        return {
            "losses": {
                "train": {"label": self.train_label, "domain": self.train_domain,
                          "total": self.train_total},
                "validation": {"label": self.val_label, "domain": self.val_domain,
                               "total": self.val_total},
            },
            "spike_epochs": self.spike_epochs,
            "rollback_epochs": [list(p) for p in self.rollback_epochs],
            **self.summary(),
        }

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,label_loss,domain_loss,total_loss,split\n")
            for i in range(self.n_epochs):
                fh.write(f"{i},{self.train_label[i]!r},{self.train_domain[i]!r},"
                         f"{self.train_total[i]!r},train\n")
            for i in range(len(self.val_label)):
                fh.write(f"{i},{self.val_label[i]!r},{self.val_domain[i]!r},"
                         f"{self.val_total[i]!r},validation\n")


def make_epoch_batches(source, target, batch_size: int,
                       rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Index batches for one epoch, each half source and half target.

    The number of batches covers the source pool once; whichever stream a
    batch exhausts wraps around with a fresh shuffle, so repeated target
    events within an epoch are re-drawn rather than repeated in order.
    """
    n_src, n_tgt = len(source), len(target)
    if n_src == 0 or n_tgt == 0:
        raise ConfigError("both domains need at least one training event")
    if batch_size < 2 or batch_size % 2 != 0:
        raise ConfigError("batch_size must be even")
    half = batch_size // 2
    n_batches = max(1, math.ceil(n_src / half))
    needed = n_batches * half

    def stream(n, total):
        chunks = []
        got = 0
        while got < total:
            perm = rng.permutation(n)
            take = min(n, total - got)
            chunks.append(perm[:take])
            got += take
        return np.concatenate(chunks)

    src_stream = stream(n_src, needed)
    tgt_stream = stream(n_tgt, needed)
    return [(src_stream[i * half:(i + 1) * half],
             tgt_stream[i * half:(i + 1) * half]) for i in range(n_batches)]


def should_stop(total_loss_history, window: int, threshold: float,
                bounds: tuple[int, int]) -> bool:
    """True once the trailing-window mean stops improving past the threshold.

    Compares the mean of the last `window` epochs against the mean of the
    disjoint `window` epochs before it; never stops before the lower epoch
    bound (or before two full windows exist), always stops at the upper.
    """
    epoch = len(total_loss_history)
    if epoch == 0:
        raise ConfigError("should_stop needs at least one recorded epoch")
    lo, hi = bounds
    if epoch >= hi:
        return True
    if epoch < lo or epoch < 2 * window:
        return False
    recent = float(np.mean(total_loss_history[-window:]))
    previous = float(np.mean(total_loss_history[-2 * window:-window]))
    return recent >= previous * (1.0 - threshold)


def spike_monitor(label_loss_history, current_label_loss: float,
                  guard: SpikeGuard, snapshots_available: int = 0) -> SpikeAction:
    """Classify the current epoch's label loss against its trailing window.

    A spike is a loss above mean + n_sigma * std of the previous `window`
    epochs. Rollback is only offered when enough snapshots exist; otherwise
    the spike is flagged and a warning emitted.
    """
    if guard.policy == "off" or len(label_loss_history) == 0:
        return SpikeAction.NONE
    window = np.asarray(label_loss_history[-guard.window:], dtype=np.float64)
    mu = window.mean()
    sigma = window.std()
    if not current_label_loss > mu + guard.n_sigma * sigma:
        return SpikeAction.NONE
    if guard.policy == "detect":
        return SpikeAction.FLAG
    if snapshots_available < guard.depth:
        warnings.warn("spike detected before enough snapshots accumulated; "
                      "flagging without rollback", stacklevel=2)
        return SpikeAction.FLAG
    return SpikeAction.ROLLBACK


@dataclass
class TrainedModel:
    """Best-epoch network bundled with the source-fitted feature scaling."""

    network: DannNetwork
    standardizer: Standardizer

    def outputs(self, raw_features: np.ndarray):
        return dann_forward(self.network, self.standardizer.apply(raw_features))

    def signal_scores(self, raw_features: np.ndarray) -> np.ndarray:
        """Label-predictor signal probability per event, in [0, 1]."""
        return self.outputs(raw_features).signal_scores

    def to_dict(self) -> dict:
        d = network_to_dict(self.network)
        d["standardizer"] = self.standardizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        if "standardizer" not in d:
            raise ConfigError("checkpoint is missing the standardizer block")
        return cls(network=network_from_dict(d),
                   standardizer=Standardizer.from_dict(d["standardizer"]))


def _stratified_indices(labels, fraction, rng):
    """Validation indices holding `fraction` of each label class."""
    val = np.zeros(len(labels), dtype=bool)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        n_val = int(round(fraction * len(idx)))
        val[rng.permutation(idx)[:n_val]] = True
    return val


def _pool_weights(labels_src, w_src, w_tgt, fraction):
    """Label-head and domain-head weights for a source+target pool.

    Target labels are never consulted: the label head gates target events to
    weight zero and the domain head only rescales the source side.
    """
    labels = np.concatenate([labels_src, np.zeros(len(w_tgt), dtype=np.int8)])
    domains = np.concatenate([np.full(len(w_src), SOURCE, dtype=np.int8),
                              np.full(len(w_tgt), TARGET, dtype=np.int8)])
    weights = np.concatenate([w_src, w_tgt])
    w_label = balance_weights(labels, domains, weights, Head.LABEL)
    w_domain = balance_weights(labels, domains, weights, Head.DOMAIN, fraction)
    n_src = len(w_src)
    return (w_label[:n_src], w_domain[:n_src], w_domain[n_src:])


def train(source: Dataset, target: Dataset, dann_config: DannConfig,
          train_config: TrainConfig) -> tuple[TrainedModel, TrainRecord]:
    """Fit the adversarial network; returns the best-epoch model and history.

    `source` must be source-domain events with labels; `target` is treated
    as unlabeled throughout (its label column is never read). Deterministic
    for a fixed seed.
    """
    dann_config.validate()
    train_config.validate()
    if source.dim != target.dim:
        raise ConfigError(f"source dim {source.dim} != target dim {target.dim}")
    if dann_config.input_dim != source.dim:
        raise ConfigError(
            f"model expects {dann_config.input_dim} features, data has {source.dim}")
    if not (source.domains == SOURCE).all():
        raise ConfigError("`source` must contain only source-domain events")
    if not (target.domains == TARGET).all():
        raise ConfigError("`target` must contain only target-domain events")

    rng = np.random.default_rng(train_config.seed)
    standardizer = Standardizer.fit(source.features)

    # hold-out split: stratified on source labels, label-blind on target
    val_frac = train_config.validation_fraction
    if val_frac > 0:
        src_val_mask = _stratified_indices(source.labels, val_frac, rng)
        tgt_val_mask = np.zeros(len(target), dtype=bool)
        n_tval = int(round(val_frac * len(target)))
        tgt_val_mask[rng.permutation(len(target))[:n_tval]] = True
    else:
        src_val_mask = np.zeros(len(source), dtype=bool)
        tgt_val_mask = np.zeros(len(target), dtype=bool)

    xs = standardizer.apply(source.features)
    xt = standardizer.apply(target.features)
    ys = source.labels.astype(np.int8)
    xs_tr, ys_tr, ws_tr = xs[~src_val_mask], ys[~src_val_mask], source.weights[~src_val_mask]
    xt_tr, wt_tr = xt[~tgt_val_mask], target.weights[~tgt_val_mask]

    fraction = train_config.target_signal_fraction
    wl_src, wd_src, wd_tgt = _pool_weights(ys_tr, ws_tr, wt_tr, fraction)

    has_val = val_frac > 0
    if has_val:
        xs_va, ys_va, ws_va = xs[src_val_mask], ys[src_val_mask], source.weights[src_val_mask]
        xt_va, wt_va = xt[tgt_val_mask], target.weights[tgt_val_mask]
        vl_src, vd_src, vd_tgt = _pool_weights(ys_va, ws_va, wt_va, fraction)
        x_val = np.vstack([xs_va, xt_va])
        labels_val = np.concatenate([ys_va, np.zeros(len(xt_va), dtype=np.int8)])
        domains_val = np.concatenate([np.full(len(xs_va), SOURCE, dtype=np.int8),
                                      np.full(len(xt_va), TARGET, dtype=np.int8)])
        w_label_val = np.concatenate([vl_src, np.zeros(len(xt_va))])
        w_domain_val = np.concatenate([vd_src, vd_tgt])

    net = build_network(dann_config, rng)
    params = net.parameters()
    opt_state = OptimizerState(params, train_config.optimizer)

    record = TrainRecord()
    guard = train_config.spike_guard
    snapshots: deque = deque(maxlen=guard.depth + 1)
    best_params = net.parameter_snapshot()
    monitored_split = (train_config.best_epoch_split
                       if has_val or train_config.best_epoch_split == "train"
                       else "train")
    setup = dann_config.loss_setup
    lam = dann_config.grl_lambda

    epoch = 0
    while True:
        batches = make_epoch_batches(xs_tr, xt_tr, train_config.batch_size, rng)
        label_sum = domain_sum = 0.0
        for src_idx, tgt_idx in batches:
            x = np.vstack([xs_tr[src_idx], xt_tr[tgt_idx]])
            labels = np.concatenate([ys_tr[src_idx],
                                     np.zeros(len(tgt_idx), dtype=np.int8)])
            domains = np.concatenate([np.full(len(src_idx), SOURCE, dtype=np.int8),
                                      np.full(len(tgt_idx), TARGET, dtype=np.int8)])
            w_label = np.concatenate([wl_src[src_idx], np.zeros(len(tgt_idx))])
            w_domain = np.concatenate([wd_src[src_idx], wd_tgt[tgt_idx]])
            outputs = dann_forward(net, x)
            ll = label_loss(outputs, labels, domains, w_label)
            dl = domain_loss(outputs, domains, w_domain, setup)
            if not (math.isfinite(ll) and math.isfinite(dl)):
                record.stop_reason = "diverged"
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} "
                    f"(label={ll}, domain={dl})", record=record)
            grads = dann_backward(net, outputs, labels, domains,
                                  w_label, w_domain, lam)
            optimizer_step(params, grads.flatten(), opt_state,
                           train_config.optimizer)
            label_sum += ll
            domain_sum += dl
        train_ll = label_sum / len(batches)
        train_dl = domain_sum / len(batches)
        record.train_label.append(train_ll)
        record.train_domain.append(train_dl)
        record.train_total.append(train_ll + train_dl)

        if has_val:
            val_out = dann_forward(net, x_val)
            vll = label_loss(val_out, labels_val, domains_val, w_label_val)
            vdl = domain_loss(val_out, domains_val, w_domain_val, setup)
            if not (math.isfinite(vll) and math.isfinite(vdl)):
                record.stop_reason = "diverged"
                raise TrainingDiverged(
                    f"non-finite validation loss at epoch {epoch}", record=record)
            record.val_label.append(vll)
            record.val_domain.append(vdl)
            record.val_total.append(vll + vdl)

        monitored = record.monitored_label(monitored_split)
        if monitored[-1] < record.best_label_loss:
            record.best_label_loss = monitored[-1]
            record.best_epoch = epoch
            best_params = net.parameter_snapshot()

        if guard.policy != "off":
            action = spike_monitor(record.train_label[:-1], train_ll, guard,
                                   snapshots_available=len(snapshots))
            if action is not SpikeAction.NONE:
                record.spike_epochs.append(epoch)
            if action is SpikeAction.ROLLBACK:
                back_epoch, saved_params, saved_state = snapshots[-guard.depth]
                net.load_parameter_snapshot(saved_params)
                opt_state.load(saved_state)
                record.rollback_epochs.append((epoch, back_epoch))
                snapshots.clear()   # history below the restore point is stale
            snapshots.append((epoch, net.parameter_snapshot(), opt_state.copy()))

        epoch += 1
        if should_stop(record.train_total, train_config.stop_window,
                       train_config.stop_threshold, train_config.epoch_bounds):
            record.stop_reason = ("max_epochs"
                                  if epoch >= train_config.epoch_bounds[1]
                                  else "converged")
            break

    net.load_parameter_snapshot(best_params)
    return TrainedModel(network=net, standardizer=standardizer), record
