"""Event datasets: synthetic two-domain generation, CSV ingestion, splits.

The synthetic generator stands in for the production-level simulated
samples: signal is drawn from the same distribution in both domains, while
the background distribution differs between source and target by a
configurable shift, so a classifier fit on source picks up features that
do not transfer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .metrics import roc_auc
from .model import BACKGROUND, SIGNAL, SOURCE, TARGET

LABEL_NAMES = {SIGNAL: "signal", BACKGROUND: "background"}
DOMAIN_NAMES = {SOURCE: "source", TARGET: "target"}
LABEL_CODES = {v: k for k, v in LABEL_NAMES.items()}
DOMAIN_CODES = {v: k for k, v in DOMAIN_NAMES.items()}

STRATA = (
    ("source", "signal"),
    ("source", "background"),
    ("target", "signal"),
    ("target", "background"),
)


@dataclass(frozen=True)
class Event:
    features: np.ndarray
    label: int
    domain: int
    weight: float


class Dataset:
    """Column-stored events with uniform feature dimension."""

    def __init__(self, features, labels, domains, weights,
                 feature_names=None, provenance=""):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int8)
        self.domains = np.asarray(domains, dtype=np.int8)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.features.ndim != 2:
            raise ConfigError("features must be a 2-d array")
        n = len(self.features)
        if n == 0:
            raise ConfigError("dataset must be non-empty")
        if not (len(self.labels) == len(self.domains) == len(self.weights) == n):
            raise ConfigError("feature/label/domain/weight lengths differ")
        if not np.isfinite(self.features).all():
            raise ConfigError("features must be finite")
        if not (self.weights > 0).all():
            raise ConfigError("weights must be positive")
        self.feature_names = (list(feature_names) if feature_names is not None
                              else [f"f{i}" for i in range(self.features.shape[1])])
        if len(self.feature_names) != self.features.shape[1]:
            raise ConfigError("feature_names length does not match feature dim")
        self.provenance = provenance

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> Event:
        return Event(self.features[i], int(self.labels[i]),
                     int(self.domains[i]), float(self.weights[i]))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def mask(self, domain=None, label=None) -> np.ndarray:
        m = np.ones(len(self), dtype=bool)
        if domain is not None:
            m &= self.domains == domain
        if label is not None:
            m &= self.labels == label
        return m

    def select(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.features[mask], self.labels[mask],
                       self.domains[mask], self.weights[mask],
                       self.feature_names, self.provenance)

    def domain_subset(self, domain: int) -> "Dataset":
        return self.select(self.mask(domain=domain))

    def stratum_counts(self) -> dict[str, int]:
        return {
            f"{dom}_{lab}": int(self.mask(domain=DOMAIN_CODES[dom],
                                          label=LABEL_CODES[lab]).sum())
            for dom, lab in STRATA
        }

    def signal_fraction(self, domain: int) -> float:
        m = self.mask(domain=domain)
        if not m.any():
            raise ConfigError(f"no events in domain {DOMAIN_NAMES[domain]}")
        return float((self.labels[m] == SIGNAL).mean())


@dataclass
class GaussianComponent:
    mean: np.ndarray
    scale: float = 1.0       # isotropic covariance scale*I
    weight: float = 1.0

    def to_dict(self):
        return {"mean": np.asarray(self.mean).tolist(),
                "scale": self.scale, "weight": self.weight}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                   scale=float(d.get("scale", 1.0)),
                   weight=float(d.get("weight", 1.0)))


@dataclass
class SyntheticConfig:
    """Gaussian-mixture parameters per (domain, label) stratum plus counts."""

    dims: int
    counts: dict[str, int]
    strata: dict[str, list[GaussianComponent]]
    target_signal_fraction: float = 0.05
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        if self.dims < 1:
            raise ConfigError("dims must be >= 1")
        if not 0.0 < self.target_signal_fraction < 1.0:
            raise ConfigError("target_signal_fraction must be in (0, 1)")
        for dom, lab in STRATA:
            key = f"{dom}_{lab}"
            if key not in self.counts:
                raise ConfigError(f"counts missing stratum {key!r}")
            if self.counts[key] < 0:
                raise ConfigError(f"count for {key!r} must be >= 0")
            if key not in self.strata:
                raise ConfigError(f"strata missing {key!r}")
            comps = self.strata[key]
            if not comps:
                raise ConfigError(f"stratum {key!r} needs at least one component")
            for comp in comps:
                if comp.scale <= 0:
                    raise ConfigError(
                        f"covariance scale must be positive in stratum {key!r}")
                if comp.weight <= 0:
                    raise ConfigError(
                        f"component weight must be positive in stratum {key!r}")
                if np.asarray(comp.mean).shape != (self.dims,):
                    raise ConfigError(
                        f"component mean in stratum {key!r} must have length "
                        f"{self.dims}")
        return self

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "seed": self.seed,
            "target_signal_fraction": self.target_signal_fraction,
            "counts": dict(self.counts),
            "strata": {k: [c.to_dict() for c in v] for k, v in self.strata.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        try:
            cfg = cls(
                dims=int(d["dims"]),
                counts={k: int(v) for k, v in d["counts"].items()},
                strata={k: [GaussianComponent.from_dict(c) for c in v]
                        for k, v in d["strata"].items()},
                target_signal_fraction=float(d.get("target_signal_fraction", 0.05)),
                seed=int(d.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad synthetic config: {exc}") from None
        return cfg.validate()

    @classmethod
    def default(
        cls,
        n_per_domain: int = 50_000,
        dims: int = 10,
        target_signal_fraction: float = 0.05,
        separation: float = 1.0,
        shift_magnitude: float = 0.8,
        shift_overlap: float = 0.6,
        target_background_scale: float = 1.2,
        seed: int = 0,
    ) -> "SyntheticConfig":
        """Shifted-background benchmark.

        Signal sits at +separation/2 along the first axis in both domains;
        source background mirrors it at -separation/2. The target background
        is additionally displaced by ``shift_magnitude`` along a unit vector
        whose component along the discriminative axis is ``shift_overlap``,
        and is drawn wider by ``target_background_scale``. A classifier fit
        on source alone therefore leans on a direction that misbehaves on
        target, which is the bias this package exists to remove.
        """
        e_sep = np.zeros(dims)
        e_sep[0] = 1.0
        shift_dir = np.zeros(dims)
        shift_dir[0] = shift_overlap
        if dims > 1:
            shift_dir[1] = np.sqrt(max(0.0, 1.0 - shift_overlap ** 2))
        elif abs(shift_overlap) != 1.0:
            raise ConfigError("dims=1 supports only shift_overlap = +/-1")
        sig_mean = 0.5 * separation * e_sep
        bkg_mean = -0.5 * separation * e_sep
        n_tgt_sig = int(round(n_per_domain * target_signal_fraction))
        counts = {
            "source_signal": n_per_domain // 2,
            "source_background": n_per_domain - n_per_domain // 2,
            "target_signal": n_tgt_sig,
            "target_background": n_per_domain - n_tgt_sig,
        }
        strata = {
            "source_signal": [GaussianComponent(sig_mean.copy())],
            "target_signal": [GaussianComponent(sig_mean.copy())],
            "source_background": [GaussianComponent(bkg_mean.copy())],
            "target_background": [GaussianComponent(
                bkg_mean + shift_magnitude * shift_dir,
                scale=target_background_scale)],
        }
        return cls(dims=dims, counts=counts, strata=strata,
                   target_signal_fraction=target_signal_fraction,
                   seed=seed).validate()


def generate_synthetic(config: SyntheticConfig,
                       rng: np.random.Generator | None = None) -> Dataset:
    """Draw the configured number of events per stratum. Deterministic per seed."""
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    blocks, labels, domains = [], [], []
    for dom, lab in STRATA:
        key = f"{dom}_{lab}"
        n = config.counts[key]
        if n == 0:
            continue
        comps = config.strata[key]
        probs = np.array([c.weight for c in comps], dtype=np.float64)
        probs /= probs.sum()
        choices = rng.choice(len(comps), size=n, p=probs)
        x = rng.standard_normal((n, config.dims))
        for idx, comp in enumerate(comps):
            sel = choices == idx
            x[sel] = x[sel] * np.sqrt(comp.scale) + np.asarray(comp.mean)
        blocks.append(x)
        labels.append(np.full(n, LABEL_CODES[lab], dtype=np.int8))
        domains.append(np.full(n, DOMAIN_CODES[dom], dtype=np.int8))
    if not blocks:
        raise ConfigError("all stratum counts are zero")
    return Dataset(
        np.vstack(blocks), np.concatenate(labels), np.concatenate(domains),
        np.ones(sum(len(b) for b in blocks)),
        provenance=f"synthetic(seed={config.seed})",
    )


def _log_density(x: np.ndarray, comps: list[GaussianComponent]) -> np.ndarray:
    dims = x.shape[1]
    parts = []
    total_w = sum(c.weight for c in comps)
    for c in comps:
        diff = x - np.asarray(c.mean)
        quad = (diff * diff).sum(axis=1) / c.scale
        norm = -0.5 * dims * np.log(2.0 * np.pi * c.scale)
        parts.append(np.log(c.weight / total_w) + norm - 0.5 * quad)
    stacked = np.stack(parts)
    peak = stacked.max(axis=0)
    return peak + np.log(np.exp(stacked - peak).sum(axis=0))


def bayes_auc(config: SyntheticConfig, domain: str = "source",
              n_samples: int = 200_000, seed: int = 1) -> float:
    """Monte Carlo estimate of the best achievable AUC in one domain.

    Scores signal and background draws by the true log likelihood ratio of
    the generating mixtures; no classifier can rank better.
    """
    config.validate()
    if domain not in ("source", "target"):
        raise ConfigError("domain must be 'source' or 'target'")
    rng = np.random.default_rng(seed)
    half = n_samples // 2
    samples = {}
    for lab in ("signal", "background"):
        comps = config.strata[f"{domain}_{lab}"]
        probs = np.array([c.weight for c in comps], dtype=np.float64)
        probs /= probs.sum()
        choices = rng.choice(len(comps), size=half, p=probs)
        x = rng.standard_normal((half, config.dims))
        for idx, comp in enumerate(comps):
            sel = choices == idx
            x[sel] = x[sel] * np.sqrt(comp.scale) + np.asarray(comp.mean)
        samples[lab] = x
    sig_comps = config.strata[f"{domain}_signal"]
    bkg_comps = config.strata[f"{domain}_background"]
    llr_sig = (_log_density(samples["signal"], sig_comps)
               - _log_density(samples["signal"], bkg_comps))
    llr_bkg = (_log_density(samples["background"], sig_comps)
               - _log_density(samples["background"], bkg_comps))
    scores = np.concatenate([llr_sig, llr_bkg])
    labels = np.concatenate([np.ones(half, np.int8), np.zeros(half, np.int8)])
    return roc_auc(scores, labels)


def write_events_csv(dataset: Dataset, path) -> None:
    """CSV with header f0..f{d-1},label,domain,weight.

    Floats are written with shortest round-trip repr, so read-back is
    bit-exact for finite doubles.
    """
    features = dataset.features.tolist()
    weights = dataset.weights.tolist()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(dataset.feature_names + ["label", "domain", "weight"]))
        fh.write("\n")
        for row, lab, dom, w in zip(features, dataset.labels, dataset.domains,
                                    weights):
            feats = ",".join(repr(v) for v in row)
            fh.write(f"{feats},{LABEL_NAMES[int(lab)]},"
                     f"{DOMAIN_NAMES[int(dom)]},{w!r}\n")


def read_events_csv(path) -> Dataset:
    """Parse a dataset CSV, reporting the line number of any malformed row."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            raise DataFormatError(f"{path}: empty file")
        cols = header.split(",")
        if cols[-3:] != ["label", "domain", "weight"]:
            raise DataFormatError(
                f"{path}: header must end in label,domain,weight")
        feature_names = cols[:-3]
        d = len(feature_names)
        if d == 0:
            raise DataFormatError(f"{path}: no feature columns")
        feats, labels, domains, weights = [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d + 3:
                raise DataFormatError(
                    f"{path}:{lineno}: expected {d + 3} fields, got {len(parts)}")
            try:
                row = np.array([float(v) for v in parts[:d]])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not np.isfinite(row).all():
                raise DataFormatError(
                    f"{path}:{lineno}: non-finite feature value")
            if parts[d] not in LABEL_CODES:
                raise DataFormatError(
                    f"{path}:{lineno}: label must be signal or background, "
                    f"got {parts[d]!r}")
            if parts[d + 1] not in DOMAIN_CODES:
                raise DataFormatError(
                    f"{path}:{lineno}: domain must be source or target, "
                    f"got {parts[d + 1]!r}")
            try:
                w = float(parts[d + 2])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not (np.isfinite(w) and w > 0):
                raise DataFormatError(f"{path}:{lineno}: weight must be positive")
            feats.append(row)
            labels.append(LABEL_CODES[parts[d]])
            domains.append(DOMAIN_CODES[parts[d + 1]])
            weights.append(w)
        if not feats:
            raise DataFormatError(f"{path}: no event rows")
    return Dataset(np.array(feats), labels, domains, weights,
                   feature_names=feature_names, provenance=str(path))


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split by (label, domain): disjoint, exhaustive, seeded."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("split fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    in_a = np.zeros(len(dataset), dtype=bool)
    for dom, lab in STRATA:
        idx = np.flatnonzero(dataset.mask(domain=DOMAIN_CODES[dom],
                                          label=LABEL_CODES[lab]))
        if len(idx) == 0:
            continue
        n_a = int(round(fraction * len(idx)))
        if n_a == 0 or n_a == len(idx):
            warnings.warn(
                f"stratum {dom}_{lab} too small to split at {fraction}; "
                "assigning best-effort", stacklevel=2)
            n_a = min(max(n_a, 1), len(idx) - 1) if len(idx) > 1 else n_a
        picked = rng.permutation(idx)[:n_a]
        in_a[picked] = True
    return dataset.select(in_a), dataset.select(~in_a)


def subsample_to_fraction(dataset: Dataset, domain: int, signal_fraction: float,
                          rng: np.random.Generator) -> Dataset:
    """Randomly drop signal events in one domain until it has the given
    signal fraction (within one event). Other domains pass through."""
    if not 0.0 < signal_fraction < 1.0:
        raise ConfigError("signal_fraction must be in (0, 1)")
    sig = np.flatnonzero(dataset.mask(domain=domain, label=SIGNAL))
    n_bkg = int(dataset.mask(domain=domain, label=BACKGROUND).sum())
    n_keep = int(round(signal_fraction / (1.0 - signal_fraction) * n_bkg))
    if n_keep > len(sig):
        achievable = len(sig) / (len(sig) + n_bkg) if n_bkg else 1.0
        raise ConfigError(
            f"not enough signal events in {DOMAIN_NAMES[domain]}: requested "
            f"fraction {signal_fraction}, achievable at most {achievable:.4f}")
    if n_keep == len(sig):
        return dataset
    drop = rng.permutation(sig)[n_keep:]
    keep = np.ones(len(dataset), dtype=bool)
    keep[drop] = False
    return dataset.select(keep)


@dataclass
class Standardizer:
    """Per-feature affine map fit on SOURCE statistics only."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        features = np.asarray(features, dtype=np.float64)
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean=mean, scale=scale)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        mean = np.asarray(d["mean"], dtype=np.float64)
        scale = np.asarray(d["scale"], dtype=np.float64)
        if mean.shape != scale.shape or mean.ndim != 1:
            raise ConfigError("standardizer mean/scale must be 1-d and equal length")
        return cls(mean, scale)
