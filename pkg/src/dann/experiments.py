"""Experiment protocol: repeated seeded trainings, scans, unsupervised selection.

A scan point runs `n_repeats` independent trainings (distinct derived seeds,
shared data) and aggregates test-split metrics with median and 15.8/84.2
percentile bands. The coupling strength is then chosen from source-side
information alone: among the grid values whose median KS distance is within
tolerance of the smallest, take the one with the best source AUC.
"""

from __future__ import annotations

import hashlib
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, SyntheticConfig, generate_synthetic, split
from .errors import ConfigError, TrainingDiverged
from .metrics import (
    ams_from_histogram,
    ks_distance,
    response_histogram,
    roc_auc,
)
from .model import SOURCE, TARGET, DannConfig, Head, balance_weights
from .training import TrainConfig, TrainedModel, train

PCTL_LO = 15.8
PCTL_HI = 84.2

METRIC_NAMES = ("auc_source", "auc_target", "ks", "ams",
                "final_label_loss", "best_label_loss", "n_epochs")


def aggregate_percentile(values, p: float) -> float:
    """Linear-interpolation percentile of a sample, p in [0, 100]."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ConfigError("percentile of an empty sample")
    if not 0.0 <= p <= 100.0:
        raise ConfigError("percentile must be in [0, 100]")
    return float(np.percentile(values, p, method="linear"))


def derive_seed(master_seed: int, *parts) -> int:
    """Stable sub-seed from the master seed and a tag tuple (grid point,
    repeat index, ...), so extending a grid never reshuffles earlier runs."""
    text = repr((int(master_seed),) + tuple(parts))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def domain_balanced_ks(scores_source, labels_source, weights_source,
                       scores_target, weights_target,
                       target_signal_fraction: float) -> float:
    """KS distance between the two domains' response distributions with the
    source composition reweighted to the assumed target signal fraction.
    Target labels are not used."""
    n_src = len(scores_source)
    labels = np.concatenate([np.asarray(labels_source),
                             np.zeros(len(scores_target), dtype=np.int8)])
    domains = np.concatenate([np.full(n_src, SOURCE, dtype=np.int8),
                              np.full(len(scores_target), TARGET, dtype=np.int8)])
    weights = np.concatenate([weights_source, weights_target])
    w = balance_weights(labels, domains, weights, Head.DOMAIN,
                        target_signal_fraction)
    return ks_distance(scores_source, w[:n_src], scores_target, w[n_src:])


@dataclass
class EvalSettings:
    target_signal_fraction: float = 0.05
    n_bins: int = 20
    ams_events: float = 50_000.0
    flat_unc: float = 0.10


def evaluate_model(model: TrainedModel, test_source: Dataset,
                   test_target: Dataset,
                   settings: EvalSettings = EvalSettings()) -> dict:
    """Test-split performance: AUC per domain, source/target response KS,
    and the binned significance. Target labels feed only the target AUC and
    the alternative background shape, never anything used for selection."""
    scores_src = model.signal_scores(test_source.features)
    scores_tgt = model.signal_scores(test_target.features)
    out = {
        "auc_source": roc_auc(scores_src, test_source.labels,
                              test_source.weights),
        "auc_target": roc_auc(scores_tgt, test_target.labels,
                              test_target.weights),
        "ks": domain_balanced_ks(scores_src, test_source.labels,
                                 test_source.weights, scores_tgt,
                                 test_target.weights,
                                 settings.target_signal_fraction),
    }
    hist = response_histogram(
        np.concatenate([scores_src, scores_tgt]),
        np.concatenate([test_source.labels, test_target.labels]),
        np.concatenate([test_source.domains, test_target.domains]),
        np.concatenate([test_source.weights, test_target.weights]),
        n_bins=settings.n_bins,
    )
    try:
        out["ams"] = ams_from_histogram(hist, settings.ams_events,
                                        settings.target_signal_fraction,
                                        settings.flat_unc)
    except ConfigError:
        # a response bin holding signal but no background leaves the
        # significance undefined for this run; aggregate as missing
        out["ams"] = float("nan")
    return out


def _finite(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values[np.isfinite(values)]


def _aggregates(metrics: dict[str, list[float]]) -> dict[str, dict[str, float]]:
    """Median/band/mean per metric; undefined (NaN) repeats are dropped and
    reflected in the per-metric n."""
    out = {}
    for name, values in metrics.items():
        finite = _finite(values)
        if finite.size == 0:
            continue
        out[name] = {
            "median": aggregate_percentile(finite, 50.0),
            "lo": aggregate_percentile(finite, PCTL_LO),
            "hi": aggregate_percentile(finite, PCTL_HI),
            "mean": float(finite.mean()),
            "n": int(finite.size),
        }
    return out


@dataclass
class ScanPoint:
    grl_lambda: float
    metrics: dict[str, list[float]] = field(default_factory=dict)
    n_repeats: int = 0
    n_diverged: int = 0

    def median(self, name: str) -> float:
        return aggregate_percentile(_finite(self.metrics[name]), 50.0)

    def aggregates(self) -> dict:
        return _aggregates(self.metrics)

    def to_dict(self) -> dict:
        return {"lambda": self.grl_lambda, "n_repeats": self.n_repeats,
                "n_diverged": self.n_diverged, "metrics": self.metrics,
                "aggregates": self.aggregates()}


@dataclass
class ScanResult:
    points: list[ScanPoint]
    selected_lambda: float
    ks_tolerance: float
    provenance: dict = field(default_factory=dict)

    def point(self, grl_lambda: float) -> ScanPoint:
        for p in self.points:
            if p.grl_lambda == grl_lambda:
                return p
        raise KeyError(grl_lambda)

    def to_dict(self) -> dict:
        return {
            "points": [p.to_dict() for p in self.points],
            "selected_lambda": self.selected_lambda,
            "ks_tolerance": self.ks_tolerance,
            "provenance": self.provenance,
        }

    def to_csv(self, path) -> None:
        """Flat plot-ready table: lambda,metric,median,lo,hi,n."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("lambda,metric,median,lo,hi,n\n")
            for p in self.points:
                for name, agg in p.aggregates().items():
                    fh.write(f"{p.grl_lambda!r},{name},{agg['median']!r},"
                             f"{agg['lo']!r},{agg['hi']!r},{agg['n']}\n")


def select_lambda(scan: ScanResult | list[ScanPoint],
                  ks_tolerance: float = 0.01) -> float:
    """Pick the grid value with the best median source AUC among those whose
    median KS is within `ks_tolerance` of the lowest. Uses no target labels:
    only the ks and auc_source fields are consulted."""
    points = scan.points if isinstance(scan, ScanResult) else list(scan)
    points = [p for p in points if p.metrics.get("ks")]
    if not points:
        raise ConfigError("select_lambda needs at least one scan point with runs")
    if len(points) == 1:
        warnings.warn("lambda grid is degenerate (single point)", stacklevel=2)
    ks_best = min(p.median("ks") for p in points)
    candidates = [p for p in points if p.median("ks") <= ks_best + ks_tolerance]
    chosen = max(candidates, key=lambda p: p.median("auc_source"))
    return chosen.grl_lambda


@dataclass(frozen=True)
class _RunPayload:
    train_source: Dataset
    train_target: Dataset
    test_source: Dataset
    test_target: Dataset
    dann_config: DannConfig
    train_config: TrainConfig
    settings: EvalSettings


_PAYLOAD: _RunPayload | None = None


def _init_worker(payload: _RunPayload) -> None:
    global _PAYLOAD
    _PAYLOAD = payload


def _run_one(task, payload: _RunPayload | None = None) -> tuple:
    key, grl_lambda, seed = task
    p = payload if payload is not None else _PAYLOAD
    dann_cfg = p.dann_config.with_lambda(grl_lambda)
    train_cfg = replace(p.train_config, seed=seed)
    try:
        model, record = train(p.train_source, p.train_target, dann_cfg, train_cfg)
    except TrainingDiverged:
        return key, None
    result = evaluate_model(model, p.test_source, p.test_target, p.settings)
    result["final_label_loss"] = record.train_label[-1]
    result["best_label_loss"] = record.best_label_loss
    result["n_epochs"] = float(record.n_epochs)
    return key, result


def run_repeats(payload: _RunPayload, tasks: list[tuple], jobs: int = 1) -> dict:
    """Execute (key, lambda, seed) training tasks, inline or in a process
    pool. Results are keyed, so the outcome is independent of scheduling."""
    results = {}
    if jobs <= 1:
        for task in tasks:
            key, res = _run_one(task, payload)
            results[key] = res
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(payload,)) as pool:
            for key, res in pool.map(_run_one, tasks):
                results[key] = res
    return results


def lambda_scan(
    train_source: Dataset,
    train_target: Dataset,
    test_source: Dataset,
    test_target: Dataset,
    grid,
    n_repeats: int,
    dann_config: DannConfig,
    train_config: TrainConfig,
    master_seed: int = 0,
    jobs: int = 1,
    settings: EvalSettings | None = None,
    ks_tolerance: float = 0.01,
) -> ScanResult:
    """Repeat training across a coupling grid and aggregate test metrics.

    Run seeds derive from (master_seed, grid index, repeat index); diverged
    runs are counted per point and excluded from the aggregates.
    """
    grid = [float(v) for v in grid]
    if not grid:
        raise ConfigError("lambda grid must be non-empty")
    if any(v < 0 for v in grid):
        raise ConfigError("lambda values must be >= 0")
    if n_repeats < 1:
        raise ConfigError("n_repeats must be >= 1")
    if settings is None:
        settings = EvalSettings(
            target_signal_fraction=train_config.target_signal_fraction)
    payload = _RunPayload(train_source, train_target, test_source, test_target,
                          dann_config, train_config, settings)
    tasks = [((i, r), lam, derive_seed(master_seed, "lambda", i, r))
             for i, lam in enumerate(grid) for r in range(n_repeats)]
    results = run_repeats(payload, tasks, jobs=jobs)
    points = []
    for i, lam in enumerate(grid):
        metrics: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
        n_diverged = 0
        for r in range(n_repeats):
            res = results[(i, r)]
            if res is None:
                n_diverged += 1
                continue
            for m in METRIC_NAMES:
                metrics[m].append(res[m])
        points.append(ScanPoint(grl_lambda=lam, metrics=metrics,
                                n_repeats=n_repeats, n_diverged=n_diverged))
    selected = select_lambda(points, ks_tolerance)
    return ScanResult(
        points=points, selected_lambda=selected, ks_tolerance=ks_tolerance,
        provenance={
            "master_seed": master_seed,
            "n_repeats": n_repeats,
            "grid": grid,
            "dann_config": dann_config.to_dict(),
            "train_config": train_config.to_dict(),
        },
    )


@dataclass
class FractionPoint:
    fraction: float
    grl_lambda: float
    metrics: dict[str, list[float]] = field(default_factory=dict)
    n_repeats: int = 0
    n_diverged: int = 0

    def median(self, name: str) -> float:
        return aggregate_percentile(_finite(self.metrics[name]), 50.0)

    def aggregates(self) -> dict:
        return _aggregates(self.metrics)

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "lambda": self.grl_lambda,
                "n_repeats": self.n_repeats, "n_diverged": self.n_diverged,
                "metrics": self.metrics, "aggregates": self.aggregates()}


@dataclass
class FractionScanResult:
    mode: str
    points: list[FractionPoint]
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "points": [p.to_dict() for p in self.points],
                "provenance": self.provenance}

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("fraction,metric,median,lo,hi,n\n")
            for p in self.points:
                for name, agg in p.aggregates().items():
                    fh.write(f"{p.fraction!r},{name},{agg['median']!r},"
                             f"{agg['lo']!r},{agg['hi']!r},{agg['n']}\n")


def _with_target_fraction(base: SyntheticConfig, fraction: float,
                          seed: int) -> SyntheticConfig:
    """Recompose the target stratum counts to a true signal fraction,
    keeping the target background count fixed."""
    counts = dict(base.counts)
    n_bkg = counts["target_background"]
    counts["target_signal"] = int(round(fraction / (1.0 - fraction) * n_bkg))
    if counts["target_signal"] < 1:
        raise ConfigError(f"fraction {fraction} leaves no target signal events")
    return replace(base, counts=counts, target_signal_fraction=fraction,
                   seed=seed)


def signal_fraction_scan(
    mode: str,
    fractions,
    n_repeats: int,
    dann_config: DannConfig,
    train_config: TrainConfig,
    synthetic_base: SyntheticConfig,
    master_seed: int = 0,
    jobs: int = 1,
    test_fraction: float = 0.5,
    source_fraction: float = 0.05,
) -> FractionScanResult:
    """Sensitivity of target AUC to the signal fraction assumption.

    'matched': the true target composition and the fraction used to rescale
    the source both move together, so no mismatch exists. 'mismatched': the
    source side keeps assuming `source_fraction` while the true target
    composition varies, which is the realistic failure mode when the
    real-data composition is misestimated.
    """
    if mode not in ("matched", "mismatched"):
        raise ConfigError("mode must be 'matched' or 'mismatched'")
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0.0 < f < 1.0 for f in fractions):
        raise ConfigError("fractions must lie in (0, 1)")
    points = []
    for fi, frac in enumerate(fractions):
        try:
            synth = _with_target_fraction(
                synthetic_base, frac, seed=derive_seed(master_seed, "data", fi))
        except ConfigError as exc:
            warnings.warn(f"skipping fraction {frac}: {exc}", stacklevel=2)
            continue
        dataset = generate_synthetic(synth)
        test, train_part = split(dataset, test_fraction,
                                 seed=derive_seed(master_seed, "split", fi))
        assumed = frac if mode == "matched" else source_fraction
        tc = replace(train_config, target_signal_fraction=assumed)
        payload = _RunPayload(
            train_part.domain_subset(SOURCE), train_part.domain_subset(TARGET),
            test.domain_subset(SOURCE), test.domain_subset(TARGET),
            dann_config, tc, EvalSettings(target_signal_fraction=assumed),
        )
        tasks = [((fi, r), dann_config.grl_lambda,
                  derive_seed(master_seed, "fraction", fi, r))
                 for r in range(n_repeats)]
        results = run_repeats(payload, tasks, jobs=jobs)
        metrics: dict[str, list[float]] = {m: [] for m in METRIC_NAMES}
        n_diverged = 0
        for r in range(n_repeats):
            res = results[(fi, r)]
            if res is None:
                n_diverged += 1
                continue
            for m in METRIC_NAMES:
                metrics[m].append(res[m])
        points.append(FractionPoint(
            fraction=frac, grl_lambda=dann_config.grl_lambda, metrics=metrics,
            n_repeats=n_repeats, n_diverged=n_diverged))
    return FractionScanResult(
        mode=mode, points=points,
        provenance={
            "master_seed": master_seed,
            "n_repeats": n_repeats,
            "fractions": fractions,
            "mode": mode,
            "source_fraction": source_fraction,
            "dann_config": dann_config.to_dict(),
            "train_config": train_config.to_dict(),
            "synthetic_base": synthetic_base.to_dict(),
        },
    )
