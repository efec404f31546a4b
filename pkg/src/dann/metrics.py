"""Figures of merit: weighted AUC, two-sample KS, binned significance, purity.

All functions are pure and operate on plain arrays. Scores fed to the
histogram and purity routines are label-predictor probabilities in [0, 1];
the unbounded domain score of the linear setup is never histogrammed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def _check_scores_labels_weights(scores, labels, weights):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if weights is None:
        weights = np.ones(len(scores))
    weights = np.asarray(weights, dtype=np.float64)
    if not (len(scores) == len(labels) == len(weights)):
        raise ConfigError("scores, labels and weights must have equal length")
    if (weights < 0).any():
        raise ConfigError("weights must be non-negative")
    return scores, labels, weights


def roc_auc(scores, labels, weights=None) -> float:
    """Weighted probability that a random signal event outranks a random
    background event, counting ties at half credit.

    Equals the trapezoidal area under the weighted ROC curve.
    """
    scores, labels, weights = _check_scores_labels_weights(scores, labels, weights)
    pos = labels == 1
    w_pos = weights[pos].sum()
    w_neg = weights[~pos].sum()
    if w_pos <= 0.0 or w_neg <= 0.0:
        raise ConfigError("roc_auc needs both classes with positive weight")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    w_sig = np.where(pos[order], weights[order], 0.0)
    w_bkg = np.where(pos[order], 0.0, weights[order])
    # group tied scores so equal values get half credit against each other
    boundary = np.empty(len(s), dtype=bool)
    boundary[0] = True
    boundary[1:] = s[1:] != s[:-1]
    group = np.cumsum(boundary) - 1
    n_groups = group[-1] + 1
    sig_g = np.zeros(n_groups)
    bkg_g = np.zeros(n_groups)
    np.add.at(sig_g, group, w_sig)
    np.add.at(bkg_g, group, w_bkg)
    bkg_below = np.concatenate([[0.0], np.cumsum(bkg_g)[:-1]])
    num = (sig_g * bkg_below).sum() + 0.5 * (sig_g * bkg_g).sum()
    return float(num / (w_pos * w_neg))


def ks_distance(scores_a, weights_a, scores_b, weights_b) -> float:
    """Largest absolute gap between the two weighted score CDFs,
    evaluated at every distinct score in either sample."""
    scores_a = np.asarray(scores_a, dtype=np.float64)
    scores_b = np.asarray(scores_b, dtype=np.float64)
    if len(scores_a) == 0 or len(scores_b) == 0:
        raise ConfigError("ks_distance needs two non-empty samples")
    weights_a = (np.ones(len(scores_a)) if weights_a is None
                 else np.asarray(weights_a, dtype=np.float64))
    weights_b = (np.ones(len(scores_b)) if weights_b is None
                 else np.asarray(weights_b, dtype=np.float64))
    total_a = weights_a.sum()
    total_b = weights_b.sum()
    if total_a <= 0.0 or total_b <= 0.0:
        raise ConfigError("ks_distance needs positive total weight per sample")
    pooled = np.concatenate([scores_a, scores_b])
    w_a = np.concatenate([weights_a, np.zeros(len(scores_b))])
    w_b = np.concatenate([np.zeros(len(scores_a)), weights_b])
    order = np.argsort(pooled, kind="stable")
    s = pooled[order]
    cum_a = np.cumsum(w_a[order])
    cum_b = np.cumsum(w_b[order])
    # CDFs are compared at each distinct value, inclusive of its ties
    last_of_value = np.empty(len(s), dtype=bool)
    last_of_value[-1] = True
    last_of_value[:-1] = s[1:] != s[:-1]
    gaps = np.abs(cum_a[last_of_value] / total_a - cum_b[last_of_value] / total_b)
    return float(gaps.max())


@dataclass
class ResponseHistogram:
    """Weighted response counts per (class, domain) stratum on shared bins."""

    bin_edges: np.ndarray
    counts: dict[str, np.ndarray]    # keys like "source_signal"

    def normalized(self) -> "ResponseHistogram":
        out = {}
        for key, c in self.counts.items():
            total = c.sum()
            out[key] = c / total if total > 0 else c.copy()
        return ResponseHistogram(self.bin_edges.copy(), out)

    def total(self, key: str) -> float:
        return float(self.counts[key].sum())


def response_histogram(scores, labels, domains, weights=None,
                       n_bins: int = 20) -> ResponseHistogram:
    """Uniform half-open bins on [0, 1] (last bin closed), filled per stratum."""
    from .data import DOMAIN_CODES, LABEL_CODES, STRATA  # avoid cycle at import

    scores, labels, weights = _check_scores_labels_weights(scores, labels, weights)
    domains = np.asarray(domains)
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    bad = np.flatnonzero((scores < 0.0) | (scores > 1.0))
    if len(bad):
        raise ConfigError(
            f"score outside [0, 1] at event index {bad[0]}: {scores[bad[0]]}")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.minimum((scores * n_bins).astype(np.int64), n_bins - 1)
    counts = {}
    for dom, lab in STRATA:
        m = (domains == DOMAIN_CODES[dom]) & (labels == LABEL_CODES[lab])
        c = np.zeros(n_bins)
        np.add.at(c, idx[m], weights[m])
        counts[f"{dom}_{lab}"] = c
    return ResponseHistogram(edges, counts)


def ams(s, b, b_alt, flat_unc: float = 0.10) -> float:
    """Approximate median discovery significance over response bins.

    Per-bin background variance combines half the squared disagreement
    between the two background estimates with a flat relative uncertainty:
    sigma_b^2 = (b - b_alt)^2 / 2 + (flat_unc * b)^2. Bins with no signal
    contribute exactly zero; a bin with signal but no background is an error.
    """
    s = np.asarray(s, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    b_alt = np.asarray(b_alt, dtype=np.float64)
    if not (s.shape == b.shape == b_alt.shape):
        raise ConfigError("s, b, b_alt must have matching shapes")
    if (s < 0).any() or (b < 0).any() or (b_alt < 0).any():
        raise ConfigError("histogram counts must be non-negative")
    bad = np.flatnonzero((b == 0.0) & (s > 0.0))
    if len(bad):
        raise ConfigError(f"empty-background bin at index {bad[0]} with "
                          f"signal {s[bad[0]]}")
    active = s > 0.0       # s == 0 makes b_0 == b and the whole term vanish
    if not active.any():
        return 0.0
    si, bi, ai = s[active], b[active], b_alt[active]
    var = 0.5 * (bi - ai) ** 2 + (flat_unc * bi) ** 2
    if (var == 0.0).any():
        raise ConfigError("zero background variance in a bin with signal; "
                          "set flat_unc > 0 or provide b > 0")
    b0 = 0.5 * (bi - var + np.sqrt((bi - var) ** 2 + 4.0 * (si + bi) * var))
    terms = (2.0 * ((si + bi) * np.log((si + bi) / b0) - si - bi + b0)
             + (bi - b0) ** 2 / var)
    return float(np.sqrt(np.maximum(terms, 0.0).sum()))


def ams_from_histogram(hist: ResponseHistogram, n_events: float = 50_000.0,
                       signal_fraction: float = 0.05,
                       flat_unc: float = 0.10) -> float:
    """Scale the source strata to an expected composition and score them
    against the target background shape.

    Source signal is normalized to ``n_events * signal_fraction`` and both
    the source and target backgrounds to ``n_events * (1 - signal_fraction)``,
    so the result reflects the stated event yield rather than sample sizes.
    """
    s_raw = hist.counts["source_signal"]
    b_raw = hist.counts["source_background"]
    alt_raw = hist.counts["target_background"]
    for name, arr in (("source_signal", s_raw), ("source_background", b_raw),
                      ("target_background", alt_raw)):
        if arr.sum() <= 0:
            raise ConfigError(f"stratum {name} has zero total weight")
    s = s_raw * (n_events * signal_fraction / s_raw.sum())
    b = b_raw * (n_events * (1.0 - signal_fraction) / b_raw.sum())
    b_alt = alt_raw * (n_events * (1.0 - signal_fraction) / alt_raw.sum())
    return ams(s, b, b_alt, flat_unc=flat_unc)


@dataclass
class PurityCurve:
    cuts: np.ndarray
    efficiency: np.ndarray
    purity: np.ndarray

    def at_efficiency(self, eff: float) -> float:
        """Purity at the loosest cut whose efficiency is still >= eff."""
        ok = np.flatnonzero(self.efficiency >= eff)
        if len(ok) == 0:
            raise ConfigError(f"no cut reaches efficiency {eff}")
        return float(self.purity[ok[-1]])


def purity_efficiency_curve(scores, labels, weights=None,
                            signal_fraction: float = 0.05) -> PurityCurve:
    """Signal purity s/(s+b) versus efficiency for every cut on the score.

    Class weights are first rescaled so the total signal:background weight
    is ``signal_fraction : 1 - signal_fraction``; events at or above each
    cut are selected. Cuts run over the distinct scores plus 0.0, so the
    first point is full acceptance where purity equals the signal fraction.
    """
    scores, labels, weights = _check_scores_labels_weights(scores, labels, weights)
    if not 0.0 < signal_fraction < 1.0:
        raise ConfigError("signal_fraction must be in (0, 1)")
    pos = labels == 1
    w_pos = weights[pos].sum()
    w_neg = weights[~pos].sum()
    if w_pos <= 0.0 or w_neg <= 0.0:
        raise ConfigError("purity curve needs both classes with positive weight")
    w = weights.copy()
    w[pos] *= signal_fraction / w_pos
    w[~pos] *= (1.0 - signal_fraction) / w_neg
    order = np.argsort(scores, kind="stable")[::-1]
    s_sorted = scores[order]
    sig_cum = np.cumsum(np.where(pos[order], w[order], 0.0))
    all_cum = np.cumsum(w[order])
    # one point per distinct score: totals for "score >= cut"
    last = np.empty(len(s_sorted), dtype=bool)
    last[-1] = True
    last[:-1] = s_sorted[1:] != s_sorted[:-1]
    cuts = s_sorted[last]
    sig_sel = sig_cum[last]
    all_sel = all_cum[last]
    if cuts[-1] > 0.0:
        cuts = np.append(cuts, 0.0)
        sig_sel = np.append(sig_sel, sig_cum[-1])
        all_sel = np.append(all_sel, all_cum[-1])
    # ascending in cut, so efficiency decreases along the curve
    cuts = cuts[::-1]
    sig_sel = sig_sel[::-1]
    all_sel = all_sel[::-1]
    efficiency = sig_sel / signal_fraction
    purity = np.divide(sig_sel, all_sel, out=np.zeros_like(sig_sel),
                       where=all_sel > 0)
    return PurityCurve(cuts=cuts, efficiency=efficiency, purity=purity)
