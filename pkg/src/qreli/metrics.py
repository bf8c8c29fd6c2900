"""Calibration metrics: ECE, NLL, temperature fitting, bin-wise confidence shift.

Confidence bins are equal-width and right-closed, so a confidence of exactly
k/n falls in bin k-1 and 1.0 lands in the last bin. NLL clamps probabilities
at 1e-12 to avoid -log 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import LengthMismatchError, NoLabeledRowsError
from .zeroshot import LogitSet

DEFAULT_BINS = 15
PROB_FLOOR = 1e-12


class SoftmaxOutput(NamedTuple):
    probs: np.ndarray  # [N, C] float64
    conf: np.ndarray  # [N] max probability
    pred: np.ndarray  # [N] argmax class


@dataclass(frozen=True)
class BinStat:
    lo: float
    hi: float
    count: int
    mean_confidence: float
    empirical_accuracy: float


@dataclass(frozen=True)
class ReliabilityReport:
    bins: list
    ece: float
    nll: float
    n_bins: int


@dataclass(frozen=True)
class BinShiftGroup:
    source_bin: int
    lo: float
    hi: float
    count: int
    mean_conf_before: float
    mean_conf_after: float
    mean_acc_before: Optional[float]
    mean_acc_after: Optional[float]


@dataclass(frozen=True)
class BinShiftReport:
    groups: list
    n_bins: int


@dataclass(frozen=True)
class TemperatureFit:
    t_star: float
    nll_before: float
    nll_after: float


def softmax_confidences(l: LogitSet) -> SoftmaxOutput:
    """Numerically stable softmax; confidence is the max probability."""
    z = np.asarray(l.logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    return SoftmaxOutput(probs=probs, conf=probs.max(axis=1), pred=probs.argmax(axis=1))


def _bin_index(conf: np.ndarray, n_bins: int) -> np.ndarray:
    """Right-closed equal-width bins: (0, 1/n], (1/n, 2/n], ..., (1-1/n, 1]."""
    idx = np.ceil(conf * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def nll_of_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true class over labeled rows."""
    mask = labels >= 0
    if not np.any(mask):
        raise NoLabeledRowsError("NLL needs at least one labeled row")
    out = softmax_confidences(LogitSet(logits=np.asarray(logits)[mask], labels=labels[mask]))
    p_true = out.probs[np.arange(out.probs.shape[0]), labels[mask]]
    return float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))


def ece(l: LogitSet, n_bins: int = DEFAULT_BINS) -> ReliabilityReport:
    """Expected calibration error with per-bin reliability statistics."""
    mask = l.labeled_mask
    if not np.any(mask):
        raise NoLabeledRowsError("ECE needs at least one labeled row")
    sub = LogitSet(logits=l.logits[mask], labels=l.labels[mask])
    out = softmax_confidences(sub)
    correct = out.pred == sub.labels
    idx = _bin_index(out.conf, n_bins)
    n = out.conf.size
    bins = []
    total = 0.0
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        if count:
            mean_conf = float(out.conf[sel].mean())
            acc = float(correct[sel].mean())
            total += (count / n) * abs(acc - mean_conf)
        else:
            mean_conf = 0.0
            acc = 0.0
        bins.append(
            BinStat(
                lo=b / n_bins,
                hi=(b + 1) / n_bins,
                count=count,
                mean_confidence=mean_conf,
                empirical_accuracy=acc,
            )
        )
    p_true = out.probs[np.arange(n), sub.labels]
    nll = float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))
    return ReliabilityReport(bins=bins, ece=float(total), nll=nll, n_bins=n_bins)


def fit_temperature(l: LogitSet, t_lo: float = 0.01, t_hi: float = 100.0) -> TemperatureFit:
    """Single-temperature recalibration via golden-section search on NLL.

    The search brackets the NLL minimum over [t_lo, t_hi] down to 1e-4 relative
    width; the raw t=1 point competes as a candidate so the fit never increases
    NLL, and exact ties resolve to the smaller temperature.
    """
    mask = l.labeled_mask
    if not np.any(mask):
        raise NoLabeledRowsError("temperature fitting needs labeled rows")
    logits = np.asarray(l.logits, dtype=np.float64)[mask]
    labels = l.labels[mask]

    def nll_at(t: float) -> float:
        return nll_of_logits(logits / t, labels)

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = float(t_lo), float(t_hi)
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = nll_at(x1), nll_at(x2)
    while hi - lo > 1e-4 * lo:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = nll_at(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = nll_at(x2)
    t_found = (lo + hi) / 2.0
    nll_before = nll_at(1.0)
    candidates = [(nll_at(t_found), t_found)]
    if t_lo <= 1.0 <= t_hi:
        candidates.append((nll_before, 1.0))
    nll_after, t_star = min(candidates, key=lambda c: (c[0], c[1]))
    return TemperatureFit(t_star=float(t_star), nll_before=nll_before, nll_after=float(nll_after))


def bin_shift(before: LogitSet, after: LogitSet, n_bins: int = DEFAULT_BINS) -> BinShiftReport:
    """Track the same sample groups under two models.

    Groups are fixed by the *before* confidences; the report gives mean
    confidence and accuracy of each identical index set under both models.
    Accuracy means are over labeled rows only (None when a group has none);
    counts cover every sample, so they always sum to N.
    """
    if before.logits.shape[0] != after.logits.shape[0]:
        raise LengthMismatchError(
            f"{before.logits.shape[0]} samples before vs {after.logits.shape[0]} after"
        )
    if not np.array_equal(before.labels, after.labels):
        raise LengthMismatchError("label arrays differ between the two logit sets")
    out_b = softmax_confidences(before)
    out_a = softmax_confidences(after)
    labels = before.labels
    labeled = labels >= 0
    correct_b = out_b.pred == labels
    correct_a = out_a.pred == labels
    idx = _bin_index(out_b.conf, n_bins)
    groups = []
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        if not count:
            continue
        sel_lab = sel & labeled
        has_labels = bool(sel_lab.any())
        groups.append(
            BinShiftGroup(
                source_bin=b,
                lo=b / n_bins,
                hi=(b + 1) / n_bins,
                count=count,
                mean_conf_before=float(out_b.conf[sel].mean()),
                mean_conf_after=float(out_a.conf[sel].mean()),
                mean_acc_before=float(correct_b[sel_lab].mean()) if has_labels else None,
                mean_acc_after=float(correct_a[sel_lab].mean()) if has_labels else None,
            )
        )
    return BinShiftReport(groups=groups, n_bins=n_bins)
