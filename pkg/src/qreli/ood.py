"""Zero-shot OOD scoring and detection metrics.

Every scorer follows the higher-score-means-ID convention (the energy score is
reported negated), so AUROC orientation is uniform across methods. AUROC is
the exact Mann-Whitney statistic with midrank tie handling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DimensionMismatchError, EmptySideError, MissingNegativesError
from .metrics import softmax_confidences
from .zeroshot import EmbeddingSet, LogitSet

SCORER_KINDS = ("msp", "energy", "mcm", "generic_negative", "neglabel")
LOGIT_SCORERS = ("msp", "energy")


@dataclass(frozen=True)
class ScorerConfig:
    """Which OOD score to compute and its temperature(s)."""

    kind: str
    temperature: float = 1.0  # T for the energy score
    tau: float = 0.01  # similarity softmax temperature for VLM scorers
    negative_text: Optional[np.ndarray] = None  # [M, D] unit rows

    def __post_init__(self):
        if self.kind not in SCORER_KINDS:
            raise ValueError(f"unknown scorer {self.kind!r}; expected one of {SCORER_KINDS}")
        if self.temperature <= 0 or self.tau <= 0:
            raise ValueError("temperatures must be positive")


@dataclass(frozen=True)
class OodReport:
    auroc: float
    fpr_at_95tpr: float
    n_id: int
    n_ood: int


def _logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def score(cfg: ScorerConfig, data: Union[LogitSet, EmbeddingSet]) -> np.ndarray:
    """Per-sample ID-ness scores.

    msp and energy consume a LogitSet; mcm, generic_negative and neglabel
    consume an EmbeddingSet (cosine similarities against the class anchors,
    and for the negative-based scorers also against the negative corpus).
    """
    if cfg.kind in LOGIT_SCORERS:
        if not isinstance(data, LogitSet):
            raise TypeError(f"{cfg.kind} scores logits; got {type(data).__name__}")
        logits = np.asarray(data.logits, dtype=np.float64)
        if cfg.kind == "msp":
            return softmax_confidences(data).conf
        t = cfg.temperature
        return t * _logsumexp(logits / t, axis=1)

    if not isinstance(data, EmbeddingSet):
        raise TypeError(f"{cfg.kind} scores embeddings; got {type(data).__name__}")
    image = np.asarray(data.image, dtype=np.float64)
    sims_id = image @ np.asarray(data.class_text, dtype=np.float64).T
    if cfg.kind == "mcm":
        z = sims_id / cfg.tau
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=1, keepdims=True)).max(axis=1)

    if cfg.negative_text is None or cfg.negative_text.size == 0:
        raise MissingNegativesError(f"{cfg.kind} requires negative_text embeddings")
    neg = np.asarray(cfg.negative_text, dtype=np.float64)
    if neg.ndim != 2 or neg.shape[1] != image.shape[1]:
        raise DimensionMismatchError("negative_text must be [M, D] with matching D")
    sims_neg = image @ neg.T
    # softmax mass on ID concepts vs the negative set
    lse_id = _logsumexp(sims_id / cfg.tau, axis=1)
    lse_all = _logsumexp(np.concatenate([sims_id, sims_neg], axis=1) / cfg.tau, axis=1)
    return np.exp(lse_id - lse_all)


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Exact Mann-Whitney AUROC via sorting with midranks for ties."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    n, m = id_scores.size, ood_scores.size
    if n == 0 or m == 0:
        raise EmptySideError("both score arrays must be non-empty")
    combined = np.concatenate([id_scores, ood_scores])
    _, inverse, counts = np.unique(combined, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    midranks = starts + (counts + 1) / 2.0  # 1-based average rank per tie group
    rank_sum_id = midranks[inverse[:n]].sum()
    return float((rank_sum_id - n * (n + 1) / 2.0) / (n * m))


def fpr_at_tpr(id_scores: np.ndarray, ood_scores: np.ndarray, tpr: float = 0.95) -> float:
    """FPR at the threshold keeping ceil(tpr * N) ID samples (inclusive >=)."""
    id_scores = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_scores = np.asarray(ood_scores, dtype=np.float64).ravel()
    n = id_scores.size
    if n == 0 or ood_scores.size == 0:
        raise EmptySideError("both score arrays must be non-empty")
    if not 0.0 < tpr <= 1.0:
        raise ValueError(f"tpr must be in (0, 1], got {tpr}")
    k = max(1, math.ceil(tpr * n - 1e-12))  # epsilon guards float products like 0.95*200
    threshold = np.sort(id_scores)[n - k]
    return float(np.mean(ood_scores >= threshold))


def evaluate(id_scores: np.ndarray, ood_scores: np.ndarray, tpr: float = 0.95) -> OodReport:
    return OodReport(
        auroc=auroc(id_scores, ood_scores),
        fpr_at_95tpr=fpr_at_tpr(id_scores, ood_scores, tpr),
        n_id=int(np.asarray(id_scores).size),
        n_ood=int(np.asarray(ood_scores).size),
    )
