"""Deterministic synthetic fixtures: embedding tasks and token feature maps.

The classification task mimics exported VLM embeddings: class anchors are
random unit directions, samples scatter around them, and a few nuisance
dimensions carry rare high-magnitude spikes. Those spikes blow up naive
min-max activation ranges at low bit-widths while leaving mean-based range
statistics (and full-precision cosine accuracy) intact, which is exactly the
failure mode range-learning QAT is meant to fix.
"""

from __future__ import annotations

import numpy as np

from .core import make_rng
from .spectral import FeatureMapSet
from .zeroshot import EmbeddingSet


def make_classification_task(
    n_classes: int = 10,
    dim: int = 64,
    n_train: int = 1000,
    n_eval: int = 1000,
    noise: float = 0.12,
    center_spread: float = 0.0,
    n_outlier_dims: int = 6,
    outlier_amp: float = 2.0,
    outlier_rate: float = 0.1,
    logit_scale: float = 100.0,
    seed: int = 7,
):
    """Build (train, eval) embedding sets for a Gaussian zero-shot task.

    ``center_spread`` > 0 correlates the class anchors (one shared direction
    plus per-class offsets of that relative size), tightening cosine margins
    the way fine-grained class sets do; 0 keeps the anchors independent.
    """
    if n_outlier_dims >= dim:
        raise ValueError("n_outlier_dims must leave room for informative dimensions")
    rng = make_rng(seed)
    d_info = dim - n_outlier_dims
    if center_spread > 0:
        base = rng.normal(size=d_info)
        base /= np.linalg.norm(base)
        offsets = rng.normal(size=(n_classes, d_info))
        offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
        centers = base + center_spread * offsets
    else:
        centers = rng.normal(size=(n_classes, d_info))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(n: int) -> EmbeddingSet:
        labels = rng.permutation(np.arange(n) % n_classes).astype(np.int64)
        info = centers[labels] + noise * rng.normal(size=(n, d_info))
        spikes = rng.random(size=(n, n_outlier_dims)) < outlier_rate
        nuisance = np.where(
            spikes,
            outlier_amp * rng.choice([-1.0, 1.0], size=(n, n_outlier_dims)),
            0.02 * rng.normal(size=(n, n_outlier_dims)),
        )
        emb = np.concatenate([info, nuisance], axis=1)
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        text = np.concatenate([centers, np.zeros((n_classes, n_outlier_dims))], axis=1)
        text /= np.linalg.norm(text, axis=1, keepdims=True)
        return EmbeddingSet(
            image=emb.astype(np.float32),
            labels=labels,
            class_text=text.astype(np.float32),
            logit_scale=logit_scale,
            meta={"dataset": "synthetic-gauss", "model_tag": "synthetic"},
        )

    return draw(n_train), draw(n_eval)


def make_feature_maps(
    n_samples: int = 8,
    grid: tuple = (7, 7),
    channels: int = 16,
    smoothness: float = 2.0,
    seed: int = 7,
) -> FeatureMapSet:
    """Random token maps with a tunable low-frequency bias (larger = smoother)."""
    rng = make_rng(seed)
    g_h, g_w = grid
    fy = np.minimum(np.arange(g_h), g_h - np.arange(g_h))[:, None]
    fx = np.minimum(np.arange(g_w), g_w - np.arange(g_w))[None, :]
    radius = np.hypot(fy, fx)
    weight = 1.0 / (1.0 + radius) ** smoothness
    spec = (
        rng.normal(size=(n_samples, channels, g_h, g_w))
        + 1j * rng.normal(size=(n_samples, channels, g_h, g_w))
    ) * weight
    maps = np.fft.ifft2(spec, axes=(-2, -1)).real
    tokens = maps.reshape(n_samples, channels, g_h * g_w).transpose(0, 2, 1)
    return FeatureMapSet(tokens=tokens.astype(np.float32), grid=(g_h, g_w))
