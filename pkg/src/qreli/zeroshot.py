"""Zero-shot classification from image and class-text embeddings.

Class text embeddings act as frozen anchors: logits are the scaled cosine
similarities between unit-norm image rows and unit-norm class rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import TensorBundle, cosine_normalize
from .errors import DimensionMismatchError, MixedScaleError, NoLabeledRowsError

UNLABELED = -1


@dataclass
class EmbeddingSet:
    """Image embeddings with labels, class-text anchors, and the logit scale."""

    image: np.ndarray  # [N, D] float32, unit rows
    labels: np.ndarray  # [N] int64, -1 = unlabeled
    class_text: np.ndarray  # [C, D] float32, unit rows
    logit_scale: float = 100.0
    names: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n_classes = self.class_text.shape[0]
        if self.image.ndim != 2 or self.class_text.ndim != 2:
            raise DimensionMismatchError("image and class_text must be 2-D")
        if self.image.shape[1] != self.class_text.shape[1]:
            raise DimensionMismatchError(
                f"image dim {self.image.shape[1]} != class_text dim {self.class_text.shape[1]}"
            )
        if self.labels.shape != (self.image.shape[0],):
            raise DimensionMismatchError("labels must be one int64 per image row")
        valid = (self.labels == UNLABELED) | ((self.labels >= 0) & (self.labels < n_classes))
        if not np.all(valid):
            raise ValueError("labels must be -1 or in [0, n_classes)")
        if not np.isfinite(self.logit_scale) or self.logit_scale < 0:
            raise ValueError("logit_scale must be finite and non-negative")

    @classmethod
    def from_bundle(cls, bundle: TensorBundle) -> "EmbeddingSet":
        """Build from a bundle, normalizing rows unless meta says prenormalized."""
        image = bundle.entries["image"]
        class_text = bundle.entries["class_text"]
        labels = bundle.entries.get("labels")
        if labels is None:
            labels = np.full(image.shape[0], UNLABELED, dtype=np.int64)
        prenorm = str(bundle.meta.get("prenormalized", "false")).lower() == "true"
        if not prenorm:
            image = cosine_normalize(image)
            class_text = cosine_normalize(class_text)
        scale = float(bundle.meta.get("logit_scale", 100.0))
        return cls(
            image=image,
            labels=labels,
            class_text=class_text,
            logit_scale=scale,
            meta=dict(bundle.meta),
        )

    def to_bundle(self) -> TensorBundle:
        meta = dict(self.meta)
        meta["logit_scale"] = float(self.logit_scale)
        meta["prenormalized"] = "true"
        return TensorBundle(
            entries={
                "image": np.asarray(self.image, dtype=np.float32),
                "labels": np.asarray(self.labels, dtype=np.int64),
                "class_text": np.asarray(self.class_text, dtype=np.float32),
            },
            meta=meta,
        )


@dataclass
class LogitSet:
    """Per-sample class logits plus the matching labels."""

    logits: np.ndarray  # [N, C]
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.logits.ndim != 2:
            raise DimensionMismatchError("logits must be [N, C]")
        if self.labels.shape != (self.logits.shape[0],):
            raise DimensionMismatchError("labels must be one int64 per logit row")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.labels >= 0


def zero_shot_logits(e: EmbeddingSet) -> LogitSet:
    """logits[i, c] = logit_scale * <image_i, text_c>."""
    logits = e.logit_scale * (
        np.asarray(e.image, dtype=np.float64) @ np.asarray(e.class_text, dtype=np.float64).T
    )
    return LogitSet(logits=logits.astype(np.float32), labels=e.labels)


def accuracy(l: LogitSet) -> float:
    """Top-1 accuracy over labeled rows; argmax ties go to the lowest class index."""
    mask = l.labeled_mask
    if not np.any(mask):
        raise NoLabeledRowsError("accuracy needs at least one labeled row")
    preds = np.argmax(l.logits[mask], axis=1)
    return float(np.mean(preds == l.labels[mask]))


def vulnerability(acc_normal: float, acc_counter: float) -> float:
    """Accuracy drop in percentage points; accepts fractions or percents.

    Both inputs must use the same convention: values <= 1 are read as fractions
    and scaled by 100, values > 1 as percentages. The result is rounded at 1e-6
    so decimal table values subtract cleanly.
    """
    a, b = float(acc_normal), float(acc_counter)
    frac_a, frac_b = a <= 1.0, b <= 1.0
    if frac_a != frac_b:
        raise MixedScaleError(f"mixed conventions: {a} vs {b}")
    diff = (a - b) * 100.0 if frac_a else a - b
    return round(diff, 6)
