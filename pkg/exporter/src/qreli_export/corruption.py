"""Resize-then-corrupt evaluation pipeline.

Corruptions apply after the standard resize and center crop but before tensor
conversion and normalization, so corruption artifacts reach the model exactly
as produced instead of being resampled away.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageEnhance, ImageFilter

from .config import CORRUPTIONS


def resize_and_crop(img: Image.Image, size: int = 224, resize_to: int = 256) -> Image.Image:
    w, h = img.size
    short = min(w, h)
    img = img.resize(
        (round(w * resize_to / short), round(h * resize_to / short)), Image.BICUBIC
    )
    w, h = img.size
    left, top = (w - size) // 2, (h - size) // 2
    return img.crop((left, top, left + size, top + size))


def apply_corruption(img: Image.Image, name: str, severity: int, seed: int = 0) -> Image.Image:
    """Severity 0 is a no-op; 1..5 increase distortion monotonically."""
    if severity == 0 or name is None:
        return img
    if name not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {name!r}")
    if name == "gaussian_blur":
        return img.filter(ImageFilter.GaussianBlur(radius=0.6 * severity))
    if name == "gaussian_noise":
        rng = np.random.Generator(np.random.Philox(seed))
        arr = np.asarray(img, dtype=np.float64)
        arr = arr + rng.normal(0.0, 5.0 * severity, size=arr.shape)
        return Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))
    if name == "brightness":
        return ImageEnhance.Brightness(img).enhance(1.0 + 0.15 * severity)
    if name == "contrast":
        return ImageEnhance.Contrast(img).enhance(max(0.05, 1.0 - 0.15 * severity))
    # pixelate: downsample and blow back up
    factor = 1 + severity
    w, h = img.size
    small = img.resize((max(1, w // factor), max(1, h // factor)), Image.BOX)
    return small.resize((w, h), Image.NEAREST)


def to_model_tensor(img: Image.Image, mean, std) -> np.ndarray:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return arr.transpose(2, 0, 1)  # HWC -> CHW


class ResizeThenCorrupt:
    """Iterator adapter: resize/crop -> corruption -> tensor -> normalize."""

    def __init__(self, images, name=None, severity=0, size=224, mean=None, std=None, seed=0):
        self.images = images
        self.name = name
        self.severity = severity
        self.size = size
        self.mean = mean if mean is not None else (0.48145466, 0.4578275, 0.40821073)
        self.std = std if std is not None else (0.26862954, 0.26130258, 0.27577711)
        self.seed = seed

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx: int) -> np.ndarray:
        img = self.images[idx]
        img = resize_and_crop(img, size=self.size)
        img = apply_corruption(img, self.name, self.severity, seed=self.seed + idx)
        return to_model_tensor(img, self.mean, self.std)
