"""2D Fourier analysis of token feature maps.

Tokens are reshaped to their spatial grid per sample and channel, transformed
with the plain unnormalized 2D DFT, and reduced to a single magnitude spectrum
by averaging magnitudes over channels and then samples (averaging complex
spectra would cancel phases). DC is shifted to the grid center.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import GridMismatchError

DEFAULT_EPSILON = 1e-9


@dataclass
class FeatureMapSet:
    """[N, T, D] token stacks with a (g_h, g_w) spatial grid, class token removed."""

    tokens: np.ndarray
    grid: tuple

    def __post_init__(self):
        g_h, g_w = self.grid
        if self.tokens.ndim != 3:
            raise GridMismatchError("tokens must be [N, T, D]")
        if self.tokens.shape[1] != g_h * g_w:
            raise GridMismatchError(
                f"token count {self.tokens.shape[1]} != grid product {g_h * g_w}"
            )


@dataclass
class SpectrumMap:
    """DC-centered mean magnitude spectrum over samples and channels."""

    mag: np.ndarray  # [g_h, g_w] >= 0


@dataclass
class RseMap:
    """Relative spectral error map: |quant - base| / (base + epsilon)."""

    rse: np.ndarray
    epsilon: float = DEFAULT_EPSILON


@dataclass(frozen=True)
class BandSummary:
    low: float
    mid: float
    high: float


def spectrum(f: FeatureMapSet) -> SpectrumMap:
    """Mean 2D DFT magnitude over all samples and channels, DC centered."""
    g_h, g_w = f.grid
    n, t, d = f.tokens.shape
    maps = np.asarray(f.tokens, dtype=np.float64).transpose(0, 2, 1).reshape(n, d, g_h, g_w)
    mag = np.abs(np.fft.fft2(maps, axes=(-2, -1)))
    mean = mag.mean(axis=1).mean(axis=0)
    return SpectrumMap(mag=np.fft.fftshift(mean))


def rse(base: SpectrumMap, quant: SpectrumMap, epsilon: float = DEFAULT_EPSILON) -> RseMap:
    """Elementwise relative spectral error of quant against the baseline."""
    if base.mag.shape != quant.mag.shape:
        raise GridMismatchError(f"spectrum shapes differ: {base.mag.shape} vs {quant.mag.shape}")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    err = np.abs(quant.mag - base.mag) / (base.mag + epsilon)
    return RseMap(rse=err, epsilon=epsilon)


def band_energy(m: Union[SpectrumMap, RseMap, np.ndarray]) -> BandSummary:
    """Mean value in the low/mid/high radial thirds around DC.

    Bins are assigned by radius from the DC bin normalized by the largest
    radius in the grid: [0, 1/3) low, [1/3, 2/3) mid, [2/3, 1] high. Empty
    bands report 0.0.
    """
    if isinstance(m, SpectrumMap):
        arr = m.mag
    elif isinstance(m, RseMap):
        arr = m.rse
    else:
        arr = np.asarray(m)
    if arr.ndim != 2:
        raise GridMismatchError("band_energy expects a 2-D map")
    g_h, g_w = arr.shape
    c_h, c_w = g_h // 2, g_w // 2
    yy, xx = np.indices((g_h, g_w))
    r = np.hypot(yy - c_h, xx - c_w)
    r_max = r.max()
    r_norm = r / r_max if r_max > 0 else r
    bands = []
    for lo, hi, closed in ((0.0, 1 / 3, False), (1 / 3, 2 / 3, False), (2 / 3, 1.0, True)):
        sel = (r_norm >= lo) & ((r_norm <= hi) if closed else (r_norm < hi))
        bands.append(float(arr[sel].mean()) if sel.any() else 0.0)
    return BandSummary(low=bands[0], mid=bands[1], high=bands[2])
