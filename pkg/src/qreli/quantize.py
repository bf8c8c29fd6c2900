"""Fake quantization: range calibration, quantize-clamp-dequantize, verification.

The simulated pipeline keeps every tensor in float32 but restricts values to a
low-bit grid:

    q   = clamp(round(x / scale + zero_point), qmin, qmax)
    out = (q - zero_point) * scale

Rounding ties go half-away-from-zero. The verification utility counts distinct
float32 bit patterns; a correct b-bit simulation never exceeds 2**b.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateRangeWarning

MIN_BITS = 2
MAX_BITS = 16


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties away from zero (unlike np.round)."""
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


@dataclass(frozen=True)
class QuantConfig:
    """How to quantize: bit-width, symmetry, grouping, and range statistic."""

    bits: int = 8
    symmetric: bool = True
    channel_axis: Optional[int] = None  # None = per-tensor
    calibration: str = "minmax"  # "minmax" | "percentile"
    percentile: float = 1.0  # p in (0, 1], used by percentile calibration

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if self.calibration not in ("minmax", "percentile"):
            raise ValueError(f"unknown calibration {self.calibration!r}")
        if not 0.0 < self.percentile <= 1.0:
            raise ValueError(f"percentile must be in (0, 1], got {self.percentile}")


@dataclass(frozen=True)
class QuantParams:
    """Calibrated scale/zero-point per group plus the integer clamp range."""

    scale: np.ndarray  # float64, shape () per-tensor or (n_groups,) per-channel
    zero_point: np.ndarray  # int64, same shape as scale
    qmin: int
    qmax: int
    channel_axis: Optional[int] = None

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise ValueError("scale must be positive")
        if self.qmin >= self.qmax:
            raise ValueError("qmin must be below qmax")


@dataclass(frozen=True)
class VerificationReport:
    unique_count: int
    limit: int
    passed: bool


def int_range(bits: int, symmetric: bool) -> tuple[int, int]:
    if symmetric:
        qmax = 2 ** (bits - 1) - 1
        return -qmax, qmax
    return 0, 2**bits - 1


def _group_view(t: np.ndarray, axis: Optional[int]) -> np.ndarray:
    """Flatten to [n_groups, group_size]; one group for per-tensor."""
    arr = np.asarray(t, dtype=np.float64)
    if axis is None:
        return arr.reshape(1, -1)
    return np.moveaxis(arr, axis, 0).reshape(arr.shape[axis], -1)


def compute_qparams(t: np.ndarray, cfg: QuantConfig) -> QuantParams:
    """Calibrate scale and zero-point from the tensor's value range.

    MinMax uses the exact extrema; percentile replaces them with the p-quantile
    of |x| (symmetric) or the p / (1-p) quantiles of x (asymmetric). A group
    whose range collapses to zero width gets scale 1.0 and a
    DegenerateRangeWarning instead of an error so pipelines survive dead
    channels.
    """
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    groups = _group_view(t, cfg.channel_axis)
    qmin, qmax = int_range(cfg.bits, cfg.symmetric)
    if cfg.symmetric:
        if cfg.calibration == "minmax":
            amax = np.abs(groups).max(axis=1)
        else:
            amax = np.quantile(np.abs(groups), cfg.percentile, axis=1)
        degenerate = amax == 0.0
        scale = np.where(degenerate, 1.0, amax / qmax)
        zero_point = np.zeros_like(scale, dtype=np.int64)
    else:
        if cfg.calibration == "minmax":
            lo = groups.min(axis=1)
            hi = groups.max(axis=1)
        else:
            lo = np.quantile(groups, 1.0 - cfg.percentile, axis=1)
            hi = np.quantile(groups, cfg.percentile, axis=1)
        degenerate = hi == lo
        scale = np.where(degenerate, 1.0, (hi - lo) / (qmax - qmin))
        zero_point = np.clip(round_half_away(-lo / scale), qmin, qmax).astype(np.int64)
    if np.any(degenerate):
        warnings.warn(
            "calibration range has zero width; scale forced to 1.0",
            DegenerateRangeWarning,
            stacklevel=2,
        )
    if cfg.channel_axis is None:
        scale = scale.reshape(())
        zero_point = zero_point.reshape(())
    return QuantParams(
        scale=scale, zero_point=zero_point, qmin=qmin, qmax=qmax, channel_axis=cfg.channel_axis
    )


def _broadcast_groups(param: np.ndarray, ndim: int, axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return param
    shape = [1] * ndim
    shape[axis] = -1
    return param.reshape(shape)


def fake_quantize(t: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Quantize-clamp-dequantize; a total, idempotent map onto the value grid."""
    arr = np.asarray(t, dtype=np.float64)
    scale = _broadcast_groups(np.asarray(qp.scale, dtype=np.float64), arr.ndim, qp.channel_axis)
    zp = _broadcast_groups(np.asarray(qp.zero_point, dtype=np.float64), arr.ndim, qp.channel_axis)
    q = np.clip(round_half_away(arr / scale + zp), qp.qmin, qp.qmax)
    return ((q - zp) * scale).astype(np.float32)


def verify_unique_values(t: np.ndarray, bits: int) -> VerificationReport:
    """Count distinct float32 bit patterns; pass iff the count fits in ``bits``."""
    arr = np.ascontiguousarray(t, dtype=np.float32)
    unique = int(np.unique(arr.view(np.uint32)).size)
    limit = 2**bits
    return VerificationReport(unique_count=unique, limit=limit, passed=unique <= limit)
