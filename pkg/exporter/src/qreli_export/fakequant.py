"""In-model fake quantization for exported vision towers.

Same equations as the consumer side, in torch:

    q   = clamp(round(x / scale + zero_point), qmin, qmax)
    out = (q - zero_point) * scale

with ties rounded half away from zero (torch.round is half-to-even, so the
rounding is spelled out). Wrapped linear layers quantize their weight
(symmetric min-max) and their input activations (asymmetric dynamic min-max),
which is enough to reproduce consumer-side PTQ behavior for export studies.
"""

from __future__ import annotations

import torch


def round_half_away(v: torch.Tensor) -> torch.Tensor:
    return torch.sign(v) * torch.floor(torch.abs(v) + 0.5)


def int_range(bits: int, symmetric: bool):
    if symmetric:
        qmax = 2 ** (bits - 1) - 1
        return -qmax, qmax
    return 0, 2**bits - 1


def compute_qparams(x: torch.Tensor, bits: int, symmetric: bool):
    """Min-max scale and zero point; a collapsed range falls back to scale 1."""
    qmin, qmax = int_range(bits, symmetric)
    if symmetric:
        amax = x.detach().abs().max().item()
        scale = amax / qmax if amax > 0 else 1.0
        zero_point = 0
    else:
        lo = x.detach().min().item()
        hi = x.detach().max().item()
        if hi == lo:
            scale = 1.0
        else:
            scale = (hi - lo) / (qmax - qmin)
        zero_point = int(min(max(round_half_away(torch.tensor(-lo / scale)).item(), qmin), qmax))
    return scale, zero_point, qmin, qmax


def fake_quantize(x: torch.Tensor, scale: float, zero_point: int, qmin: int, qmax: int):
    q = torch.clamp(round_half_away(x / scale + zero_point), qmin, qmax)
    return (q - zero_point) * scale


def quantize_minmax(x: torch.Tensor, bits: int, symmetric: bool) -> torch.Tensor:
    scale, zp, qmin, qmax = compute_qparams(x, bits, symmetric)
    return fake_quantize(x, scale, zp, qmin, qmax)


class FakeQuantLinear(torch.nn.Module):
    """Drop-in linear layer with quantized weight and input activations."""

    def __init__(self, inner: torch.nn.Linear, bits_w: int, bits_a: int):
        super().__init__()
        self.inner = inner
        self.bits_w = bits_w
        self.bits_a = bits_a

    def quantized_weight(self) -> torch.Tensor:
        return quantize_minmax(self.inner.weight, self.bits_w, symmetric=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xq = quantize_minmax(x, self.bits_a, symmetric=False)
        return torch.nn.functional.linear(xq, self.quantized_weight(), self.inner.bias)


def wrap_linear_layers(module: torch.nn.Module, bits_w: int, bits_a: int) -> int:
    """Replace every nn.Linear under ``module`` in place; returns the count."""
    wrapped = 0
    for name, child in list(module.named_children()):
        if isinstance(child, torch.nn.Linear):
            setattr(module, name, FakeQuantLinear(child, bits_w, bits_a))
            wrapped += 1
        else:
            wrapped += wrap_linear_layers(child, bits_w, bits_a)
    return wrapped


def iter_wrapped(module: torch.nn.Module):
    for m in module.modules():
        if isinstance(m, FakeQuantLinear):
            yield m
