"""Calibration, fake quantization, and the unique-value verifier."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qreli.core import make_rng
from qreli.errors import DegenerateRangeWarning
from qreli.quantize import (
    QuantConfig,
    QuantParams,
    compute_qparams,
    fake_quantize,
    round_half_away,
    verify_unique_values,
)


def sym_params(scale, bits=8):
    qmax = 2 ** (bits - 1) - 1
    return QuantParams(
        scale=np.asarray(scale, dtype=np.float64),
        zero_point=np.asarray(0, dtype=np.int64),
        qmin=-qmax,
        qmax=qmax,
    )


def test_round_half_away_ties():
    v = np.array([0.5, 1.5, -0.5, -1.5, 2.4, -2.4])
    assert np.array_equal(round_half_away(v), [1.0, 2.0, -1.0, -2.0, 2.0, -2.0])


def test_symmetric_minmax_scale():
    x = np.linspace(-1.0, 1.0, 21).astype(np.float32)
    qp = compute_qparams(x, QuantConfig(bits=8, symmetric=True))
    assert float(qp.scale) == pytest.approx(1.0 / 127, rel=1e-12)
    assert int(qp.zero_point) == 0
    assert (qp.qmin, qp.qmax) == (-127, 127)


def test_asymmetric_minmax_scale():
    x = np.linspace(0.0, 1.0, 11).astype(np.float32)
    qp = compute_qparams(x, QuantConfig(bits=8, symmetric=False))
    assert float(qp.scale) == pytest.approx(1.0 / 255, rel=1e-12)
    assert int(qp.zero_point) == 0
    assert (qp.qmin, qp.qmax) == (0, 255)


def test_degenerate_zero_tensor_warns():
    x = np.zeros(16, dtype=np.float32)
    with pytest.warns(DegenerateRangeWarning):
        qp = compute_qparams(x, QuantConfig(bits=8, symmetric=True))
    assert float(qp.scale) == 1.0
    assert np.array_equal(fake_quantize(x, qp), x)


def test_degenerate_constant_asymmetric_preserved():
    x = np.full(8, -3.0, dtype=np.float32)
    with pytest.warns(DegenerateRangeWarning):
        qp = compute_qparams(x, QuantConfig(bits=8, symmetric=False))
    assert np.array_equal(fake_quantize(x, qp), x)


def test_fake_quantize_hand_value():
    out = fake_quantize(np.array([0.5], dtype=np.float32), sym_params(1.0 / 127))
    assert out[0] == pytest.approx(64.0 / 127.0, abs=1e-7)  # round(63.5) -> 64


def test_fake_quantize_clamps():
    out = fake_quantize(np.array([10.0, -10.0], dtype=np.float32), sym_params(1.0 / 127))
    assert np.allclose(out, [1.0, -1.0], atol=1e-7)


def test_on_grid_fixed_point_exact():
    scale = np.float64(1.0 / 7)
    ks = np.arange(-7, 8, dtype=np.float64)
    x = (ks * scale).astype(np.float32)
    out = fake_quantize(x, sym_params(scale, bits=4))
    assert np.array_equal(out, x)


def test_percentile_calibration_trims_outliers():
    rng = make_rng(11)
    x = rng.normal(size=4096).astype(np.float32)
    x[0] = 1000.0
    full = compute_qparams(x, QuantConfig(bits=8, symmetric=True))
    trimmed = compute_qparams(
        x, QuantConfig(bits=8, symmetric=True, calibration="percentile", percentile=0.99)
    )
    assert float(trimmed.scale) < float(full.scale) / 50
    expected = np.quantile(np.abs(x.astype(np.float64)), 0.99) / 127
    assert float(trimmed.scale) == pytest.approx(expected, rel=1e-12)


def test_per_channel_single_channel_matches_per_tensor():
    rng = make_rng(2)
    x = rng.normal(size=(3, 20)).astype(np.float32)
    per_channel = compute_qparams(x, QuantConfig(bits=6, symmetric=True, channel_axis=0))
    out_pc = fake_quantize(x, per_channel)
    for c in range(3):
        row = x[c]
        qp = compute_qparams(row, QuantConfig(bits=6, symmetric=True))
        assert np.array_equal(out_pc[c], fake_quantize(row, qp))


def test_verify_counts():
    assert verify_unique_values(np.zeros(100, dtype=np.float32), 8).unique_count == 1
    rng = make_rng(42)
    raw = rng.normal(size=1000).astype(np.float32)
    rep = verify_unique_values(raw, 8)
    assert not rep.passed  # 1000 distinct random floats exceed 256
    qp = compute_qparams(raw, QuantConfig(bits=8, symmetric=True))
    rep_q = verify_unique_values(fake_quantize(raw, qp), 8)
    assert rep_q.passed and rep_q.unique_count <= 256


@pytest.mark.filterwarnings("ignore::qreli.errors.DegenerateRangeWarning")
@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    bits=st.sampled_from([2, 4, 6, 8, 12]),
    symmetric=st.booleans(),
    n=st.integers(1, 64),
)
def test_idempotence_and_bounds(seed, bits, symmetric, n):
    rng = make_rng(seed)
    x = (rng.normal(size=n) * 10 ** rng.uniform(-2, 2)).astype(np.float32)
    cfg = QuantConfig(bits=bits, symmetric=symmetric)
    if float(np.abs(x).max()) == 0.0:
        return
    qp = compute_qparams(x, cfg)
    once = fake_quantize(x, qp)
    twice = fake_quantize(once, qp)
    assert np.array_equal(once, twice)  # exact idempotence

    scale = float(qp.scale)
    zp = float(qp.zero_point)
    v = round_half_away(x.astype(np.float64) / scale + zp)
    inside = (v >= qp.qmin) & (v <= qp.qmax)
    # half a step plus one f32 ulp of the stored output
    err = np.abs(once.astype(np.float64) - x.astype(np.float64))
    tol = scale / 2 + np.spacing(np.abs(once)).astype(np.float64)
    assert np.all(err[inside] <= tol[inside])

    # the f32 cast is monotone, so comparing against the f32 bounds is exact
    lo = np.float32((qp.qmin - zp) * scale)
    hi = np.float32((qp.qmax - zp) * scale)
    assert np.all(once >= lo)
    assert np.all(once <= hi)

    rep = verify_unique_values(once, bits)
    assert rep.passed


def test_per_channel_unique_values_per_group():
    rng = make_rng(9)
    x = (rng.normal(size=(4, 256)) * np.array([[1], [10], [100], [1000]])).astype(
        np.float32
    )
    qp = compute_qparams(x, QuantConfig(bits=4, symmetric=True, channel_axis=0))
    out = fake_quantize(x, qp)
    for c in range(4):
        assert verify_unique_values(out[c], 4).passed


def test_quantconfig_validation():
    with pytest.raises(ValueError):
        QuantConfig(bits=1)
    with pytest.raises(ValueError):
        QuantConfig(bits=17)
    with pytest.raises(ValueError):
        QuantConfig(calibration="percentile", percentile=0.0)
    with pytest.raises(ValueError):
        QuantConfig(calibration="histogram")
