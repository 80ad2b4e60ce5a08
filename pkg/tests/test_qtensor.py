"""Quantizer unit tests: rounding oracle, ranges, round trips, payload validation."""

from __future__ import annotations

import dataclasses
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quantflow import (
    QuantTensor,
    calibration_scale,
    dequantize,
    quant_range,
    quantize_per_channel,
    quantize_with_scale,
    round_half_even,
)

# -- rounding ------------------------------------------------------------------


def test_round_half_even_matches_decimal_on_exact_halves():
    # k/2 is exact in binary, so Decimal(str(x)) sees the same tie the float does
    for k in range(-41, 42):
        x = k / 2
        want = float(Decimal(x).quantize(Decimal(1), rounding=ROUND_HALF_EVEN))
        assert round_half_even(x) == want, f"x={x}"


def test_round_half_even_tie_table():
    ties = np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5, 3.5])
    np.testing.assert_array_equal(round_half_even(ties), [-2.0, -2.0, -0.0, 0.0, 2.0, 2.0, 4.0])


@given(st.floats(min_value=-1e12, max_value=1e12))
def test_round_half_even_is_nearest_integer(x):
    r = float(round_half_even(x))
    assert r == int(r)
    assert abs(x - r) <= 0.5
    if abs(x - r) == 0.5 and Decimal(x) - Decimal(int(x)) in (Decimal("0.5"), Decimal("-0.5")):
        assert int(r) % 2 == 0


# -- code ranges and scales ------------------------------------------------------


def test_quant_range_table():
    assert quant_range(1, signed=True) == (-1, 1)
    assert quant_range(2, signed=True) == (-1, 1)
    assert quant_range(4, signed=True) == (-7, 7)
    assert quant_range(8, signed=True) == (-127, 127)
    assert quant_range(1, signed=False) == (0, 1)
    assert quant_range(4, signed=False) == (0, 15)
    assert quant_range(8, signed=False) == (0, 255)


def test_quant_range_rejects_nonpositive_width():
    with pytest.raises(ValueError, match="bit_width"):
        quant_range(0, signed=True)


def test_calibration_scale_examples():
    assert calibration_scale(12.7, 8, signed=True) == pytest.approx(0.1)
    assert calibration_scale(255.0, 8, signed=False) == 1.0
    assert calibration_scale(0.0, 8, signed=True) == 1.0  # all-zero fallback


def test_calibration_scale_rejects_bad_maxabs():
    with pytest.raises(ValueError):
        calibration_scale(-1.0, 8, signed=True)
    with pytest.raises(ValueError):
        calibration_scale(float("inf"), 8, signed=True)


# -- per-channel weight quantization ---------------------------------------------


def test_quantize_per_channel_hand_worked():
    w = np.array([[0.5, -1.0, 0.25], [2.0, 0.0, -2.0]])
    q = quantize_per_channel(w, bit_width=3)
    # hi = 3; scales maxabs/3; 0.5/(1/3) = 1.5 rounds to even 2
    np.testing.assert_allclose(q.scales, [1.0 / 3.0, 2.0 / 3.0])
    np.testing.assert_array_equal(q.data, [[2, -3, 1], [3, 0, -3]])
    assert q.signed and q.bit_width == 3 and q.zero_point == 0
    assert not q.zero_channels.any()


def test_quantize_per_channel_binary_uses_mean_and_sign():
    w = np.array([[0.3, -0.2, 0.0], [-1.0, 4.0, -3.0]])
    q = quantize_per_channel(w, bit_width=1)
    np.testing.assert_allclose(q.scales, [0.5 / 3.0, 8.0 / 3.0])
    np.testing.assert_array_equal(q.data, [[1, -1, 1], [-1, 1, -1]])  # sign(0) -> +1


def test_quantize_per_channel_zero_channel_flagged():
    w = np.array([[0.0, 0.0], [1.0, -1.0]])
    q = quantize_per_channel(w, bit_width=4)
    np.testing.assert_array_equal(q.zero_channels, [True, False])
    assert q.scales[0] == 1.0
    np.testing.assert_array_equal(q.data[0], [0, 0])


def test_quantize_per_channel_other_axis():
    w = np.arange(12, dtype=np.float64).reshape(3, 4) - 5.0
    q = quantize_per_channel(w, bit_width=5, channel_axis=1)
    assert q.scales.shape == (4,)
    np.testing.assert_allclose(q.scales, np.abs(w).max(axis=0) / 15.0)


def test_quantize_per_channel_rejects_nonfinite():
    with pytest.raises(ValueError, match="finite"):
        quantize_per_channel(np.array([[np.nan]]), bit_width=4)


@st.composite
def _weights(draw):
    shape = draw(st.tuples(st.integers(1, 4), st.integers(1, 6)))
    vals = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False)
    w = draw(st.lists(vals, min_size=shape[0] * shape[1], max_size=shape[0] * shape[1]))
    return np.array(w).reshape(shape)


@given(_weights(), st.integers(2, 8))
def test_quantization_error_bounded_by_half_scale(w, bits):
    q = quantize_per_channel(w, bit_width=bits)
    err = np.abs(dequantize(q) - w)
    bound = q.scale_column() / 2.0
    assert np.all(err <= bound + 1e-12 * np.abs(w))


@given(_weights(), st.integers(1, 8))
def test_requantizing_dequantized_is_stable(w, bits):
    q1 = quantize_per_channel(w, bit_width=bits)
    q2 = quantize_per_channel(dequantize(q1), bit_width=bits)
    np.testing.assert_array_equal(q1.data, q2.data)
    np.testing.assert_allclose(q2.scales, q1.scales, rtol=1e-12)


@given(_weights())
def test_binary_payload_is_sign_valued(w):
    q = quantize_per_channel(w, bit_width=1)
    assert set(np.unique(q.data)) <= {-1, 1}
    assert np.all(q.scales > 0)


# -- payload validation -----------------------------------------------------------


def test_quant_tensor_rejects_out_of_range_payload():
    with pytest.raises(ValueError, match=r"payload outside \[-7, 7\]"):
        QuantTensor(np.array([8]), np.array([1.0]), bit_width=4, signed=True)


def test_quant_tensor_rejects_zero_in_binary_payload():
    with pytest.raises(ValueError, match="binary payload"):
        QuantTensor(np.array([1, 0, -1]), np.float64(1.0), bit_width=1, signed=True, channel_axis=None)


def test_quant_tensor_scale_shape_must_match_channels():
    with pytest.raises(ValueError, match="scales shape"):
        QuantTensor(np.zeros((3, 2), np.int64), np.ones(2), bit_width=4, signed=True, channel_axis=0)


def test_quant_tensor_per_tensor_needs_scalar_scale():
    with pytest.raises(ValueError, match="scalar"):
        QuantTensor(np.zeros(3, np.int64), np.ones(3), bit_width=4, signed=True, channel_axis=None)


def test_quant_tensor_rejects_nonzero_zero_point():
    with pytest.raises(ValueError, match="zero_point"):
        QuantTensor(np.zeros(2, np.int64), np.ones(2), bit_width=4, signed=True, zero_point=3)


def test_quant_tensor_rejects_nonpositive_scale():
    with pytest.raises(ValueError, match="positive"):
        QuantTensor(np.zeros(2, np.int64), np.array([1.0, 0.0]), bit_width=4, signed=True)


def test_quant_tensor_is_frozen_and_read_only():
    q = quantize_per_channel(np.ones((2, 3)), bit_width=4)
    with pytest.raises(dataclasses.FrozenInstanceError):
        q.bit_width = 8
    with pytest.raises(ValueError):
        q.data[0, 0] = 5
    with pytest.raises(ValueError):
        q.scales[0] = 2.0


# -- fixed-scale activation quantization -------------------------------------------


def test_quantize_with_scale_clamps_and_rounds_half_even():
    x = np.array([-3.0, 0.49, 0.5, 1.5, 300.0])
    np.testing.assert_array_equal(quantize_with_scale(x, 1.0, 8, signed=False), [0, 0, 0, 2, 255])
    np.testing.assert_array_equal(quantize_with_scale(x, 1.0, 8, signed=True), [-3, 0, 0, 2, 127])


def test_quantize_with_scale_rejects_signed_binary():
    with pytest.raises(ValueError, match="binary activations"):
        quantize_with_scale(np.ones(3), 1.0, 1, signed=True)


def test_quantize_with_scale_rejects_bad_scale():
    with pytest.raises(ValueError, match="scale"):
        quantize_with_scale(np.ones(3), 0.0, 8, signed=False)
    with pytest.raises(ValueError, match="scale"):
        quantize_with_scale(np.ones(3), float("nan"), 8, signed=False)


def test_dequantize_per_tensor_payload():
    q = QuantTensor(np.array([0, 2, 255]), np.float64(0.5), bit_width=8, signed=False, channel_axis=None)
    np.testing.assert_allclose(dequantize(q), [0.0, 1.0, 127.5])
