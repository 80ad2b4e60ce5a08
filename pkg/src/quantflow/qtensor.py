"""Per-channel symmetric uniform quantization.

All quantizers here are symmetric (zero_point fixed at 0) and round half to
even. Weights use a signed narrow range that excludes -2^(b-1) so sign flips
(e.g. from batch-norm folding) never overflow. b=1 means binary {-1, +1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuantTensor",
    "quant_range",
    "calibration_scale",
    "round_half_even",
    "quantize_per_channel",
    "quantize_with_scale",
    "dequantize",
]


def round_half_even(x: np.ndarray | float) -> np.ndarray | float:
    """Round to nearest integer, ties to even. np.round implements exactly this."""
    return np.round(x)


def quant_range(bit_width: int, signed: bool) -> tuple[int, int]:
    """Inclusive integer range of a code. Signed b>=2 is narrow: +-(2^(b-1)-1)."""
    if bit_width < 1:
        raise ValueError(f"bit_width must be >= 1, got {bit_width}")
    if signed:
        if bit_width == 1:
            return (-1, 1)  # binary: only -1 and +1 are valid, 0 is not a code
        m = 2 ** (bit_width - 1) - 1
        return (-m, m)
    return (0, 2**bit_width - 1)


def calibration_scale(maxabs: float, bit_width: int, signed: bool) -> float:
    """Scale mapping [0, maxabs] onto the positive half of the code range.

    An all-zero calibration (maxabs == 0) falls back to scale 1.0 so the
    tensor stays representable; callers flag that channel.
    """
    if maxabs < 0 or not np.isfinite(maxabs):
        raise ValueError(f"maxabs must be finite and >= 0, got {maxabs}")
    if maxabs == 0.0:
        return 1.0
    _, hi = quant_range(bit_width, signed)
    return maxabs / hi


@dataclass(frozen=True)
class QuantTensor:
    """Integer payload plus the scales that map it back to reals.

    data        int64 payload, every element inside quant_range(bit_width, signed)
    scales      float64; shape (C,) with channel_axis set, or () for per-tensor
    zero_channels  bool mask over channels whose calibration maxabs was zero
    zero_point  always 0 (symmetric quantization only)
    """

    data: np.ndarray
    scales: np.ndarray
    bit_width: int
    signed: bool
    channel_axis: int | None = 0
    zero_channels: np.ndarray | None = None
    zero_point: int = 0

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.int64)
        scales = np.asarray(self.scales, dtype=np.float64)  # asarray keeps 0-d scales 0-d
        if scales.ndim:
            scales = np.ascontiguousarray(scales)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "scales", scales)
        if self.zero_point != 0:
            raise ValueError("zero_point is fixed at 0")
        if self.channel_axis is None:
            if scales.ndim != 0:
                raise ValueError("per-tensor QuantTensor needs a scalar scale")
        else:
            if not 0 <= self.channel_axis < data.ndim:
                raise ValueError(f"channel_axis {self.channel_axis} out of range for shape {data.shape}")
            if scales.shape != (data.shape[self.channel_axis],):
                raise ValueError(
                    f"scales shape {scales.shape} does not match channel count "
                    f"{data.shape[self.channel_axis]}"
                )
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("scales must be finite and strictly positive")
        lo, hi = quant_range(self.bit_width, self.signed)
        if data.size and (data.min() < lo or data.max() > hi):
            raise ValueError(f"payload outside [{lo}, {hi}] for {self.bit_width}-bit signed={self.signed}")
        if self.signed and self.bit_width == 1 and data.size and np.any(data == 0):
            raise ValueError("binary payload must be -1 or +1, found 0")
        if self.zero_channels is not None:
            zc = np.ascontiguousarray(self.zero_channels, dtype=bool)
            if self.channel_axis is None or zc.shape != (data.shape[self.channel_axis],):
                raise ValueError("zero_channels mask must match the channel count")
            object.__setattr__(self, "zero_channels", zc)
            zc.setflags(write=False)
        data.setflags(write=False)
        scales.setflags(write=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def scale_column(self) -> np.ndarray:
        """Scales broadcast-ready against data (ones everywhere but channel_axis)."""
        if self.channel_axis is None:
            return self.scales
        shape = [1] * self.data.ndim
        shape[self.channel_axis] = -1
        return self.scales.reshape(shape)


def quantize_per_channel(w: np.ndarray, bit_width: int, channel_axis: int = 0) -> QuantTensor:
    """Quantize a float tensor with one symmetric scale per channel.

    b >= 2: scale = maxabs/(2^(b-1)-1), codes round-half-even then clamp.
    b == 1: scale = mean(|w|), codes are sign(w) with sign(0) -> +1.
    All-zero channels get scale 1.0 and are flagged in zero_channels.

    Round-trip: re-quantizing dequantize(q) at the same width reproduces the
    payload for tensors built here (each non-zero channel saturates its range).
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    if not 0 <= channel_axis < w.ndim:
        raise ValueError(f"channel_axis {channel_axis} out of range for shape {w.shape}")
    reduce_axes = tuple(i for i in range(w.ndim) if i != channel_axis)
    absw = np.abs(w)
    if bit_width == 1:
        stat = absw.mean(axis=reduce_axes) if reduce_axes else absw
    else:
        stat = absw.max(axis=reduce_axes) if reduce_axes else absw
    zero = stat == 0.0
    lo, hi = quant_range(bit_width, signed=True)
    scales = np.where(zero, 1.0, stat / (1.0 if bit_width == 1 else hi))
    col = [1] * w.ndim
    col[channel_axis] = -1
    if bit_width == 1:
        q = np.where(w < 0, -1, 1).astype(np.int64)  # sign(0) -> +1
    else:
        q = np.clip(round_half_even(w / scales.reshape(col)), lo, hi).astype(np.int64)
    return QuantTensor(
        data=q,
        scales=scales,
        bit_width=bit_width,
        signed=True,
        channel_axis=channel_axis,
        zero_channels=zero,
    )


def quantize_with_scale(x: np.ndarray, scale: float, bit_width: int, signed: bool) -> np.ndarray:
    """Quantize with a fixed per-tensor scale; out-of-range values clamp.

    Returns the raw int64 payload. Used for activations, whose scales come
    from calibration rather than from the tensor itself.
    """
    if not np.isfinite(scale) or scale <= 0:
        raise ValueError(f"scale must be finite and > 0, got {scale}")
    if signed and bit_width == 1:
        raise ValueError("binary activations are unsigned; signed b=1 has no zero code")
    lo, hi = quant_range(bit_width, signed)
    x = np.asarray(x, dtype=np.float64)
    return np.clip(round_half_even(x / scale), lo, hi).astype(np.int64)


def dequantize(q: QuantTensor) -> np.ndarray:
    """Map the payload back to reals: data * scale, broadcast per channel."""
    return q.data.astype(np.float64) * q.scale_column()
