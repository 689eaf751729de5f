"""Uniform min-max quantization, channel balancing, and weight bit allocation.

Scales are rounded *up* to 16-bit significands. With at most 8-bit codes this
makes every dequantized value exactly representable in float32 and every
scale product exact in float64, which is what lets the integer GEMM match the
dequantize-then-multiply float path bit for bit. Rounding up (never down)
preserves the s/2 round-trip bound for in-range values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import hadamard

from .errors import BudgetError, ConfigurationError
from .tensor import Tensor, mm

SCALE_SIGNIFICAND_BITS = 16


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _round_scale_up(s: np.ndarray) -> np.ndarray:
    """Round positive scales up to 16 significant bits."""
    s = np.asarray(s, dtype=np.float64)
    m, e = np.frexp(s)
    m = np.ceil(m * 2.0 ** SCALE_SIGNIFICAND_BITS) / 2.0 ** SCALE_SIGNIFICAND_BITS
    return np.ldexp(m, e)


@dataclass
class QuantParams:
    """Affine quantization parameters (scalar or one pair per channel)."""

    scale: np.ndarray
    zero_point: np.ndarray
    bit_width: int
    granularity: str = "per-tensor"  # or "per-channel"
    axis: Optional[int] = None

    def __post_init__(self):
        if self.granularity not in ("per-tensor", "per-channel"):
            raise ConfigurationError(f"unknown granularity {self.granularity!r}")
        if self.granularity == "per-channel" and self.axis is None:
            raise ConfigurationError("per-channel params need an axis")
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.zero_point = np.asarray(self.zero_point, dtype=np.int64)
        if not np.all(self.scale > 0) or not np.all(np.isfinite(self.scale)):
            raise ConfigurationError("scale must be positive and finite")
        top = 2 ** self.bit_width - 1
        if np.any(self.zero_point < 0) or np.any(self.zero_point > top):
            raise ConfigurationError(f"zero point outside [0, {top}]")


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    params: QuantParams
    shape: Tuple[int, ...]

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        top = 2 ** self.params.bit_width - 1
        if np.any(self.codes < 0) or np.any(self.codes > top):
            raise ConfigurationError(f"codes outside [0, {top}]")
        if self.codes.shape != tuple(self.shape):
            raise ConfigurationError("codes shape does not match declared shape")


def _channel_shape(val: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = -1
    return np.asarray(val).reshape(shape)


def compute_minmax_params(
    x: Tensor, bit_width: int, granularity: str = "per-tensor", axis: Optional[int] = None
) -> QuantParams:
    """Min-max scale and zero point: s = (max - min) / (2^b - 1)."""
    data = np.asarray(x.data, dtype=np.float64)
    if data.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    top = 2 ** bit_width - 1
    if granularity == "per-tensor":
        lo, hi = data.min(), data.max()
        lo, hi = np.asarray(lo), np.asarray(hi)
    elif granularity == "per-channel":
        if axis is None:
            raise ConfigurationError("per-channel calibration needs an axis")
        reduce_axes = tuple(i for i in range(data.ndim) if i != axis)
        lo = data.min(axis=reduce_axes)
        hi = data.max(axis=reduce_axes)
    else:
        raise ConfigurationError(f"unknown granularity {granularity!r}")

    span = hi - lo
    degenerate = span <= 0
    scale = np.where(degenerate, 1.0, _round_scale_up(np.where(degenerate, 1.0, span) / top))
    z = np.clip(round_half_away(-lo / scale), 0, top).astype(np.int64)
    z = np.where(degenerate, 0, z)
    if granularity == "per-tensor":
        scale, z = scale[()], z[()]
    return QuantParams(scale, z, bit_width, granularity, axis)


def quantize(x: Tensor, params: QuantParams) -> QuantizedTensor:
    """clamp(round(x / s) + z, 0, 2^b - 1), rounding half away from zero."""
    data = np.asarray(x.data, dtype=np.float64)
    if params.granularity == "per-channel":
        s = _channel_shape(params.scale, data.ndim, params.axis)
        z = _channel_shape(params.zero_point, data.ndim, params.axis)
    else:
        s, z = params.scale, params.zero_point
    top = 2 ** params.bit_width - 1
    codes = np.clip(round_half_away(data / s) + z, 0, top).astype(np.int64)
    return QuantizedTensor(codes, params, data.shape)


def dequantize(q: QuantizedTensor) -> Tensor:
    """x_hat = s * (code - z); exact in float32 given 16-bit scales."""
    params = q.params
    if params.granularity == "per-channel":
        s = _channel_shape(params.scale, q.codes.ndim, params.axis)
        z = _channel_shape(params.zero_point, q.codes.ndim, params.axis)
    else:
        s, z = params.scale, params.zero_point
    return Tensor((s * (q.codes - z).astype(np.float64)).astype(np.float32))


# ---------------------------------------------------------------------------
# Channel balancing: offline scaling absorption plus a seeded Hadamard rotation


@dataclass
class BalanceTransform:
    """Per-channel scaling (absorbed into the weights) and a sign-randomized
    Walsh-Hadamard rotation over the leading power-of-two block of channels."""

    channel_scales: np.ndarray
    block_size: int
    sign_seed: int = 0
    _rotation: np.ndarray = field(default=None, repr=False)

    def rotation_matrix(self) -> np.ndarray:
        if self._rotation is None:
            n = len(self.channel_scales)
            b = self.block_size
            signs = np.where(
                np.random.default_rng(self.sign_seed).random(b) < 0.5, -1.0, 1.0
            )
            r = np.eye(n)
            r[:b, :b] = (signs[:, None] * hadamard(b)) / np.sqrt(b)
            self._rotation = r
        return self._rotation

    def apply_to_activation(self, x: np.ndarray) -> np.ndarray:
        scaled = x.astype(np.float64) / self.channel_scales[None, :]
        return mm(scaled.astype(np.float32), self.rotation_matrix().astype(np.float32))

    def apply_to_weight(self, w: np.ndarray) -> np.ndarray:
        scaled = self.channel_scales[:, None] * w.astype(np.float64)
        return mm(self.rotation_matrix().T.astype(np.float32), scaled.astype(np.float32))


def _pow2_block(n: int) -> int:
    b = 1
    while b * 2 <= n:
        b *= 2
    return b


def balance_channels(
    w: Tensor, activation_absmax: Tensor, sign_seed: int = 0
) -> Tuple[Tensor, BalanceTransform]:
    """Derive per-channel scales from calibration stats and absorb them.

    c_j = sqrt(max|x_j| / max|w_j|), clipped to [1e-3, 1e3]; channels with no
    signal keep c_j = 1. Returns the weights with diag(c) absorbed and the
    transform descriptor (the rotation is applied separately at runtime).
    """
    wv = np.asarray(w.data, dtype=np.float64)
    stats = np.asarray(activation_absmax.data, dtype=np.float64)
    if wv.ndim != 2 or stats.shape != (wv.shape[0],):
        raise ConfigurationError(
            f"balance stats shape {stats.shape} does not match weight rows {wv.shape}"
        )
    w_absmax = np.abs(wv).max(axis=1)
    ok = (stats > 0) & (w_absmax > 0)
    c = np.ones_like(stats)
    c[ok] = np.clip(np.sqrt(stats[ok] / w_absmax[ok]), 1e-3, 1e3)
    transform = BalanceTransform(c, _pow2_block(wv.shape[0]), sign_seed)
    balanced = (c[:, None] * wv).astype(np.float32)
    return Tensor(balanced), transform


# ---------------------------------------------------------------------------
# Budgeted mixed-precision weight bit allocation

BIT_LEVELS = (4, 6, 8)


def bit_penalty(b: int) -> float:
    """Relative quantization MSE weight for bit-width b (4^-b scaling)."""
    return 2.0 ** (-2 * (b - 4))


@dataclass
class WeightBitPlan:
    bits_per_layer: Dict[int, int]
    budget: int

    def __post_init__(self):
        if sum(self.bits_per_layer.values()) > self.budget:
            raise BudgetError("bit plan exceeds budget")


def allocate_weight_bits(
    sensitivities: Mapping[int, float],
    total_budget: int,
    levels: Sequence[int] = BIT_LEVELS,
) -> WeightBitPlan:
    """Greedy budgeted allocation.

    Start every layer at the minimum level, then repeatedly upgrade the layer
    with the largest sensitivity reduction per extra bit while the budget
    allows. Ties break toward the lowest layer index.
    """
    levels = sorted(levels)
    layers = sorted(sensitivities)
    if total_budget < len(layers) * levels[0]:
        raise BudgetError(
            f"budget {total_budget} cannot cover {len(layers)} layers at "
            f"{levels[0]} bits"
        )
    level_idx = {l: 0 for l in layers}
    spent = len(layers) * levels[0]

    def gain(l):
        i = level_idx[l]
        if i + 1 >= len(levels):
            return None
        step = levels[i + 1] - levels[i]
        if spent + step > total_budget:
            return None
        drop = sensitivities[l] * (bit_penalty(levels[i]) - bit_penalty(levels[i + 1]))
        return drop / step

    while True:
        best = None
        for l in layers:
            g = gain(l)
            if g is not None and (best is None or g > best[0]):
                best = (g, l)
        if best is None:
            break
        _, l = best
        spent += levels[level_idx[l] + 1] - levels[level_idx[l]]
        level_idx[l] += 1

    return WeightBitPlan({l: levels[i] for l, i in level_idx.items()}, total_budget)
