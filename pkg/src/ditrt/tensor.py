"""Deterministic dense kernels.

All matrix products accumulate in float64 over a fixed, ascending-k order and
round once to float32 at the end. Two calls with identical inputs are
bit-identical, and the accumulation order matches a naive triple loop with a
double accumulator, which is what the reference oracles in the test suite use.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError

# Signed headroom of the emulated integer accumulator.
ACCUMULATOR_BITS = 63


@dataclass
class Tensor:
    """Dense row-major float32 payload with an optional video-frame axis."""

    data: np.ndarray
    frame_axis: Optional[int] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("tensor contains non-finite values")
        if self.frame_axis is not None and not (0 <= self.frame_axis < self.data.ndim):
            raise DimensionError(
                f"frame_axis {self.frame_axis} out of range for ndim {self.data.ndim}"
            )

    @property
    def shape(self):
        return self.data.shape


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Core sequential matmul: float64 accumulation in ascending-k order.

    Bit-identical to ``for k: c[i, j] += a[i, k] * b[k, j]`` with a float64
    accumulator. Returns float32.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    a64 = a.astype(np.float64)
    b64 = b.astype(np.float64)
    c = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    tmp = np.empty_like(c)
    for k in range(a.shape[1]):
        np.multiply(a64[:, k, None], b64[None, k, :], out=tmp)
        c += tmp
    return c.astype(np.float32)


def matmul_fp(a: Tensor, b: Tensor) -> Tensor:
    """Floating-point matrix multiply with reproducible accumulation order."""
    return Tensor(mm(a.data, b.data))


def matmul_int(aq, wq, acc_bits: int = ACCUMULATOR_BITS) -> Tensor:
    """Emulated low-bit integer GEMM.

    Computes the exact integer products (code - zero_point) per k slice and
    applies the joint scale while accumulating in the same ascending-k order
    as :func:`mm`. Because scales carry 16-bit significands, every term is the
    float64 value of the exact real product, so the result is bit-identical to
    ``matmul_fp(dequantize(aq), dequantize(wq))``.

    Activations must be quantized per-tensor; weights may be per-tensor or
    per-channel along the output axis.
    """
    from .quant import QuantizedTensor  # local import to avoid a cycle

    if not isinstance(aq, QuantizedTensor) or not isinstance(wq, QuantizedTensor):
        raise TypeError("matmul_int expects QuantizedTensor operands")
    if len(aq.shape) != 2 or len(wq.shape) != 2 or aq.shape[1] != wq.shape[0]:
        raise DimensionError(f"matmul shapes {aq.shape} x {wq.shape}")
    if aq.params.granularity != "per-tensor":
        raise ConfigurationError("activation operand must be per-tensor quantized")
    if wq.params.granularity == "per-channel" and wq.params.axis != 1:
        raise ConfigurationError("per-channel weights must be quantized along axis 1")

    k_dim = aq.shape[1]
    max_mag = k_dim * (2 ** aq.params.bit_width - 1) * (2 ** wq.params.bit_width - 1)
    if max_mag > 2 ** acc_bits - 1:
        raise ConfigurationError(
            f"integer accumulator overflow risk: K={k_dim} at "
            f"b={aq.params.bit_width}x{wq.params.bit_width} exceeds "
            f"{acc_bits}-bit headroom"
        )

    a_int = aq.codes.astype(np.int64) - int(np.asarray(aq.params.zero_point))
    w_int = wq.codes.astype(np.int64) - np.asarray(wq.params.zero_point, dtype=np.int64)
    # Joint scale per output column; exact in float64 (16+16 bit significands).
    s_a = float(np.asarray(aq.params.scale))
    s_w = np.atleast_1d(np.asarray(wq.params.scale, dtype=np.float64))
    joint = s_a * s_w  # shape () broadcastable or (N,)

    c = np.zeros((aq.shape[0], wq.shape[1]), dtype=np.float64)
    tmp = np.empty_like(c)
    for k in range(k_dim):
        np.multiply(joint[None, :], a_int[:, k, None] * w_int[None, k, :], out=tmp)
        c += tmp
    return Tensor(c.astype(np.float32))


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention with stabilized softmax."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"attention shapes q={q.shape} k={k.shape} v={v.shape}"
        )
    d = q.shape[1]
    scores = mm(q.data, k.data.T).astype(np.float64) / np.sqrt(float(d))
    p = _softmax_rows(scores)
    return Tensor(mm(p, v.data))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-row normalization over the last axis, then affine."""
    xv = x.data
    if gamma.data.shape != (xv.shape[-1],) or beta.data.shape != (xv.shape[-1],):
        raise DimensionError("layernorm affine shape mismatch")
    x64 = xv.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    normed = (x64 - mean) / np.sqrt(var + 1e-5)
    out = normed * gamma.data.astype(np.float64) + beta.data.astype(np.float64)
    return Tensor(out.astype(np.float32), frame_axis=x.frame_axis)
