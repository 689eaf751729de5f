"""Quantized GEMM execution policy.

Prepares per-layer, per-site weight representations offline (channel
balancing, rotation, per-channel min-max quantization at the planned
bit-width) and exposes a GEMM hook that routes matmuls through the integer
kernel, the weight-only dequantized path, or activation fake-quantization,
depending on the run's toggles and the step's activation bit-width.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from .model import QUANT_SITES, DiTModel
from .quant import (
    BalanceTransform,
    balance_channels,
    compute_minmax_params,
    dequantize,
    quantize,
)
from .schedule import FP_BITS, Toggles
from .tensor import Tensor, matmul_int, mm


class QuantRuntime:
    """Holds the immutable quantized-weight snapshot for one run."""

    def __init__(
        self,
        model: DiTModel,
        toggles: Toggles,
        weight_bits: Dict[int, int],
        site_act_absmax: Optional[Dict[int, Dict[str, np.ndarray]]] = None,
        sign_seed: int = 0,
    ):
        self.toggles = toggles
        self._prepared: Dict[Tuple[int, str], tuple] = {}
        if not toggles.aigq_weights:
            return
        for l, blk in enumerate(model.blocks):
            bits = weight_bits[l]
            stats = (site_act_absmax or {}).get(l, {})
            for site in QUANT_SITES:
                w = getattr(blk, site)
                absmax = stats.get(site)
                if absmax is not None:
                    balanced, transform = balance_channels(
                        Tensor(w), Tensor(np.asarray(absmax)), sign_seed=sign_seed
                    )
                    w_eff = transform.apply_to_weight(w)
                else:
                    transform = None
                    w_eff = w
                params = compute_minmax_params(
                    Tensor(w_eff), bits, granularity="per-channel", axis=1
                )
                wq = quantize(Tensor(w_eff), params)
                self._prepared[(l, site)] = (wq, dequantize(wq).data, transform)

    def gemm_fn(self, abits: int):
        """GEMM hook for one step; ``abits >= 32`` means full-precision acts."""
        if not (self.toggles.aigq_weights or self.toggles.aigq_acts):
            return None
        quant_acts = self.toggles.aigq_acts and abits < FP_BITS

        def gemm(layer: int, site: str, x: np.ndarray, w: np.ndarray) -> np.ndarray:
            if self.toggles.aigq_weights:
                wq, w_deq, transform = self._prepared[(layer, site)]
                xe = transform.apply_to_activation(x) if transform is not None else x
                if quant_acts:
                    ap = compute_minmax_params(Tensor(xe), abits)
                    return matmul_int(quantize(Tensor(xe), ap), wq).data
                return mm(xe, w_deq)
            # activation-only quantization: fake-quantize then FP multiply
            ap = compute_minmax_params(Tensor(x), abits)
            return mm(dequantize(quantize(Tensor(x), ap)).data, w)

        return gemm
