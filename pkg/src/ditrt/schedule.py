"""Joint caching / quantization / pruning decision engine.

Policies are small pure functions (directly testable against piecewise
transcriptions); the Scheduler owns the per-run mutable state: the feature
cache, last-step features, divergence history, the latent history window, and
the decision trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

FP_BITS = 32  # billing width of an unquantized operand


@dataclass
class ThresholdConfig:
    """Every policy threshold in one bundle."""

    delta1: float
    delta2: float
    tau_max: int = 6
    tau_mid: int = 3
    tau_min: int = 1
    theta1: float = 0.4
    theta2: float = 0.8
    bit_max: int = 8
    bit_mid: int = 6
    bit_min: int = 4
    tau_high: float = 0.98
    tau_low: float = 0.5
    p_base: float = 0.3
    v_low: float = 0.0
    v_high: float = 0.0
    history_k: int = 4
    prune_adjust: float = 2.0

    def validate(self):
        checks = [
            ("delta1/delta2", self.delta1 <= self.delta2),
            ("theta1/theta2", self.theta1 <= self.theta2),
            ("tau_low/tau_high", self.tau_low <= self.tau_high),
            ("v_low/v_high", self.v_low <= self.v_high),
            ("tau_min/tau_mid/tau_max", self.tau_min <= self.tau_mid <= self.tau_max),
            ("bit_min/bit_mid/bit_max", self.bit_min <= self.bit_mid <= self.bit_max),
            ("tau_min", self.tau_min >= 1),
            ("p_base", 0.0 <= self.p_base <= 1.0),
            ("prune_adjust", self.prune_adjust >= 1.0),
            ("history_k", self.history_k >= 1),
        ]
        for name, ok in checks:
            if not ok:
                raise ConfigurationError(f"threshold invariant violated: {name}")
        return self


# ---------------------------------------------------------------------------
# Piecewise policy functions


def divergence_score(
    p_now: Tensor, p_cached: Tensor, k: int, m_now: Tensor, m_prev: Tensor
) -> float:
    """Per-step feature drift since the cached step, weighted by the feature
    map's one-step finite-difference magnitude across timesteps."""
    if p_now.shape != p_cached.shape or m_now.shape != m_prev.shape:
        raise DimensionError("divergence operands must share shapes")
    if k < 1:
        raise ValueError("k must be >= 1")
    drift = float(
        np.abs(p_now.data.astype(np.float64) - p_cached.data.astype(np.float64)).sum()
    )
    grad = float(
        np.linalg.norm(m_now.data.astype(np.float64) - m_prev.data.astype(np.float64))
    )
    return (drift / k) * grad


def refresh_interval(d: float, cfg: ThresholdConfig) -> int:
    if d < cfg.delta1:
        return cfg.tau_max
    if d < cfg.delta2:
        return cfg.tau_mid
    return cfg.tau_min


def redundancy_metric(d_layers: Sequence[float]) -> float:
    """Map mean per-layer divergence into (0, 1]; 1 means fully redundant."""
    if len(d_layers) == 0:
        raise ValueError("need at least one divergence score")
    return 1.0 / (1.0 + float(np.mean(d_layers)))


def activation_bits(r: float, cfg: ThresholdConfig) -> int:
    if r >= cfg.theta2:
        return cfg.bit_min
    if r >= cfg.theta1:
        return cfg.bit_mid
    return cfg.bit_max


def layer_similarity(p_l: Tensor, p_l1: Tensor) -> float:
    if p_l.shape != p_l1.shape:
        raise DimensionError("similarity operands must share shapes")
    a = p_l.data.astype(np.float64).ravel()
    b = p_l1.data.astype(np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def prune_probability(s: float, cfg: ThresholdConfig, p_base: Optional[float] = None) -> float:
    base = cfg.p_base if p_base is None else p_base
    if s > cfg.tau_high:
        return 1.0
    if s >= cfg.tau_low:
        return base
    return 0.0


def cumulative_variation(history: Sequence[Tensor], current: Tensor) -> float:
    cur = current.data.astype(np.float64)
    total = 0.0
    for past in history:
        total += float(np.abs(cur - past.data.astype(np.float64)).sum())
    return total


def adapt_prune_rate(v: float, cfg: ThresholdConfig) -> float:
    if v < cfg.v_low:
        return min(1.0, cfg.p_base * cfg.prune_adjust)
    if v > cfg.v_high:
        return cfg.p_base / cfg.prune_adjust
    return cfg.p_base


def prune_draw(seed: int, t: int, layer: int) -> float:
    """Counter-based deterministic uniform draw keyed by (seed, t, layer)."""
    return float(np.random.default_rng(np.random.SeedSequence((seed, t, layer))).random())


# ---------------------------------------------------------------------------
# Decision / trace records


@dataclass
class CacheEntry:
    tensor: Tensor
    step: int
    tau: int


@dataclass
class FeatureCache:
    entries: Dict[int, CacheEntry] = field(default_factory=dict)

    def live(self, layer: int, t: int) -> bool:
        e = self.entries.get(layer)
        return e is not None and (e.step - t) < e.tau

    def expired_from_max(self, layer: int, t: int, tau_max: int) -> bool:
        e = self.entries.get(layer)
        return e is not None and not self.live(layer, t) and e.tau == tau_max

    def store(self, layer: int, tensor: Tensor, t: int, tau: int):
        self.entries[layer] = CacheEntry(tensor, t, tau)


@dataclass
class ScheduleDecision:
    t: int
    actions: List[str]  # per layer: "recompute" | "reuse" | "prune"
    abits: int  # activation billing width for the step
    divergences: List[Optional[float]]
    similarities: List[Optional[float]]
    v: float
    forced_bitmax: bool = False


@dataclass
class TraceRecord:
    t: int
    layer: object  # block index or "head"
    action: str
    d: Optional[float]
    s: Optional[float]
    bits: int
    wbits: int
    macs: int
    v: Optional[float] = None

    def to_json_obj(self):
        return {
            "t": self.t,
            "layer": self.layer,
            "action": self.action,
            "D": self.d,
            "S": self.s,
            "bits": self.bits,
            "wbits": self.wbits,
            "macs": self.macs,
            "V": self.v,
        }


@dataclass
class Toggles:
    hlc: bool = False
    aigq_weights: bool = False
    aigq_acts: bool = False
    srap: bool = False

    def any(self) -> bool:
        return self.hlc or self.aigq_weights or self.aigq_acts or self.srap


@dataclass
class BlockCost:
    """Static MAC decomposition of one transformer block."""

    quantizable: int  # weight-bearing GEMMs, billed at operand bit-widths
    fp_always: int  # attention score/value products and modulation, always FP


def billed_macs(cost: BlockCost, wbits: int, abits: int) -> int:
    """Bit-weighted MAC units; an FP32xFP32 MAC costs 32*32 = 1024 units."""
    return cost.quantizable * wbits * abits + cost.fp_always * FP_BITS * FP_BITS


# ---------------------------------------------------------------------------


class Scheduler:
    """Per-run decision engine. Single writer; one instance per generation."""

    def __init__(
        self,
        num_layers: int,
        total_steps: int,
        cfg: ThresholdConfig,
        toggles: Toggles,
        block_cost: BlockCost,
        head_macs: int,
        prune_seed: int = 0,
        weight_bits: Optional[Dict[int, int]] = None,
    ):
        cfg.validate()
        self.num_layers = num_layers
        self.total_steps = total_steps
        self.cfg = cfg
        self.toggles = toggles
        self.block_cost = block_cost
        self.head_macs = head_macs
        self.prune_seed = prune_seed
        self.weight_bits = weight_bits or {}
        self.cache = FeatureCache()
        self.prev_features: Dict[int, Tensor] = {}
        self.last_divergences: Dict[int, float] = {}
        self.latent_history: List[Tensor] = []
        self.trace: List[TraceRecord] = []
        self.quant_runtime = None  # optional QuantRuntime attached by the harness
        self._steps_seen = 0

    def gemm_policy(self, decision: "ScheduleDecision"):
        if self.quant_runtime is None:
            return None
        return self.quant_runtime.gemm_fn(decision.abits)

    # -- planning ----------------------------------------------------------

    def _boundary(self, t: int) -> bool:
        return self._steps_seen == 0 or t == 0

    def plan_step(self, t: int, x_t: Tensor) -> ScheduleDecision:
        boundary = self._boundary(t)
        actions = []
        post_long_skip = False
        for l in range(self.num_layers):
            if self.toggles.hlc and not boundary and self.cache.live(l, t):
                actions.append("reuse")
            else:
                if self.toggles.hlc and self.cache.expired_from_max(l, t, self.cfg.tau_max):
                    post_long_skip = True
                actions.append("recompute")

        v = cumulative_variation(self.latent_history, x_t)

        sims: List[Optional[float]] = [None] * self.num_layers
        if self.toggles.srap and not boundary:
            p_eff = adapt_prune_rate(v, self.cfg)
            for l in range(1, self.num_layers):
                if actions[l] != "recompute":
                    continue
                below = self.prev_features.get(l - 1)
                here = self.prev_features.get(l)
                if below is None or here is None:
                    continue
                s = layer_similarity(below, here)
                sims[l] = s
                p = prune_probability(s, self.cfg, p_base=p_eff)
                if p >= 1.0 or prune_draw(self.prune_seed, t, l) < p:
                    actions[l] = "prune"

        forced = False
        if not self.toggles.aigq_acts:
            abits = FP_BITS
        elif boundary or not self.last_divergences:
            abits = self.cfg.bit_max
        elif post_long_skip:
            abits = self.cfg.bit_max
            forced = True
        else:
            r = redundancy_metric(list(self.last_divergences.values()))
            abits = activation_bits(r, self.cfg)

        self._steps_seen += 1
        return ScheduleDecision(
            t, actions, abits, [None] * self.num_layers, sims, v, forced
        )

    # -- execution observations -------------------------------------------

    def observe_block(self, t: int, layer: int, out: Tensor, decision: ScheduleDecision):
        """Record a block's realized output and refresh scheduler state."""
        action = decision.actions[layer]
        prev = self.prev_features.get(layer)
        if action == "recompute":
            entry = self.cache.entries.get(layer)
            if entry is not None:
                ref, k = entry.tensor, max(1, entry.step - t)
            elif prev is not None:
                ref, k = prev, 1
            else:
                ref = None
            if ref is not None and prev is not None:
                d = divergence_score(out, ref, k, out, prev)
                self.last_divergences[layer] = d
                tau = refresh_interval(d, self.cfg)
                decision.divergences[layer] = d
            else:
                tau = 1  # no history yet; force an early refresh
            if t > 0:
                self.cache.store(layer, out, t, tau)
        self.prev_features[layer] = out

    def finalize_step(self, t: int, x_t: Tensor, decision: ScheduleDecision):
        """Push latent history and append this step's trace records."""
        self.latent_history.append(x_t)
        if len(self.latent_history) > self.cfg.history_k:
            self.latent_history.pop(0)
        for l in range(self.num_layers):
            action = decision.actions[l]
            wbits = self.weight_bits.get(l, FP_BITS) if self.toggles.aigq_weights else FP_BITS
            macs = billed_macs(self.block_cost, wbits, decision.abits) if action == "recompute" else 0
            self.trace.append(
                TraceRecord(
                    t, l, action, decision.divergences[l], decision.similarities[l],
                    decision.abits, wbits, macs, decision.v,
                )
            )
        self.trace.append(
            TraceRecord(t, "head", "recompute", None, None, FP_BITS, FP_BITS,
                        self.head_macs * FP_BITS * FP_BITS)
        )

    # -- accounting --------------------------------------------------------

    def executed_macs(self) -> int:
        return sum(r.macs for r in self.trace)

    def baseline_macs(self) -> int:
        per_block = billed_macs(self.block_cost, FP_BITS, FP_BITS)
        return self.total_steps * (
            self.num_layers * per_block + self.head_macs * FP_BITS * FP_BITS
        )
