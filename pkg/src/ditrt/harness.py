"""Run configuration, calibration, benchmark orchestration, and trace IO."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, TraceFormatError
from .model import (
    DiTConfig,
    DiTModel,
    LayerHooks,
    QUANT_SITES,
    block_mac_cost,
    head_mac_cost,
    init_model,
)
from .quant import WeightBitPlan, allocate_weight_bits, compute_minmax_params, dequantize, quantize
from .runtime import QuantRuntime
from .sampler import NoiseSchedule, generate, linear_beta_schedule
from .schedule import (
    FP_BITS,
    Scheduler,
    ThresholdConfig,
    Toggles,
    TraceRecord,
    billed_macs,
    cumulative_variation,
    divergence_score,
)
from .tensor import Tensor, mm

OUTPUT_DIR_ENV = "DITRT_OUT"

_SEED_DEFAULTS = {"model": 0, "sampling": 0, "prune": 0}
_MODEL_DEFAULTS = {
    "num_blocks": 8, "model_dim": 64, "num_heads": 4,
    "tokens_per_frame": 16, "frames": 4, "cond_dim": 32,
}
_SCHEDULE_DEFAULTS = {"steps": 50, "beta_start": 1e-4, "beta_end": 2e-2}
_TOGGLE_DEFAULTS = {"hlc": False, "aigq_weights": False, "aigq_acts": False, "srap": False}
_THRESHOLD_DEFAULTS = {
    "delta1": None, "delta2": None,
    "tau_max": 6, "tau_mid": 3, "tau_min": 1,
    "theta1": 0.4, "theta2": 0.8,
    "bit_max": 8, "bit_mid": 6, "bit_min": 4,
    "tau_high": 0.98, "tau_low": 0.5,
    "p_base": 0.3,
    "v_low": None, "v_high": None,
    "history_k": 4, "prune_adjust": 2.0,
}
_ALLOWED_BITS = (4, 6, 8)


def _merge_section(name: str, defaults: dict, given: dict) -> dict:
    for key in given:
        if key not in defaults:
            raise ConfigurationError(f"{name}.{key}: unknown key")
    merged = dict(defaults)
    merged.update(given)
    return merged


@dataclass
class RunConfig:
    seeds: Dict[str, int] = field(default_factory=lambda: dict(_SEED_DEFAULTS))
    model: Dict[str, int] = field(default_factory=lambda: dict(_MODEL_DEFAULTS))
    schedule: Dict[str, float] = field(default_factory=lambda: dict(_SCHEDULE_DEFAULTS))
    thresholds: Dict[str, object] = field(default_factory=lambda: dict(_THRESHOLD_DEFAULTS))
    toggles: Dict[str, bool] = field(default_factory=lambda: dict(_TOGGLE_DEFAULTS))
    weight_bits: object = "auto"  # "auto" or {layer: bits}
    bit_budget: Optional[int] = None
    calibration: Optional[str] = None
    output_dir: Optional[str] = None

    def model_config(self) -> DiTConfig:
        return DiTConfig(seed=self.seeds["model"], **self.model)

    def noise_schedule(self) -> NoiseSchedule:
        return linear_beta_schedule(
            int(self.schedule["steps"]),
            float(self.schedule["beta_start"]),
            float(self.schedule["beta_end"]),
        )

    def toggles_obj(self) -> Toggles:
        return Toggles(**self.toggles)

    def effective_bit_budget(self) -> int:
        if self.bit_budget is not None:
            return int(self.bit_budget)
        return 6 * int(self.model["num_blocks"])

    def to_json_obj(self) -> dict:
        return {
            "seeds": dict(self.seeds),
            "model": dict(self.model),
            "schedule": dict(self.schedule),
            "thresholds": dict(self.thresholds),
            "toggles": dict(self.toggles),
            "weight_bits": self.weight_bits if isinstance(self.weight_bits, str)
            else {str(k): v for k, v in self.weight_bits.items()},
            "bit_budget": self.bit_budget,
            "calibration": self.calibration,
            "output_dir": self.output_dir,
        }


def parse_config(obj: dict) -> RunConfig:
    """Validate a raw JSON object, apply defaults, reject unknown keys."""
    if not isinstance(obj, dict):
        raise ConfigurationError("config root must be an object")
    obj = dict(obj)
    shared_seed = obj.pop("seed", None)
    known = {"seeds", "model", "schedule", "thresholds", "toggles",
             "weight_bits", "bit_budget", "calibration", "output_dir"}
    for key in obj:
        if key not in known:
            raise ConfigurationError(f"{key}: unknown key")

    seeds = _merge_section("seeds", _SEED_DEFAULTS, obj.get("seeds", {}))
    if shared_seed is not None:
        seeds = {k: int(shared_seed) for k in _SEED_DEFAULTS}
    model = _merge_section("model", _MODEL_DEFAULTS, obj.get("model", {}))
    schedule = _merge_section("schedule", _SCHEDULE_DEFAULTS, obj.get("schedule", {}))
    thresholds = _merge_section("thresholds", _THRESHOLD_DEFAULTS, obj.get("thresholds", {}))
    toggles = _merge_section("toggles", _TOGGLE_DEFAULTS, obj.get("toggles", {}))

    cfg = RunConfig(
        seeds=seeds, model=model, schedule=schedule, thresholds=thresholds,
        toggles=toggles,
        weight_bits=obj.get("weight_bits", "auto"),
        bit_budget=obj.get("bit_budget"),
        calibration=obj.get("calibration"),
        output_dir=obj.get("output_dir"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    try:
        cfg.model_config()
    except (ConfigurationError, TypeError) as exc:
        raise ConfigurationError(f"model: {exc}") from exc
    if int(cfg.schedule["steps"]) < 2:
        raise ConfigurationError("schedule.steps: need at least 2 steps")
    if not 0 < float(cfg.schedule["beta_start"]) <= float(cfg.schedule["beta_end"]) < 1:
        raise ConfigurationError("schedule.beta_start/beta_end: need 0 < start <= end < 1")

    th = cfg.thresholds
    if th["delta1"] is not None and th["delta2"] is not None and th["delta1"] > th["delta2"]:
        raise ConfigurationError("thresholds.delta1/delta2: delta1 must be <= delta2")
    if th["v_low"] is not None and th["v_high"] is not None and th["v_low"] > th["v_high"]:
        raise ConfigurationError("thresholds.v_low/v_high: v_low must be <= v_high")
    _resolved_thresholds(th, 0.0, 1.0, 0.0, 1.0)  # validates the numeric fields

    for name, val in cfg.toggles.items():
        if not isinstance(val, bool):
            raise ConfigurationError(f"toggles.{name}: must be a boolean")

    num_blocks = int(cfg.model["num_blocks"])
    if cfg.weight_bits != "auto":
        if not isinstance(cfg.weight_bits, dict):
            raise ConfigurationError("weight_bits: must be \"auto\" or a layer->bits map")
        plan = {}
        for key, bits in cfg.weight_bits.items():
            layer = int(key)
            if not 0 <= layer < num_blocks:
                raise ConfigurationError(f"weight_bits.{key}: layer out of range")
            if bits not in _ALLOWED_BITS:
                raise ConfigurationError(f"weight_bits.{key}: bits must be one of {_ALLOWED_BITS}")
            plan[layer] = bits
        if sorted(plan) != list(range(num_blocks)):
            raise ConfigurationError("weight_bits: must cover every layer exactly once")
        cfg.weight_bits = plan
    if cfg.effective_bit_budget() < 4 * num_blocks:
        raise ConfigurationError("bit_budget: below the 4-bit floor for all layers")
    if cfg.weight_bits == "auto" and cfg.toggles["aigq_weights"] and cfg.calibration is None:
        raise ConfigurationError("weight_bits: \"auto\" requires a calibration section")


def _resolved_thresholds(th: dict, d1: float, d2: float, vl: float, vh: float) -> ThresholdConfig:
    return ThresholdConfig(
        delta1=th["delta1"] if th["delta1"] is not None else d1,
        delta2=th["delta2"] if th["delta2"] is not None else d2,
        tau_max=int(th["tau_max"]), tau_mid=int(th["tau_mid"]), tau_min=int(th["tau_min"]),
        theta1=float(th["theta1"]), theta2=float(th["theta2"]),
        bit_max=int(th["bit_max"]), bit_mid=int(th["bit_mid"]), bit_min=int(th["bit_min"]),
        tau_high=float(th["tau_high"]), tau_low=float(th["tau_low"]),
        p_base=float(th["p_base"]),
        v_low=th["v_low"] if th["v_low"] is not None else vl,
        v_high=th["v_high"] if th["v_high"] is not None else vh,
        history_k=int(th["history_k"]), prune_adjust=float(th["prune_adjust"]),
    ).validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config parse error: {exc}") from exc
    return parse_config(obj)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_json_obj(), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Calibration


@dataclass
class CalibrationData:
    act_absmax: Dict[int, Dict[str, np.ndarray]]
    delta_p33: float
    delta_p66: float
    v_p25: float
    v_p75: float
    sensitivities: Dict[int, float]
    meta: dict = field(default_factory=dict)

    def to_json_obj(self) -> dict:
        return {
            "act_absmax": {
                str(l): {s: [float(v) for v in arr] for s, arr in sorted(sites.items())}
                for l, sites in sorted(self.act_absmax.items())
            },
            "delta_percentiles": {"p33": self.delta_p33, "p66": self.delta_p66},
            "variation_percentiles": {"p25": self.v_p25, "p75": self.v_p75},
            "sensitivities": {str(l): float(v) for l, v in sorted(self.sensitivities.items())},
            "meta": self.meta,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CalibrationData":
        return cls(
            act_absmax={
                int(l): {s: np.asarray(v, dtype=np.float64) for s, v in sites.items()}
                for l, sites in obj["act_absmax"].items()
            },
            delta_p33=obj["delta_percentiles"]["p33"],
            delta_p66=obj["delta_percentiles"]["p66"],
            v_p25=obj["variation_percentiles"]["p25"],
            v_p75=obj["variation_percentiles"]["p75"],
            sensitivities={int(l): v for l, v in obj["sensitivities"].items()},
            meta=obj.get("meta", {}),
        )


def save_calibration(data: CalibrationData, path):
    with open(path, "w") as fh:
        json.dump(data.to_json_obj(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_calibration(path) -> CalibrationData:
    with open(path) as fh:
        return CalibrationData.from_json_obj(json.load(fh))


def measure_sensitivity(
    model: DiTModel,
    sched: NoiseSchedule,
    layer_id: int,
    sampling_seed: int,
    baseline_out: Tensor,
    bits: int = 4,
) -> float:
    """MSE of the final output when only one layer's weights are quantized."""
    if not 0 <= layer_id < model.cfg.num_blocks:
        raise ConfigurationError(f"unknown layer id {layer_id}")
    deq_weights = {}
    blk = model.blocks[layer_id]
    for site in QUANT_SITES:
        w = getattr(blk, site)
        params = compute_minmax_params(Tensor(w), bits, granularity="per-channel", axis=1)
        deq_weights[site] = dequantize(quantize(Tensor(w), params)).data

    def gemm(l, site, x, w):
        return mm(x, deq_weights[site] if l == layer_id else w)

    out = generate(model, sched, seed=sampling_seed, extra_hooks=LayerHooks(gemm=gemm))
    diff = out.data.astype(np.float64) - baseline_out.data.astype(np.float64)
    return float(np.mean(diff ** 2))


def calibrate(cfg: RunConfig, out_path: Optional[str] = None) -> CalibrationData:
    """One seeded full-precision run: activation channel stats, divergence and
    variation percentiles, and per-layer quantization sensitivities."""
    model = init_model(cfg.model_config())
    sched = cfg.noise_schedule()
    sampling_seed = cfg.seeds["sampling"]

    act_absmax: Dict[int, Dict[str, np.ndarray]] = {}

    def rec_gemm(l, site, x, w):
        absmax = np.abs(x).max(axis=0).astype(np.float64)
        sites = act_absmax.setdefault(l, {})
        sites[site] = absmax if site not in sites else np.maximum(sites[site], absmax)
        return mm(x, w)

    feats: List[tuple] = []
    baseline_out = generate(
        model, sched, seed=sampling_seed,
        collect_features=feats, extra_hooks=LayerHooks(gemm=rec_gemm),
    )

    divergences = []
    for i in range(1, len(feats)):
        _, _, prev_outs = feats[i - 1]
        _, _, cur_outs = feats[i]
        for l in range(model.cfg.num_blocks):
            divergences.append(
                divergence_score(cur_outs[l], prev_outs[l], 1, cur_outs[l], prev_outs[l])
            )
    variations = []
    history_k = int(cfg.thresholds["history_k"])
    latents = [x for (_, x, _) in feats]
    for i in range(1, len(latents)):
        window = latents[max(0, i - history_k):i]
        variations.append(cumulative_variation(window, latents[i]))

    sensitivities = {
        l: measure_sensitivity(model, sched, l, sampling_seed, baseline_out,
                               bits=int(cfg.thresholds["bit_min"]))
        for l in range(model.cfg.num_blocks)
    }

    data = CalibrationData(
        act_absmax=act_absmax,
        delta_p33=float(np.percentile(divergences, 33)),
        delta_p66=float(np.percentile(divergences, 66)),
        v_p25=float(np.percentile(variations, 25)),
        v_p75=float(np.percentile(variations, 75)),
        sensitivities=sensitivities,
        meta={"model_seed": cfg.seeds["model"], "sampling_seed": sampling_seed,
              "steps": int(cfg.schedule["steps"])},
    )
    if out_path is not None:
        save_calibration(data, out_path)
    return data


# ---------------------------------------------------------------------------
# Benchmark runs


@dataclass
class RunMetrics:
    executed_macs: int
    baseline_macs: int
    speedup_mac: float
    wall_time_ms: float
    speedup_wall: float
    mse_vs_baseline: float
    psnr_vs_baseline: float


@dataclass
class RunResult:
    output: Tensor
    scheduler: Scheduler
    wall_time_ms: float


def compare_outputs(a: Tensor, b: Tensor) -> Tuple[float, float]:
    """(MSE, PSNR dB) of b against baseline a; exact match reports 99 dB."""
    if a.shape != b.shape:
        raise ConfigurationError(f"compare shapes {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff ** 2))
    if mse == 0.0:
        return 0.0, 99.0
    peak = float(np.abs(a.data).max())
    psnr = 10.0 * np.log10(peak ** 2 / mse) if peak > 0 else 0.0
    return mse, min(99.0, float(psnr))


def resolve_thresholds(cfg: RunConfig, calib: Optional[CalibrationData],
                       toggles: Toggles) -> ThresholdConfig:
    th = cfg.thresholds
    need_delta = toggles.hlc and th["delta1"] is None
    need_v = toggles.srap and th["v_low"] is None
    if (need_delta or need_v) and calib is None:
        raise ConfigurationError(
            "thresholds: delta/variation thresholds are unset and no calibration is available"
        )
    d1 = calib.delta_p33 if calib else 0.0
    d2 = calib.delta_p66 if calib else 0.0
    vl = calib.v_p25 if calib else 0.0
    vh = calib.v_p75 if calib else 0.0
    return _resolved_thresholds(th, d1, d2, vl, vh)


def resolve_weight_bits(cfg: RunConfig, calib: Optional[CalibrationData]) -> Dict[int, int]:
    if isinstance(cfg.weight_bits, dict):
        plan = WeightBitPlan(dict(cfg.weight_bits), cfg.effective_bit_budget())
        return plan.bits_per_layer
    if calib is None:
        raise ConfigurationError("weight_bits: \"auto\" requires calibration data")
    plan = allocate_weight_bits(calib.sensitivities, cfg.effective_bit_budget())
    return plan.bits_per_layer


def run_single(cfg: RunConfig, toggles: Toggles,
               calib: Optional[CalibrationData] = None) -> RunResult:
    model = init_model(cfg.model_config())
    sched = cfg.noise_schedule()
    thr = resolve_thresholds(cfg, calib, toggles)
    weight_bits = (resolve_weight_bits(cfg, calib) if toggles.aigq_weights else {})
    scheduler = Scheduler(
        num_layers=model.cfg.num_blocks,
        total_steps=sched.steps,
        cfg=thr,
        toggles=toggles,
        block_cost=block_mac_cost(model.cfg),
        head_macs=head_mac_cost(model.cfg),
        prune_seed=cfg.seeds["prune"],
        weight_bits=weight_bits,
    )
    if toggles.aigq_weights or toggles.aigq_acts:
        scheduler.quant_runtime = QuantRuntime(
            model, toggles, weight_bits,
            site_act_absmax=calib.act_absmax if (calib and toggles.aigq_weights) else None,
            sign_seed=cfg.seeds["model"],
        )
    start = time.perf_counter()
    out = generate(model, sched, scheduler=scheduler, seed=cfg.seeds["sampling"])
    wall_ms = (time.perf_counter() - start) * 1000.0
    return RunResult(out, scheduler, wall_ms)


def run_benchmark(cfg: RunConfig, run_id: str = "run",
                  calib: Optional[CalibrationData] = None,
                  write: bool = False):
    """Baseline run plus the configured run with identical seeds.

    Returns (RunMetrics, trace records, baseline output, configured output).
    """
    toggles = cfg.toggles_obj()
    if calib is None and cfg.calibration is not None:
        calib = load_calibration(cfg.calibration)
    base = run_single(cfg, Toggles())
    conf = run_single(cfg, toggles, calib) if toggles.any() else base

    executed = conf.scheduler.executed_macs()
    baseline = conf.scheduler.baseline_macs()
    mse, psnr = compare_outputs(base.output, conf.output)
    metrics = RunMetrics(
        executed_macs=executed,
        baseline_macs=baseline,
        speedup_mac=baseline / executed,
        wall_time_ms=conf.wall_time_ms,
        speedup_wall=base.wall_time_ms / conf.wall_time_ms,
        mse_vs_baseline=mse,
        psnr_vs_baseline=psnr,
    )
    if write:
        out_dir = output_dir(cfg)
        os.makedirs(out_dir, exist_ok=True)
        export_trace(conf.scheduler.trace, os.path.join(out_dir, f"{run_id}.trace.jsonl"))
        np.save(os.path.join(out_dir, f"{run_id}.out.npy"), conf.output.data)
        np.save(os.path.join(out_dir, f"{run_id}.baseline.npy"), base.output.data)
        write_metrics_csv(os.path.join(out_dir, f"{run_id}.metrics.csv"),
                          [(run_id, toggles, metrics)])
    return metrics, conf.scheduler.trace, base.output, conf.output


def output_dir(cfg: RunConfig) -> str:
    return os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir or "ditrt_out"


def toggles_label(t: Toggles) -> str:
    parts = [name for name, on in
             (("hlc", t.hlc), ("aigq_w", t.aigq_weights),
              ("aigq_a", t.aigq_acts), ("srap", t.srap)) if on]
    return "+".join(parts) if parts else "none"


METRICS_COLUMNS = ("run_id", "toggles", "speedup_mac", "speedup_wall",
                   "mse", "psnr", "executed_macs", "baseline_macs")


def write_metrics_csv(path, rows):
    """rows: iterable of (run_id, Toggles, RunMetrics)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for run_id, toggles, m in rows:
            writer.writerow([
                run_id, toggles_label(toggles),
                repr(m.speedup_mac), repr(m.speedup_wall),
                repr(m.mse_vs_baseline), repr(m.psnr_vs_baseline),
                m.executed_macs, m.baseline_macs,
            ])


# ---------------------------------------------------------------------------
# Trace IO


_ACTIONS = {"recompute", "reuse", "prune"}


def export_trace(trace: List[TraceRecord], path):
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec.to_json_obj()) + "\n")


def import_trace(path) -> List[TraceRecord]:
    records: List[TraceRecord] = []
    last_t = None
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(i, f"invalid JSON: {exc}") from exc
            missing = {"t", "layer", "action", "D", "S", "bits", "wbits", "macs"} - set(obj)
            if missing:
                raise TraceFormatError(i, f"missing fields {sorted(missing)}")
            if obj["action"] not in _ACTIONS:
                raise TraceFormatError(i, f"unknown action {obj['action']!r}")
            if not isinstance(obj["macs"], int) or obj["macs"] < 0:
                raise TraceFormatError(i, "macs must be a nonnegative integer")
            if not isinstance(obj["t"], int) or obj["t"] < 0:
                raise TraceFormatError(i, "t must be a nonnegative integer")
            if last_t is not None and obj["t"] > last_t:
                raise TraceFormatError(i, "timesteps must be non-increasing")
            last_t = obj["t"]
            records.append(TraceRecord(
                t=obj["t"], layer=obj["layer"], action=obj["action"],
                d=obj["D"], s=obj["S"], bits=obj["bits"], wbits=obj["wbits"],
                macs=obj["macs"], v=obj.get("V"),
            ))
    return records


def replay_check(trace: List[TraceRecord], cfg: Optional[RunConfig] = None) -> dict:
    """Structural and, when a config is supplied, policy-consistency checks."""
    executed = sum(r.macs for r in trace)
    if cfg is not None:
        thr = cfg.thresholds
        cost = block_mac_cost(cfg.model_config())
        head = head_mac_cost(cfg.model_config())
        for i, r in enumerate(trace, start=1):
            if r.layer == "head":
                if r.macs != head * FP_BITS * FP_BITS:
                    raise TraceFormatError(i, "head MAC count mismatch")
                continue
            expect = billed_macs(cost, r.wbits, r.bits) if r.action == "recompute" else 0
            if r.macs != expect:
                raise TraceFormatError(i, f"MAC count {r.macs} != expected {expect}")
            if r.s is not None:
                if r.s > thr["tau_high"] and r.action != "prune":
                    raise TraceFormatError(i, "similarity above tau_high but not pruned")
                if r.s < thr["tau_low"] and r.action == "prune":
                    raise TraceFormatError(i, "similarity below tau_low but pruned")
    return {"records": len(trace), "executed_macs": executed}
