"""DDPM forward noising and the reverse denoising loop.

The reverse loop drives the model for exactly T steps (t = T-1 .. 0): the
standard DDPM posterior update for t >= 1, and a deterministic clean-data
prediction at t = 0. Injected noise comes from a dedicated seeded stream so a
run is reproducible end to end.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .model import DiTModel, LayerHooks, predict_noise
from .tensor import Tensor


@dataclass
class NoiseSchedule:
    alpha_bar: np.ndarray  # cumulative products, index 0 = least noisy

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size == 0:
            raise ConfigurationError("alpha_bar must be a nonempty vector")
        if not (np.all(ab > 0) and np.all(ab <= 1)):
            raise ConfigurationError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ConfigurationError("alpha_bar must be strictly decreasing")
        self.alpha_bar = ab

    @property
    def steps(self) -> int:
        return len(self.alpha_bar)


def linear_beta_schedule(steps: int, beta_start: float = 1e-4,
                         beta_end: float = 2e-2) -> NoiseSchedule:
    if steps < 1:
        raise ConfigurationError("schedule needs at least one step")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return NoiseSchedule(np.cumprod(1.0 - betas))


def forward_noise(x0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not 0 <= t < sched.steps:
        raise ValueError(f"timestep {t} out of range")
    if x0.shape != eps.shape:
        raise DimensionError("x0 and eps must share a shape")
    ab = sched.alpha_bar[t]
    out = np.sqrt(ab) * x0.data.astype(np.float64) + np.sqrt(1.0 - ab) * eps.data.astype(np.float64)
    return Tensor(out.astype(np.float32), frame_axis=x0.frame_axis)


def reverse_step(x_t: Tensor, t: int, eps_hat: Tensor, sched: NoiseSchedule,
                 noise: Tensor) -> Tensor:
    """One DDPM posterior step with fixed variance beta-tilde.

    Noise is injected for t > 1 and suppressed at t = 1 (the final stochastic
    step); t = 0 is handled by the caller's clean-data prediction.
    """
    if not 1 <= t < sched.steps:
        raise ValueError(f"reverse step timestep {t} out of range")
    if x_t.shape != eps_hat.shape or x_t.shape != noise.shape:
        raise DimensionError("reverse step operands must share a shape")
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    alpha_t = ab_t / ab_prev
    beta_t = 1.0 - alpha_t
    mean = (x_t.data.astype(np.float64)
            - beta_t / np.sqrt(1.0 - ab_t) * eps_hat.data.astype(np.float64)
            ) / np.sqrt(alpha_t)
    if t > 1:
        var = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t
        mean = mean + np.sqrt(var) * noise.data.astype(np.float64)
    return Tensor(mean.astype(np.float32), frame_axis=x_t.frame_axis)


def final_step(x0_noisy: Tensor, eps_hat: Tensor, sched: NoiseSchedule) -> Tensor:
    """Deterministic t = 0 update: recover the clean-data estimate."""
    ab0 = sched.alpha_bar[0]
    out = (x0_noisy.data.astype(np.float64)
           - np.sqrt(1.0 - ab0) * eps_hat.data.astype(np.float64)) / np.sqrt(ab0)
    return Tensor(out.astype(np.float32), frame_axis=x0_noisy.frame_axis)


def generate(
    model: DiTModel,
    sched: NoiseSchedule,
    scheduler=None,
    seed: int = 0,
    collect_features: Optional[List] = None,
    extra_hooks: Optional[LayerHooks] = None,
):
    """Run the full reverse trajectory.

    With a scheduler, per-step plans are applied through the model hooks
    (cache reuse, layer bypass, quantized GEMMs); without one, the plain
    full-precision model runs. Returns the final latent. When
    ``collect_features`` is a list, per-step per-layer block outputs and the
    per-step latents are appended to it as (t, x_t, [block outputs]).
    """
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    shape = (cfg.frames, cfg.tokens_per_frame, cfg.model_dim)
    x = Tensor(rng.standard_normal(shape).astype(np.float32), frame_axis=0)
    cond = Tensor(rng.standard_normal(cfg.cond_dim).astype(np.float32))
    steps = sched.steps

    for t in range(steps - 1, -1, -1):
        if scheduler is not None:
            decision = scheduler.plan_step(t, x)
            hooks = _scheduled_hooks(scheduler, decision)
        else:
            decision, hooks = None, extra_hooks
        step_outputs = [] if collect_features is not None else None
        if step_outputs is not None:
            tap = LayerHooks(after_block=lambda l, out: step_outputs.append(out))
            hooks = _merge_after(hooks, tap) if hooks else tap
        eps_hat = predict_noise(x, t, cond, model, hooks, total_steps=steps)
        if scheduler is not None:
            scheduler.finalize_step(t, x, decision)
        if collect_features is not None:
            collect_features.append((t, x, step_outputs))
        if t > 0:
            noise = Tensor(rng.standard_normal(shape).astype(np.float32), frame_axis=0)
            x = reverse_step(x, t, eps_hat, sched, noise)
        else:
            x = final_step(x, eps_hat, sched)
    return x


def _merge_after(base: LayerHooks, tap: LayerHooks) -> LayerHooks:
    base_after = base.after_block
    tap_after = tap.after_block

    def after(l, out):
        if base_after:
            base_after(l, out)
        tap_after(l, out)

    return LayerHooks(before_block=base.before_block, after_block=after, gemm=base.gemm)


def _scheduled_hooks(scheduler, decision) -> LayerHooks:
    def before(l, x):
        action = decision.actions[l]
        if action == "reuse":
            return scheduler.cache.entries[l].tensor
        if action == "prune":
            return x  # identity bypass
        return None

    def after(l, out):
        scheduler.observe_block(decision.t, l, out, decision)

    return LayerHooks(before_block=before, after_block=after,
                      gemm=scheduler.gemm_policy(decision))
