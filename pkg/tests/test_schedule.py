import numpy as np
import pytest

from ditrt.errors import ConfigurationError, DimensionError
from ditrt.schedule import (
    FP_BITS,
    BlockCost,
    FeatureCache,
    Scheduler,
    ThresholdConfig,
    Toggles,
    activation_bits,
    adapt_prune_rate,
    billed_macs,
    cumulative_variation,
    divergence_score,
    layer_similarity,
    prune_draw,
    prune_probability,
    redundancy_metric,
    refresh_interval,
)
from ditrt.tensor import Tensor


def make_cfg(**kw):
    base = dict(delta1=1.0, delta2=2.0, v_low=10.0, v_high=20.0)
    base.update(kw)
    return ThresholdConfig(**base)


class TestThresholdConfig:
    def test_valid(self):
        make_cfg().validate()

    @pytest.mark.parametrize("kw,name", [
        (dict(delta1=3.0, delta2=2.0), "delta1/delta2"),
        (dict(theta1=0.9, theta2=0.4), "theta1/theta2"),
        (dict(tau_low=0.99, tau_high=0.5), "tau_low/tau_high"),
        (dict(v_low=30.0, v_high=20.0), "v_low/v_high"),
        (dict(tau_min=5, tau_mid=3), "tau_min/tau_mid/tau_max"),
        (dict(bit_min=8, bit_mid=6), "bit_min/bit_mid/bit_max"),
        (dict(tau_min=0, tau_mid=0, tau_max=0), "tau_min"),
        (dict(p_base=1.5), "p_base"),
        (dict(prune_adjust=0.5), "prune_adjust"),
        (dict(history_k=0), "history_k"),
    ])
    def test_invariants_named(self, kw, name):
        with pytest.raises(ConfigurationError, match=name):
            make_cfg(**kw).validate()


class TestDivergence:
    def test_hand_value(self):
        p_now = Tensor(np.array([1.0, 2.0, 3.0]))
        p_cached = Tensor(np.array([0.0, 1.0, 2.0]))  # L1 drift 3
        m_now = Tensor(np.array([0.5, 0.0]))
        m_prev = Tensor(np.array([0.0, 0.0]))  # grad norm 0.5
        assert divergence_score(p_now, p_cached, 2, m_now, m_prev) == pytest.approx(0.75)

    def test_zero_when_static(self):
        p = Tensor(np.ones(4))
        assert divergence_score(p, p, 1, p, p) == 0.0

    def test_validation(self):
        with pytest.raises(DimensionError):
            divergence_score(Tensor(np.ones(3)), Tensor(np.ones(4)), 1,
                             Tensor(np.ones(2)), Tensor(np.ones(2)))
        p = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            divergence_score(p, p, 0, p, p)


class TestPolicies:
    def test_refresh_interval_oracle(self):
        cfg = make_cfg()
        rng = np.random.default_rng(0)
        ds = np.concatenate([rng.uniform(0, 3, size=500),
                             [0.0, 1.0, 2.0, 1.0 - 1e-12, 2.0 - 1e-12]])
        for d in ds:
            if d < cfg.delta1:
                want = cfg.tau_max
            elif d < cfg.delta2:
                want = cfg.tau_mid
            else:
                want = cfg.tau_min
            assert refresh_interval(float(d), cfg) == want
        assert refresh_interval(1.0, cfg) == cfg.tau_mid
        assert refresh_interval(2.0, cfg) == cfg.tau_min

    def test_activation_bits_oracle(self):
        cfg = make_cfg()
        rng = np.random.default_rng(1)
        rs = np.concatenate([rng.uniform(0, 1, size=500), [0.4, 0.8, 1.0, 0.0]])
        for r in rs:
            if r >= cfg.theta2:
                want = cfg.bit_min
            elif r >= cfg.theta1:
                want = cfg.bit_mid
            else:
                want = cfg.bit_max
            assert activation_bits(float(r), cfg) == want
        assert activation_bits(0.4, cfg) == cfg.bit_mid
        assert activation_bits(0.8, cfg) == cfg.bit_min

    def test_prune_probability_oracle(self):
        cfg = make_cfg()
        rng = np.random.default_rng(2)
        ss = np.concatenate([rng.uniform(-1, 1, size=500), [0.5, 0.98, 1.0, -1.0]])
        for s in ss:
            if s > cfg.tau_high:
                want = 1.0
            elif s >= cfg.tau_low:
                want = cfg.p_base
            else:
                want = 0.0
            assert prune_probability(float(s), cfg) == want
        # boundaries: at tau_high stay at base, at tau_low enter the band
        assert prune_probability(0.98, cfg) == cfg.p_base
        assert prune_probability(0.5, cfg) == cfg.p_base

    def test_prune_probability_base_override(self):
        cfg = make_cfg()
        assert prune_probability(0.7, cfg, p_base=0.6) == 0.6
        assert prune_probability(0.99, cfg, p_base=0.6) == 1.0

    def test_adapt_prune_rate_oracle(self):
        cfg = make_cfg()
        rng = np.random.default_rng(3)
        vs = np.concatenate([rng.uniform(0, 30, size=500), [10.0, 20.0]])
        for v in vs:
            if v < cfg.v_low:
                want = min(1.0, cfg.p_base * cfg.prune_adjust)
            elif v > cfg.v_high:
                want = cfg.p_base / cfg.prune_adjust
            else:
                want = cfg.p_base
            assert adapt_prune_rate(float(v), cfg) == want
        assert adapt_prune_rate(10.0, cfg) == cfg.p_base
        assert adapt_prune_rate(20.0, cfg) == cfg.p_base

    def test_adapt_prune_rate_clamped(self):
        cfg = make_cfg(p_base=0.8, prune_adjust=2.0)
        assert adapt_prune_rate(5.0, cfg) == 1.0

    def test_redundancy_metric(self):
        assert redundancy_metric([0.0]) == 1.0
        assert redundancy_metric([1.0, 3.0]) == pytest.approx(1.0 / 3.0)
        with pytest.raises(ValueError):
            redundancy_metric([])


class TestSimilarity:
    def test_collinear(self):
        a = Tensor(np.array([1.0, 2.0]))
        b = Tensor(np.array([2.0, 4.0]))
        assert layer_similarity(a, b) == pytest.approx(1.0)

    def test_orthogonal(self):
        a = Tensor(np.array([1.0, 0.0]))
        b = Tensor(np.array([0.0, 1.0]))
        assert layer_similarity(a, b) == pytest.approx(0.0)

    def test_opposite(self):
        a = Tensor(np.array([1.0, 0.0]))
        b = Tensor(np.array([-3.0, 0.0]))
        assert layer_similarity(a, b) == pytest.approx(-1.0)

    def test_zero_vector(self):
        assert layer_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            layer_similarity(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestVariation:
    def test_hand_value(self):
        hist = [Tensor(np.zeros(4)), Tensor(np.ones(4))]
        cur = Tensor(np.full(4, 2.0))
        # |2-0|*4 + |2-1|*4
        assert cumulative_variation(hist, cur) == pytest.approx(12.0)

    def test_empty_history(self):
        assert cumulative_variation([], Tensor(np.ones(3))) == 0.0


class TestPruneDraw:
    def test_deterministic_and_keyed(self):
        a = prune_draw(0, 5, 2)
        assert a == prune_draw(0, 5, 2)
        assert 0.0 <= a < 1.0
        assert prune_draw(0, 5, 3) != a
        assert prune_draw(0, 6, 2) != a
        assert prune_draw(1, 5, 2) != a


class TestCache:
    def test_liveness_window(self):
        cache = FeatureCache()
        cache.store(0, Tensor(np.ones(2)), t=10, tau=3)
        assert cache.live(0, 9)
        assert cache.live(0, 8)
        assert not cache.live(0, 7)
        assert not cache.live(1, 9)

    def test_expired_from_max(self):
        cache = FeatureCache()
        cache.store(0, Tensor(np.ones(2)), t=10, tau=6)
        assert not cache.expired_from_max(0, 9, tau_max=6)
        assert cache.expired_from_max(0, 4, tau_max=6)
        cache.store(1, Tensor(np.ones(2)), t=10, tau=3)
        assert not cache.expired_from_max(1, 4, tau_max=6)


class TestMacAccounting:
    def test_fp_cost(self):
        cost = BlockCost(quantizable=100, fp_always=7)
        assert billed_macs(cost, FP_BITS, FP_BITS) == 107 * 1024

    def test_quantized_cost(self):
        cost = BlockCost(quantizable=100, fp_always=7)
        assert billed_macs(cost, 4, 8) == 100 * 32 + 7 * 1024


def drive(scheduler, steps, num_layers, rng):
    """Feed synthetic latents and block outputs through a scheduler."""
    shape = (4, 3)
    for t in range(steps - 1, -1, -1):
        x = Tensor(rng.standard_normal(shape).astype(np.float32))
        decision = scheduler.plan_step(t, x)
        for l in range(num_layers):
            out = Tensor(rng.standard_normal(shape).astype(np.float32))
            scheduler.observe_block(t, l, out, decision)
        scheduler.finalize_step(t, x, decision)


class TestScheduler:
    def make(self, toggles, steps=6, layers=2, **cfg_kw):
        return Scheduler(
            num_layers=layers, total_steps=steps,
            cfg=make_cfg(**cfg_kw), toggles=toggles,
            block_cost=BlockCost(quantizable=50, fp_always=5),
            head_macs=10,
        )

    def test_disabled_run_bills_baseline(self):
        sch = self.make(Toggles(), steps=6, layers=2)
        drive(sch, 6, 2, np.random.default_rng(0))
        assert sch.executed_macs() == sch.baseline_macs()
        assert all(r.action == "recompute" for r in sch.trace)

    def test_baseline_closed_form(self):
        sch = self.make(Toggles(), steps=6, layers=2)
        assert sch.baseline_macs() == 6 * (2 * 55 * 1024 + 10 * 1024)

    def test_executed_equals_trace_sum(self):
        sch = self.make(Toggles(hlc=True), steps=8, layers=3)
        drive(sch, 8, 3, np.random.default_rng(1))
        assert sch.executed_macs() == sum(r.macs for r in sch.trace)

    def test_first_and_last_step_recompute(self):
        # very low thresholds so every divergence lands in the longest interval
        sch = self.make(Toggles(hlc=True), steps=6, layers=2,
                        delta1=1e9, delta2=2e9)
        drive(sch, 6, 2, np.random.default_rng(2))
        by_step = {}
        for r in sch.trace:
            if r.layer != "head":
                by_step.setdefault(r.t, []).append(r.action)
        assert by_step[5] == ["recompute", "recompute"]
        assert by_step[0] == ["recompute", "recompute"]
        # the first cached entry carries tau = 1 (no history yet), so step 4
        # recomputes once more; after that tau_max = 6 covers the rest
        assert by_step[4] == ["recompute", "recompute"]
        for t in (3, 2, 1):
            assert by_step[t] == ["reuse", "reuse"]

    def test_reuse_respects_refresh_interval(self):
        # huge divergences force tau_min = 1: no reuse anywhere
        sch = self.make(Toggles(hlc=True), steps=6, layers=2,
                        delta1=0.0, delta2=0.0)
        drive(sch, 6, 2, np.random.default_rng(3))
        assert all(r.action == "recompute" for r in sch.trace)

    def test_reused_layers_bill_zero(self):
        sch = self.make(Toggles(hlc=True), steps=6, layers=2,
                        delta1=1e9, delta2=2e9)
        drive(sch, 6, 2, np.random.default_rng(4))
        for r in sch.trace:
            if r.action == "reuse":
                assert r.macs == 0

    def test_prune_disabled_without_srap(self):
        sch = self.make(Toggles(hlc=True), steps=8, layers=3)
        drive(sch, 8, 3, np.random.default_rng(5))
        assert not any(r.action == "prune" for r in sch.trace)

    def test_prune_determinism(self):
        def run():
            sch = self.make(Toggles(srap=True), steps=10, layers=4,
                            tau_high=0.1, tau_low=-1.0, p_base=0.5)
            drive(sch, 10, 4, np.random.default_rng(6))
            return [(r.t, r.layer, r.action) for r in sch.trace]

        first, second = run(), run()
        assert first == second
        assert any(action == "prune" for (_, _, action) in first)

    def test_prune_never_hits_first_layer(self):
        sch = self.make(Toggles(srap=True), steps=10, layers=4,
                        tau_high=-1.0, tau_low=-1.0)
        drive(sch, 10, 4, np.random.default_rng(7))
        for r in sch.trace:
            if r.layer == 0:
                assert r.action != "prune"

    def test_abits_fp_without_act_quant(self):
        sch = self.make(Toggles(hlc=True), steps=6, layers=2)
        drive(sch, 6, 2, np.random.default_rng(8))
        assert all(r.bits == FP_BITS for r in sch.trace)

    def test_abits_boundary_steps_use_max(self):
        sch = self.make(Toggles(aigq_acts=True), steps=6, layers=2)
        drive(sch, 6, 2, np.random.default_rng(9))
        first = [r for r in sch.trace if r.t == 5 and r.layer != "head"]
        last = [r for r in sch.trace if r.t == 0 and r.layer != "head"]
        assert all(r.bits == sch.cfg.bit_max for r in first)
        assert all(r.bits == sch.cfg.bit_max for r in last)

    def test_abits_follow_redundancy(self):
        # tiny divergences -> high redundancy -> minimum bits mid-run
        sch = self.make(Toggles(aigq_acts=True), steps=6, layers=2,
                        theta1=0.0, theta2=0.0)
        drive(sch, 6, 2, np.random.default_rng(10))
        # the first divergence observations land at t = 4, so adapted bits
        # start at t = 3
        mid = [r for r in sch.trace if 0 < r.t < 4 and r.layer != "head"]
        assert all(r.bits == sch.cfg.bit_min for r in mid)

    def test_head_always_billed(self):
        sch = self.make(Toggles(hlc=True), steps=6, layers=2,
                        delta1=1e9, delta2=2e9)
        drive(sch, 6, 2, np.random.default_rng(11))
        heads = [r for r in sch.trace if r.layer == "head"]
        assert len(heads) == 6
        assert all(r.macs == 10 * 1024 for r in heads)

    def test_weight_bits_reported(self):
        sch = Scheduler(
            num_layers=2, total_steps=4, cfg=make_cfg(),
            toggles=Toggles(aigq_weights=True),
            block_cost=BlockCost(quantizable=50, fp_always=5),
            head_macs=10, weight_bits={0: 4, 1: 8},
        )
        drive(sch, 4, 2, np.random.default_rng(12))
        for r in sch.trace:
            if r.layer == 0:
                assert r.wbits == 4
            elif r.layer == 1:
                assert r.wbits == 8
