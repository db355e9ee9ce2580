"""Reference-oracle tests: provenance laws, comparisons, scale refusal."""

import dataclasses

import numpy as np
import pytest

from dicesim.cluster import ClusterConfig
from dicesim.errors import ContractError, OracleScaleError
from dicesim.model import ActivationBlock, ModelConfig, init_model, sample_x0
from dicesim.oracle import (OracleTrace, compare_traces, oracle_run,
                            random_grid)
from dicesim.policies import NEUTRAL, CondStrategy, PolicyConfig, SyncStrategy
from dicesim.schedules import Strategy, run_sampling

CFG = ModelConfig(num_layers=2, num_experts=4, num_shared=1, top_k=2,
                  hidden_dim=8, expert_dim=16, num_tokens=4, batch=2,
                  num_steps=6, step_size=1e-3)
CLUSTER = ClusterConfig(num_devices=2, alpha=0.0, beta=1e-9,
                        bytes_per_element=2, compute_rate=1e9,
                        op_overhead_elements=0)


def both(strategy, policy=NEUTRAL, cfg=CFG, seed=5):
    model = init_model(cfg, seed=seed)
    x0 = sample_x0(cfg, seed=seed)
    res = run_sampling(model, x0, strategy, policy, CLUSTER, seed,
                       record_inputs=True)
    trace = oracle_run(model, x0, strategy, policy, seed=seed)
    return res, trace


class TestProvenanceLaws:
    def test_synchronous_consumes_own_step(self):
        _, trace = both(Strategy.SYNCHRONOUS)
        for s, row in enumerate(trace.provenance):
            assert row == [s] * CFG.num_layers
        assert trace.staleness_histogram() == {0: CFG.num_steps * CFG.num_layers}

    def test_interweaved_one_step_back_after_warmup(self):
        _, trace = both(Strategy.INTERWEAVED, PolicyConfig(warmup=1))
        for s, row in enumerate(trace.provenance):
            expected = s if s == 0 else s - 1
            assert row == [expected] * CFG.num_layers

    def test_displaced_law(self):
        _, trace = both(Strategy.DISPLACED, PolicyConfig(warmup=2, period=3))
        # sync steps {0,1,2,5}: own step; steps {3,6...}: one back; else two.
        expected = {0: 0, 1: 1, 2: 2, 3: 2, 4: 2, 5: 5}
        for s, row in enumerate(trace.provenance):
            assert row == [expected[s]] * CFG.num_layers

    def test_staleness_never_exceeds_schedule_maximum(self):
        caps = {Strategy.SYNCHRONOUS: 0, Strategy.INTERWEAVED: 1,
                Strategy.DISPLACED: 2}
        for strategy, cap in caps.items():
            _, trace = both(strategy)
            worst = max(s - g for s, row in enumerate(trace.provenance)
                        for g in row)
            assert worst == cap

    def test_sync_layers_consume_own_step(self):
        policy = PolicyConfig(sync_strategy=SyncStrategy.EXPLICIT,
                              explicit_layers=frozenset({0}))
        _, trace = both(Strategy.DISPLACED, policy)
        for s, row in enumerate(trace.provenance):
            assert row[0] == s


class TestEngineAgreement:
    def test_finals_and_inputs_bit_exact(self):
        for strategy in Strategy:
            res, trace = both(strategy, PolicyConfig(
                cond_strategy=CondStrategy.LOW_SCORE, refresh_interval=2,
                warmup=1, period=4))
            cmp = compare_traces(res, trace, check_inputs=True)
            assert cmp.max_abs_diff == 0.0
            assert cmp.first_divergence is None

    def test_histograms_match_engine(self):
        for strategy in Strategy:
            res, trace = both(strategy, PolicyConfig(warmup=1, period=3))
            assert res.staleness_histogram() == trace.staleness_histogram()

    def test_fault_injection_hook_diverges(self):
        model = init_model(CFG, seed=5)
        x0 = sample_x0(CFG, seed=5)
        res = run_sampling(model, x0, Strategy.DISPLACED, NEUTRAL, CLUSTER, 5)
        skewed = oracle_run(model, x0, Strategy.DISPLACED, NEUTRAL, seed=5,
                            _staleness_skew=1)
        cmp = compare_traces(res, skewed)
        assert cmp.max_abs_diff > 0.0
        assert cmp.first_divergence is not None


class TestCompareTraces:
    def test_identical(self):
        _, trace = both(Strategy.INTERWEAVED)
        cmp = compare_traces(trace, trace, check_inputs=True)
        assert cmp.max_abs_diff == 0.0
        assert cmp.first_divergence is None

    def test_single_element_perturbation_located(self):
        _, a = both(Strategy.INTERWEAVED)
        perturbed = ActivationBlock(a.final.values.copy(),
                                    a.final.generated_step)
        perturbed.values[3, 2] += 1e-9
        b = OracleTrace(final=perturbed, step_inputs=a.step_inputs,
                        step_routes=a.step_routes,
                        routed_outputs=a.routed_outputs,
                        provenance=a.provenance)
        cmp = compare_traces(a, b)
        assert cmp.max_abs_diff == pytest.approx(1e-9)
        assert cmp.first_divergence == ("final", 3, 2)

    def test_sync_vs_interweaved_strictly_differ(self):
        _, sync = both(Strategy.SYNCHRONOUS)
        _, inter = both(Strategy.INTERWEAVED)
        cmp = compare_traces(sync, inter)
        assert cmp.max_abs_diff > 0.0


class TestScaleRefusal:
    @pytest.mark.parametrize("field,value", [
        ("num_layers", 5),
        ("num_experts", 16),
        ("num_steps", 17),
        ("batch", 9),            # pushes total rows past the cap
    ])
    def test_refuses_large_instances(self, field, value):
        cfg = dataclasses.replace(CFG, **{field: value})
        model = init_model(cfg, seed=0)
        x0 = sample_x0(cfg, seed=0)
        with pytest.raises(OracleScaleError):
            oracle_run(model, x0, Strategy.SYNCHRONOUS, NEUTRAL)

    def test_rejects_bad_x0(self):
        model = init_model(CFG, seed=0)
        stale = ActivationBlock(sample_x0(CFG, seed=0).values, generated_step=2)
        with pytest.raises(ContractError):
            oracle_run(model, stale, Strategy.SYNCHRONOUS, NEUTRAL)


class TestRandomGrid:
    def test_deterministic_and_in_bounds(self):
        a = random_grid(40, seed=9)
        b = random_grid(40, seed=9)
        assert len(a) == 40
        for (cfg_a, st_a, pol_a, seed_a, dev_a), (cfg_b, st_b, pol_b, seed_b,
                                                  dev_b) in zip(a, b):
            assert cfg_a == cfg_b and st_a == st_b and pol_a == pol_b
            assert seed_a == seed_b and dev_a == dev_b
            assert cfg_a.num_layers <= 4 and cfg_a.num_experts <= 8
            assert cfg_a.total_rows <= 32 and cfg_a.num_steps <= 16
            assert cfg_a.num_experts % dev_a == 0

    def test_covers_all_strategies(self):
        kinds = {strategy for _, strategy, _, _, _ in random_grid(9, seed=0)}
        assert kinds == set(Strategy)
