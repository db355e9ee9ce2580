"""Policy tests: sync layer sets, periodic sync, slot reduction, token cache."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicesim.errors import ConfigurationError
from dicesim.model import RouteDecision
from dicesim.policies import (
    CondStrategy,
    PolicyConfig,
    SyncStrategy,
    TokenCache,
    apply_conditional,
    dice_policy,
    is_sync_step,
    random_keep_slots,
    reduced_slots,
    select_sync_layers,
)


def route_of(ids, gates=None):
    ids = np.asarray(ids, dtype=np.int64)
    if gates is None:
        gates = np.full(ids.shape, 1.0 / ids.shape[1])
    return RouteDecision(expert_ids=ids, gates=np.asarray(gates, dtype=np.float64),
                         scores=np.zeros((ids.shape[0], int(ids.max()) + 1)))


class TestSyncLayers:
    def test_deep_28(self):
        assert select_sync_layers(SyncStrategy.DEEP, 28) == frozenset(range(14, 28))

    def test_shallow_28(self):
        assert select_sync_layers(SyncStrategy.SHALLOW, 28) == frozenset(range(0, 14))

    def test_odd_depth_split(self):
        # ceil(7/2) = 4: shallow gets 0..3, deep gets 4..6.
        assert select_sync_layers(SyncStrategy.SHALLOW, 7) == frozenset({0, 1, 2, 3})
        assert select_sync_layers(SyncStrategy.DEEP, 7) == frozenset({4, 5, 6})

    def test_staggered_4(self):
        assert select_sync_layers(SyncStrategy.STAGGERED, 4) == frozenset({1, 3})

    def test_explicit_bounds(self):
        assert select_sync_layers(SyncStrategy.EXPLICIT, 4, frozenset({0, 3})) == {0, 3}
        with pytest.raises(ConfigurationError):
            select_sync_layers(SyncStrategy.EXPLICIT, 4, frozenset({4}))

    def test_none_empty(self):
        assert select_sync_layers(SyncStrategy.NONE, 9) == frozenset()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 64))
    def test_deep_shallow_partition(self, num_layers):
        deep = select_sync_layers(SyncStrategy.DEEP, num_layers)
        shallow = select_sync_layers(SyncStrategy.SHALLOW, num_layers)
        assert deep | shallow == frozenset(range(num_layers))
        assert not deep & shallow


class TestSyncStep:
    def test_reference_points(self):
        assert is_sync_step(5, 6, 10)
        assert is_sync_step(16, 6, 10)
        assert not is_sync_step(17, 6, 10)
        assert is_sync_step(6, 6, 10)
        assert not is_sync_step(7, 6, 10)

    def test_no_warmup_no_period(self):
        assert not any(is_sync_step(s, 0, math.inf) for s in range(50))

    def test_warmup_only(self):
        flags = [is_sync_step(s, 3, math.inf) for s in range(6)]
        assert flags == [True, True, True, False, False, False]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 200), st.integers(0, 20), st.integers(1, 30))
    def test_periodic_definition(self, step, warmup, period):
        expect = step < warmup or (step - warmup) % period == 0
        assert is_sync_step(step, warmup, period) == expect


class TestReducedSlots:
    def test_low_score_k2(self):
        route = route_of([[3, 1], [0, 2]])
        mask = reduced_slots(route, CondStrategy.LOW_SCORE)
        assert mask.tolist() == [[False, True], [False, True]]

    def test_high_score(self):
        route = route_of([[3, 1, 2]])
        mask = reduced_slots(route, CondStrategy.HIGH_SCORE)
        assert mask.tolist() == [[True, False, False]]

    def test_off_empty(self):
        route = route_of([[0, 1]])
        assert not reduced_slots(route, CondStrategy.OFF).any()

    def test_k1_low_score_reduces_nothing(self):
        route = route_of([[2]])
        assert not reduced_slots(route, CondStrategy.LOW_SCORE).any()

    def test_random_reproducible_and_fraction(self):
        route = route_of(np.random.default_rng(0).integers(0, 8, size=(64, 4)))
        a = reduced_slots(route, CondStrategy.RANDOM, seed=9, layer=2, step=5)
        b = reduced_slots(route, CondStrategy.RANDOM, seed=9, layer=2, step=5)
        c = reduced_slots(route, CondStrategy.RANDOM, seed=9, layer=2, step=6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        # Every token reduces exactly k-1 slots.
        assert np.all(a.sum(axis=1) == 3)

    def test_random_keep_slot_spread(self):
        keeps = random_keep_slots(seed=1, layer=0, step=0, num_tokens=4000, k=4)
        counts = np.bincount(keeps, minlength=4)
        assert counts.min() > 800  # roughly uniform


class TestPolicyConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            PolicyConfig(refresh_interval=0)
        with pytest.raises(ConfigurationError):
            PolicyConfig(warmup=-1)
        with pytest.raises(ConfigurationError):
            PolicyConfig(period=0)
        with pytest.raises(ConfigurationError):
            PolicyConfig(period=2.5)
        with pytest.raises(ConfigurationError):
            PolicyConfig(sync_strategy=SyncStrategy.EXPLICIT)
        with pytest.raises(ConfigurationError):
            PolicyConfig(explicit_layers=frozenset({1}))

    def test_dice_preset(self):
        p = dice_policy()
        assert p.sync_strategy is SyncStrategy.DEEP
        assert p.cond_strategy is CondStrategy.LOW_SCORE
        assert (p.refresh_interval, p.warmup, p.period) == (5, 6, 10)


def fresh_rows_fn(k, n, h, fill):
    def compute(active):
        rows = np.zeros((k, n, h))
        for slot in range(k):
            rows[slot][active[:, slot]] = fill
        return rows
    return compute


class TestTokenCache:
    def setup_method(self):
        self.n, self.k, self.h = 4, 2, 3
        self.cache = TokenCache(num_layers=1, num_tokens=self.n, k=self.k,
                                hidden_dim=self.h)
        self.route = route_of([[0, 1]] * self.n, gates=[[0.7, 0.3]] * self.n)

    def policy(self, r, strategy=CondStrategy.LOW_SCORE, strict=False):
        return PolicyConfig(cond_strategy=strategy, refresh_interval=r,
                            cond_seed=0, strict_refresh=strict)

    def test_r1_always_fresh(self):
        policy = self.policy(r=1)
        for step in range(4):
            active, write = self.cache.decide(0, step, self.route, policy)
            assert active.all()
            assert np.array_equal(write, reduced_slots(self.route, CondStrategy.LOW_SCORE))

    def test_first_use_forces_refresh(self):
        active, write = self.cache.decide(0, 0, self.route, self.policy(r=5))
        assert active.all() and write[:, 1].all()

    def test_cadence_volume_fraction(self):
        # R=5, k=2, LowScore: over a long window 60 percent of pairs travel.
        policy = self.policy(r=5)
        sent = total = 0
        for step in range(200):
            active, _ = self.cache.decide(0, step, self.route, policy)
            sent += active.sum()
            total += active.size
        assert sent / total == pytest.approx(0.6, abs=0.01)

    def test_cached_gate_and_row_travel_together(self):
        policy = self.policy(r=3)
        compute = fresh_rows_fn(self.k, self.n, self.h, fill=1.0)
        active, rows, gates = apply_conditional(self.route, 0, self.cache, 0,
                                                policy, compute)
        assert active.all()
        # Step 1: slot 1 served from cache with the step-0 gate and row.
        later = route_of([[0, 1]] * self.n, gates=[[0.9, 0.1]] * self.n)
        compute2 = fresh_rows_fn(self.k, self.n, self.h, fill=2.0)
        active2, rows2, gates2 = apply_conditional(later, 1, self.cache, 0,
                                                   policy, compute2)
        assert not active2[:, 1].any()
        assert np.all(rows2[1] == 1.0)       # cached row
        assert np.all(gates2[:, 1] == 0.3)   # cached gate from the same refresh
        assert np.all(rows2[0] == 2.0)       # top slot stays fresh
        assert np.all(gates2[:, 0] == 0.9)

    def test_refresh_updates_cache(self):
        policy = self.policy(r=2)
        compute1 = fresh_rows_fn(self.k, self.n, self.h, fill=1.0)
        apply_conditional(self.route, 0, self.cache, 0, policy, compute1)
        compute5 = fresh_rows_fn(self.k, self.n, self.h, fill=5.0)
        active, rows, gates = apply_conditional(self.route, 2, self.cache, 0,
                                                policy, compute5)
        assert active.all()
        assert np.all(rows[1] == 5.0)
        # Next step serves the refreshed row.
        active3, rows3, _ = apply_conditional(self.route, 3, self.cache, 0,
                                              policy, fresh_rows_fn(self.k, self.n,
                                                                    self.h, 9.0))
        assert np.all(rows3[1] == 5.0)

    def test_strict_refresh_on_expert_change(self):
        policy = self.policy(r=10, strict=True)
        apply_conditional(self.route, 0, self.cache, 0, policy,
                          fresh_rows_fn(self.k, self.n, self.h, 1.0))
        moved = route_of([[0, 2]] * self.n, gates=[[0.7, 0.3]] * self.n)
        active, _ = self.cache.decide(0, 1, moved, policy)
        assert active[:, 1].all()  # expert id changed, forced fresh
        relaxed = self.policy(r=10, strict=False)
        cache2 = TokenCache(1, self.n, self.k, self.h)
        apply_conditional(self.route, 0, cache2, 0, relaxed,
                          fresh_rows_fn(self.k, self.n, self.h, 1.0))
        active2, _ = cache2.decide(0, 1, moved, relaxed)
        assert not active2[:, 1].any()  # default reuses despite the move

    def test_off_is_identity(self):
        policy = PolicyConfig()
        active, write = self.cache.decide(0, 0, self.route, policy)
        assert active.all() and not write.any()
        fresh = fresh_rows_fn(self.k, self.n, self.h, 4.0)(active)
        rows, gates = self.cache.assemble(0, fresh, self.route, active, write)
        assert np.array_equal(rows, fresh)
        assert np.array_equal(gates, self.route.gates)

    def test_random_subset_redrawn_per_window(self):
        policy = self.policy(r=2, strategy=CondStrategy.RANDOM)
        route = route_of(np.random.default_rng(1).integers(0, 4, size=(32, 2)))
        cache = TokenCache(1, 32, 2, self.h)
        cache.decide(0, 0, route, policy)
        first = cache.reduced_mask[0].copy()
        cache.decide(0, 1, route, policy)       # mid-window, no redraw
        assert np.array_equal(cache.reduced_mask[0], first)
        cache.decide(0, 2, route, policy)       # due: redraw
        assert not np.array_equal(cache.reduced_mask[0], first)
