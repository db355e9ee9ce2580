"""Synchronization and conditional-communication policies.

A policy never computes values itself; it decides, per step and layer, which
layers run synchronously and which (token, slot) pairs actually travel. The
schedule engine consumes these decisions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigurationError, ContractError
from .model import RouteDecision, mix64, splitmix64

_RANDOM_SLOT_TAG = 0x7C0DD17105A17BAD


class SyncStrategy(Enum):
    NONE = "none"
    DEEP = "deep"
    SHALLOW = "shallow"
    STAGGERED = "staggered"
    EXPLICIT = "explicit"


class CondStrategy(Enum):
    OFF = "off"
    LOW_SCORE = "low_score"
    HIGH_SCORE = "high_score"
    RANDOM = "random"


@dataclass(frozen=True)
class PolicyConfig:
    sync_strategy: SyncStrategy = SyncStrategy.NONE
    explicit_layers: frozenset | None = None
    cond_strategy: CondStrategy = CondStrategy.OFF
    refresh_interval: int = 1
    cond_seed: int | None = None
    warmup: int = 0
    period: float = math.inf      # inf disables periodic synchronization
    strict_refresh: bool = False

    def __post_init__(self):
        if self.refresh_interval < 1:
            raise ConfigurationError(
                f"refresh_interval must be >= 1, got {self.refresh_interval}")
        if self.warmup < 0:
            raise ConfigurationError(f"warmup must be >= 0, got {self.warmup}")
        if not (self.period == math.inf or (self.period == int(self.period)
                                            and self.period >= 1)):
            raise ConfigurationError(
                f"period must be a positive integer or inf, got {self.period}")
        if (self.sync_strategy is SyncStrategy.EXPLICIT) != (self.explicit_layers is not None):
            raise ConfigurationError(
                "explicit_layers must be given exactly when sync_strategy is explicit")


NEUTRAL = PolicyConfig()


def dice_policy(refresh_interval: int = 5, warmup: int = 6, period: float = 10) -> PolicyConfig:
    """The combined preset: deep selective sync, low-score conditional comm."""
    return PolicyConfig(sync_strategy=SyncStrategy.DEEP,
                        cond_strategy=CondStrategy.LOW_SCORE,
                        refresh_interval=refresh_interval,
                        warmup=warmup, period=period)


def select_sync_layers(strategy: SyncStrategy, num_layers: int,
                       explicit: frozenset | None = None) -> frozenset:
    """Layers forced to run synchronously every step."""
    if num_layers < 1:
        raise ConfigurationError(f"num_layers must be >= 1, got {num_layers}")
    half = math.ceil(num_layers / 2)
    if strategy is SyncStrategy.NONE:
        return frozenset()
    if strategy is SyncStrategy.DEEP:
        return frozenset(range(half, num_layers))
    if strategy is SyncStrategy.SHALLOW:
        return frozenset(range(0, half))
    if strategy is SyncStrategy.STAGGERED:
        return frozenset(range(1, num_layers, 2))
    if strategy is SyncStrategy.EXPLICIT:
        layers = frozenset(int(l) for l in (explicit or frozenset()))
        if any(l < 0 or l >= num_layers for l in layers):
            raise ConfigurationError(
                f"explicit sync layers {sorted(layers)} outside [0, {num_layers})")
        return layers
    raise ConfigurationError(f"unknown sync strategy {strategy!r}")


def is_sync_step(step: int, warmup: int, period: float) -> bool:
    """True during warmup and on every period-th step after it."""
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if step < warmup:
        return True
    if period == math.inf:
        return False
    return (step - warmup) % int(period) == 0


def random_keep_slots(seed: int, layer: int, step: int, num_tokens: int, k: int) -> np.ndarray:
    """Per-token always-fresh slot for the Random policy, from a keyed PRF.

    Keyed by (seed, layer, step) so independent replays (simulator and
    oracle) draw identical subsets without sharing generator state.
    """
    key = mix64(mix64(seed ^ _RANDOM_SLOT_TAG) + layer)
    key = mix64(key + step)
    return (splitmix64(key, num_tokens) % np.uint64(k)).astype(np.int64)


def reduced_slots(route: RouteDecision, cond_strategy: CondStrategy, seed: int = 0,
                  layer: int = 0, step: int = 0) -> np.ndarray:
    """Boolean [tokens, k] mask of reduced (cacheable) rank slots.

    LowScore reduces everything below the top slot, HighScore reduces the top
    slot only, Random reduces all but one uniformly drawn slot per token.
    """
    n, k = route.expert_ids.shape
    mask = np.zeros((n, k), dtype=bool)
    if cond_strategy is CondStrategy.OFF:
        return mask
    if cond_strategy is CondStrategy.LOW_SCORE:
        mask[:, 1:] = True
    elif cond_strategy is CondStrategy.HIGH_SCORE:
        mask[:, 0] = True
    elif cond_strategy is CondStrategy.RANDOM:
        keep = random_keep_slots(seed, layer, step, n, k)
        mask[:] = True
        mask[np.arange(n), keep] = False
    else:
        raise ConfigurationError(f"unknown cond strategy {cond_strategy!r}")
    return mask


class TokenCache:
    """Per (layer, token, slot) cached expert rows, gates, ids, refresh steps.

    Cadence is tracked per token: a token's reduced pairs are refreshed
    together once `refresh_interval` steps have passed since its last
    refresh. A cache miss (first use) forces a refresh. The cached gate and
    cached output row always travel together.
    """

    def __init__(self, num_layers: int, num_tokens: int, k: int, hidden_dim: int):
        self.rows = np.zeros((num_layers, k, num_tokens, hidden_dim))
        self.gates = np.zeros((num_layers, num_tokens, k))
        self.expert_ids = np.full((num_layers, num_tokens, k), -1, dtype=np.int64)
        self.last_refresh = np.full((num_layers, num_tokens), -(10 ** 9), dtype=np.int64)
        self.reduced_mask = np.zeros((num_layers, num_tokens, k), dtype=bool)
        self.has_subset = np.zeros((num_layers, num_tokens), dtype=bool)

    def decide(self, layer: int, step: int, route: RouteDecision,
               policy: PolicyConfig, force_refresh: bool = False):
        """Choose active pairs for this dispatch; update cadence bookkeeping.

        Returns (active_mask, cache_write_mask), both [tokens, k]. Reduced
        pairs due for refresh are active and earmarked for a cache write.
        """
        n, k = route.expert_ids.shape
        if policy.cond_strategy is CondStrategy.OFF:
            return np.ones((n, k), dtype=bool), np.zeros((n, k), dtype=bool)
        seed = policy.cond_seed if policy.cond_seed is not None else 0
        due = (step - self.last_refresh[layer]) >= policy.refresh_interval
        due |= ~self.has_subset[layer]
        if force_refresh:
            due = np.ones(n, dtype=bool)
        if np.any(due):
            fresh_subset = reduced_slots(route, policy.cond_strategy, seed, layer, step)
            self.reduced_mask[layer][due] = fresh_subset[due]
            self.last_refresh[layer][due] = step
            self.has_subset[layer][due] = True
        reduced = self.reduced_mask[layer]
        active = ~reduced | due[:, None]
        write = reduced & due[:, None]
        if policy.strict_refresh:
            mismatch = reduced & ~due[:, None] & (route.expert_ids != self.expert_ids[layer])
            active = active | mismatch
            write = write | mismatch
        return active, write

    def assemble(self, layer: int, fresh_rows: np.ndarray, route: RouteDecision,
                 active: np.ndarray, write: np.ndarray):
        """Merge fresh rows with cached rows; store the newly refreshed pairs.

        `fresh_rows` is [k, tokens, hidden] with zeros at inactive pairs.
        Returns (rows, gates) where every inactive pair carries its cached
        output row scaled later by its cached gate.
        """
        k = fresh_rows.shape[0]
        rows = fresh_rows.copy()
        gates = np.where(active, route.gates, self.gates[layer])
        for slot in range(k):
            stale = ~active[:, slot]
            if np.any(stale):
                rows[slot][stale] = self.rows[layer, slot][stale]
            to_write = write[:, slot]
            if np.any(to_write):
                self.rows[layer, slot][to_write] = fresh_rows[slot][to_write]
        self.gates[layer] = np.where(write, route.gates, self.gates[layer])
        self.expert_ids[layer] = np.where(write, route.expert_ids, self.expert_ids[layer])
        return rows, gates


def apply_conditional(route: RouteDecision, step: int, cache: TokenCache, layer: int,
                      policy: PolicyConfig, compute_rows):
    """One-shot decide + compute + assemble, for callers without a split pipeline.

    `compute_rows(active_mask)` must return [k, tokens, hidden] rows for the
    active pairs. Returns (active_mask, rows, gates).
    """
    active, write = cache.decide(layer, step, route, policy)
    rows = compute_rows(active)
    rows, gates = cache.assemble(layer, rows, route, active, write)
    return active, rows, gates
