"""Reference oracle: direct stale-recurrence evaluation on small instances.

Recomputes a sampling trajectory with explicit step-indexed histories and
no simulator machinery — no timeline, no buffers, no payload objects in
flight. The routed output consumed at ``(step, layer)`` is looked up in
the history at the provenance step dictated by the schedule:

* synchronous stages consume their own step,
* interweaved stages consume the previous step,
* displaced stages consume two steps back (one step back right after a
  stage that ran synchronously).

Conditional-communication caching is replayed with the same per-layer
``decide``/``assemble`` call order the engine uses, so cached rows and
gates match bit-for-bit. Deliberately brute force; refuses instances
beyond small limits.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, OracleScaleError
from .model import (ActivationBlock, ModelConfig, RouteDecision, ToyModel,
                    combine_outputs, denoise_update, gate, local_block,
                    routed_rows, shared_forward)
from .policies import (CondStrategy, PolicyConfig, SyncStrategy, TokenCache,
                       is_sync_step, select_sync_layers)
from .schedules import Strategy

MAX_LAYERS = 4
MAX_EXPERTS = 8
MAX_ROWS = 32
MAX_STEPS = 16


@dataclass
class OracleTrace:
    """Full per-step histories plus the final sample."""
    final: ActivationBlock
    step_inputs: list        # [step][layer] -> [rows, hidden] MoE inputs
    step_routes: list        # [step][layer] -> RouteDecision
    routed_outputs: list     # [step][layer] -> consumed gated routed sum
    provenance: list         # [step][layer] -> generating step of consumption

    def staleness_histogram(self) -> dict:
        counts = {}
        for s, row in enumerate(self.provenance):
            for g in row:
                counts[s - g] = counts.get(s - g, 0) + 1
        return dict(sorted(counts.items()))


@dataclass(frozen=True)
class TraceComparison:
    max_abs_diff: float
    first_divergence: tuple | None   # coordinate label of first mismatch


def _check_scale(cfg: ModelConfig) -> None:
    if (cfg.num_layers > MAX_LAYERS or cfg.num_experts > MAX_EXPERTS
            or cfg.total_rows > MAX_ROWS or cfg.num_steps > MAX_STEPS):
        raise OracleScaleError(
            f"oracle refuses instances beyond L<={MAX_LAYERS}, "
            f"E<={MAX_EXPERTS}, rows<={MAX_ROWS}, steps<={MAX_STEPS}; got "
            f"L={cfg.num_layers}, E={cfg.num_experts}, "
            f"rows={cfg.total_rows}, steps={cfg.num_steps}")


def oracle_run(model: ToyModel, x0: ActivationBlock, strategy: Strategy,
               policies: PolicyConfig, seed: int = 0, *,
               _staleness_skew: int = 0) -> OracleTrace:
    """Evaluate the stale recurrence directly; returns the full trace.

    ``_staleness_skew`` is a fault-injection hook for validation tooling:
    it shifts every asynchronous provenance lookup further into the past,
    which must surface as a divergence against the engine.
    """
    cfg = model.config
    _check_scale(cfg)
    if x0.generated_step != 0:
        raise ContractError(
            f"x0 must carry generated_step 0, got {x0.generated_step}")
    if x0.values.shape != (cfg.total_rows, cfg.hidden_dim):
        raise ContractError(
            f"x0 shape {x0.values.shape} does not match model "
            f"{(cfg.total_rows, cfg.hidden_dim)}")
    if not isinstance(strategy, Strategy):
        raise ContractError(f"strategy must be a Strategy, got {strategy!r}")
    policy = policies
    if policy.cond_strategy is CondStrategy.RANDOM and policy.cond_seed is None:
        policy = dataclasses.replace(policy, cond_seed=seed)

    sync_layers = select_sync_layers(policy.sync_strategy, cfg.num_layers,
                                     policy.explicit_layers)
    cache = None
    if policy.cond_strategy is not CondStrategy.OFF:
        cache = TokenCache(cfg.num_layers, cfg.total_rows, cfg.top_k,
                           cfg.hidden_dim)

    def stage_sync(step: int, layer: int) -> bool:
        if strategy is Strategy.SYNCHRONOUS or step == 0:
            return True
        if is_sync_step(step, policy.warmup, policy.period):
            return True
        return layer in sync_layers

    def decide(layer, step, route, force):
        if cache is None:
            shape = route.expert_ids.shape
            return np.ones(shape, dtype=bool), np.zeros(shape, dtype=bool)
        return cache.decide(layer, step, route, policy, force_refresh=force)

    def assemble(layer, rows, route, active, write):
        if cache is None:
            return rows, route
        merged, gates = cache.assemble(layer, rows, route, active, write)
        scale = RouteDecision(expert_ids=route.expert_ids, gates=gates,
                              scores=route.scores)
        return merged, scale

    # Histories: assembled combine payloads keyed by generating step.
    hist_rows = [dict() for _ in range(cfg.num_layers)]
    hist_scale = [dict() for _ in range(cfg.num_layers)]
    # Displaced keeps the previous step's dispatch to expert-compute now.
    prev_dispatch = [None] * cfg.num_layers

    step_inputs, step_routes, routed_outputs, provenance = [], [], [], []
    x = x0
    for step in range(cfg.num_steps):
        inputs_here, routes_here, outs_here, prov_here = [], [], [], []
        h = x
        for layer in range(cfg.num_layers):
            u = local_block(model, layer, h)
            route = gate(model, layer, u)
            sync_here = stage_sync(step, layer)
            active, write = decide(layer, step, route, force=sync_here)
            payload = (u.values, route, active, write, step)

            if sync_here:
                rows = routed_rows(model, layer, u.values, route, active)
                rows, scale = assemble(layer, rows, route, active, write)
                hist_rows[layer][step], hist_scale[layer][step] = rows, scale
                prev_dispatch[layer] = payload
                g = step
            elif strategy is Strategy.INTERWEAVED:
                rows = routed_rows(model, layer, u.values, route, active)
                rows, scale = assemble(layer, rows, route, active, write)
                hist_rows[layer][step], hist_scale[layer][step] = rows, scale
                g = step - 1
            else:  # displaced: process last step's dispatch, consume older
                p_tok, p_route, p_active, p_write, p_gen = prev_dispatch[layer]
                prev_dispatch[layer] = payload
                rows = routed_rows(model, layer, p_tok, p_route, p_active)
                rows, scale = assemble(layer, rows, p_route, p_active, p_write)
                hist_rows[layer][p_gen], hist_scale[layer][p_gen] = rows, scale
                g = step - 1 if stage_sync(step - 1, layer) else step - 2

            if not sync_here and _staleness_skew:
                g = max(0, g - _staleness_skew)

            shared = shared_forward(model, layer, u)
            use_rows = hist_rows[layer][g]
            use_scale = hist_scale[layer][g]
            combined = combine_outputs(use_scale, use_rows, shared, use_scale)
            out = u.values + combined

            inputs_here.append(u.values)
            routes_here.append(route)
            outs_here.append(combined - shared)
            prov_here.append(g)
            h = ActivationBlock(out, x.generated_step, layer)

        x = denoise_update(x, h.values, cfg.step_size, step)
        step_inputs.append(inputs_here)
        step_routes.append(routes_here)
        routed_outputs.append(outs_here)
        provenance.append(prov_here)

    return OracleTrace(final=x, step_inputs=step_inputs,
                       step_routes=step_routes, routed_outputs=routed_outputs,
                       provenance=provenance)


def compare_traces(a, b, check_inputs: bool = False) -> TraceComparison:
    """Elementwise comparison of finals (and optionally per-step inputs).

    Accepts any two objects carrying ``final`` activation blocks and,
    for ``check_inputs``, ``step_inputs`` histories.
    """
    max_diff = 0.0
    first = None
    if check_inputs:
        if len(a.step_inputs) != len(b.step_inputs):
            raise ContractError("traces record different step counts")
        for s, (row_a, row_b) in enumerate(zip(a.step_inputs, b.step_inputs)):
            for l, (ua, ub) in enumerate(zip(row_a, row_b)):
                diff = np.abs(ua - ub)
                peak = float(diff.max()) if diff.size else 0.0
                if peak > max_diff:
                    max_diff = peak
                if first is None and peak > 0.0:
                    r, c = np.argwhere(diff > 0)[0]
                    first = ("input", s, l, int(r), int(c))
    diff = np.abs(a.final.values - b.final.values)
    peak = float(diff.max()) if diff.size else 0.0
    if peak > max_diff:
        max_diff = peak
    if first is None and peak > 0.0:
        r, c = np.argwhere(diff > 0)[0]
        first = ("final", int(r), int(c))
    return TraceComparison(max_abs_diff=max_diff, first_divergence=first)


def random_grid(count: int, seed: int = 0):
    """Deterministic stream of small (config, strategy, policy, run seed,
    device count) tuples spanning all strategies and policies."""
    rng = np.random.default_rng(seed)
    strategies = list(Strategy)
    sync_choices = [SyncStrategy.NONE, SyncStrategy.DEEP, SyncStrategy.SHALLOW,
                    SyncStrategy.STAGGERED, SyncStrategy.EXPLICIT]
    cond_choices = [CondStrategy.OFF, CondStrategy.LOW_SCORE,
                    CondStrategy.HIGH_SCORE, CondStrategy.RANDOM]
    out = []
    for i in range(count):
        layers = int(rng.integers(1, MAX_LAYERS + 1))
        experts = int(rng.choice([2, 4, 8]))
        hidden = int(rng.choice([4, 8]))
        cfg = ModelConfig(
            num_layers=layers,
            num_experts=experts,
            num_shared=int(rng.integers(0, 3)),
            top_k=int(rng.integers(1, min(3, experts) + 1)),
            hidden_dim=hidden,
            expert_dim=int(rng.choice([8, 16])),
            num_tokens=int(rng.choice([2, 4, 8])),
            batch=int(rng.integers(1, 3)),
            num_steps=int(rng.integers(3, 11)),
            step_size=float(rng.choice([1e-3, 1e-4])),
        )
        sync_strategy = sync_choices[int(rng.integers(len(sync_choices)))]
        explicit = None
        if sync_strategy is SyncStrategy.EXPLICIT:
            size = int(rng.integers(0, layers + 1))
            explicit = frozenset(
                int(v) for v in rng.choice(layers, size=size, replace=False))
        policy = PolicyConfig(
            sync_strategy=sync_strategy,
            explicit_layers=explicit,
            cond_strategy=cond_choices[int(rng.integers(len(cond_choices)))],
            refresh_interval=int(rng.choice([1, 2, 5])),
            cond_seed=int(rng.integers(0, 2 ** 31)),
            warmup=int(rng.choice([0, 1, 6])),
            period=float(rng.choice([3.0, 10.0, np.inf])),
            strict_refresh=bool(rng.integers(0, 2)),
        )
        strategy = strategies[i % len(strategies)]
        divisors = [d for d in (1, 2, 4, 8) if experts % d == 0]
        devices = int(rng.choice(divisors))
        run_seed = int(rng.integers(0, 2 ** 31))
        out.append((cfg, strategy, policy, run_seed, devices))
    return out
