"""Execution schedules for expert-parallel iterative denoising.

Runs the toy mixture-of-experts model for a fixed number of denoising
steps under one of three schedules:

* ``SYNCHRONOUS`` — every all-to-all blocks; consumed routed outputs are
  always from the current step.
* ``DISPLACED`` — dispatch and combine results are each deferred by a
  full step, so consumed routed outputs are two steps old in steady
  state (one step old right after a synchronous step).
* ``INTERWEAVED`` — a layer's dispatch is processed later in the same
  step (overlapped with roughly one layer of compute) and only the
  combine result crosses the step boundary, giving one-step staleness
  and half the retained buffer slots of ``DISPLACED``.

Per-layer sync overrides, periodic/warmup sync steps, and conditional
communication all come from :mod:`dicesim.policies`. Every consumed
routed output is logged as a :class:`StalenessRecord`; communication is
charged to a :class:`~dicesim.cluster.SimTimeline`.
"""

from __future__ import annotations

import dataclasses
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cluster import (ClusterConfig, Placement, SimTimeline, build_placement,
                      per_device_bytes, plan_all_to_all)
from .errors import ContractError, NumericalDivergenceError, NumericsError
from .model import (ActivationBlock, RouteDecision, ToyModel, combine_outputs,
                    denoise_update, gate, local_block, model_hash, routed_rows,
                    shared_forward)
from .policies import (CondStrategy, PolicyConfig, SyncStrategy, TokenCache,
                       is_sync_step, select_sync_layers)


class Strategy(Enum):
    SYNCHRONOUS = "synchronous"
    DISPLACED = "displaced"
    INTERWEAVED = "interweaved"


@dataclass
class DispatchPayload:
    """Routed token rows in flight toward their experts."""
    layer: int
    tokens: np.ndarray          # [rows, hidden] MoE inputs at generation time
    route: RouteDecision
    active: np.ndarray          # [rows, k] pairs that actually travel
    write: np.ndarray           # [rows, k] pairs to persist into the cond cache
    generated_step: int
    handle: object | None       # collective handle; None when already local


@dataclass
class CombinePayload:
    """Expert output rows in flight back to their token homes."""
    layer: int
    rows: np.ndarray            # [k, rows, hidden] cache-merged expert outputs
    scale_route: RouteDecision  # gates that must scale these rows at consume
    generated_step: int
    handle: object | None


@dataclass
class LayerBuffers:
    """Per-layer slots retained across a step boundary.

    ``SYNCHRONOUS`` keeps neither slot, ``INTERWEAVED`` keeps only the
    combine slot, ``DISPLACED`` keeps both.
    """
    dispatch_slot: DispatchPayload | None = None
    combine_slot: CombinePayload | None = None


@dataclass(frozen=True)
class StalenessRecord:
    layer: int
    used_step: int
    generated_step: int

    @property
    def staleness(self) -> int:
        return self.used_step - self.generated_step


@dataclass
class RunResult:
    """Everything a single sampling run produces."""
    final: ActivationBlock
    timeline: SimTimeline
    staleness_records: list
    strategy: Strategy
    policy: PolicyConfig
    seed: int
    model_hash: str
    x0_hash: str
    config: object
    cluster: ClusterConfig
    dispatch_bytes: int
    combine_bytes: int
    peak_buffer_bytes: int
    active_pairs: int
    total_pairs: int
    per_step_active_pairs: list
    per_step_total_pairs: list
    step_inputs: list | None = None
    step_routes: list | None = None

    @property
    def total_comm_bytes(self) -> int:
        return self.dispatch_bytes + self.combine_bytes

    @property
    def makespan_seconds(self) -> float:
        return self.timeline.makespan()

    @property
    def comm_stall_seconds(self) -> float:
        return self.timeline.max_stall_seconds()

    def staleness_histogram(self) -> dict:
        counts = Counter(rec.staleness for rec in self.staleness_records)
        return dict(sorted(counts.items()))


def _array_hash(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values).tobytes()).hexdigest()


def _expert_split(total_elems: int, devices: int) -> np.ndarray:
    """Spread an exact element total over devices, remainder to the front."""
    base, rem = divmod(int(total_elems), devices)
    return base + (np.arange(devices) < rem)


class ScheduleRunner:
    """One sampling run: owns its buffers, cache, counters, and timeline."""

    def __init__(self, model: ToyModel, x0: ActivationBlock, strategy: Strategy,
                 policy: PolicyConfig, cluster: ClusterConfig, seed: int, *,
                 record_inputs: bool = False, record_routes: bool = False):
        cfg = model.config
        if not isinstance(strategy, Strategy):
            raise ContractError(f"strategy must be a Strategy, got {strategy!r}")
        if x0.generated_step != 0:
            raise ContractError(
                f"x0 must carry generated_step 0, got {x0.generated_step}")
        expected = (cfg.total_rows, cfg.hidden_dim)
        if x0.values.shape != expected:
            raise ContractError(
                f"x0 shape {x0.values.shape} does not match model {expected}")
        if policy.cond_strategy is CondStrategy.RANDOM and policy.cond_seed is None:
            policy = dataclasses.replace(policy, cond_seed=seed)

        self.model = model
        self.cfg = cfg
        self.x0 = x0
        self.strategy = strategy
        self.policy = policy
        self.cluster = cluster
        self.seed = seed
        self.record_inputs = record_inputs
        self.record_routes = record_routes

        self.placement: Placement = build_placement(
            cfg.num_experts, cluster.num_devices, cfg.total_rows)
        self.timeline = SimTimeline(cluster)
        self.sync_layers = select_sync_layers(
            policy.sync_strategy, cfg.num_layers, policy.explicit_layers)
        self.cache = None
        if policy.cond_strategy is not CondStrategy.OFF:
            self.cache = TokenCache(cfg.num_layers, cfg.total_rows,
                                    cfg.top_k, cfg.hidden_dim)

        self.buffers = [LayerBuffers() for _ in range(cfg.num_layers)]
        self._pending: DispatchPayload | None = None   # interweaved only
        self._shards = np.bincount(self.placement.token_home,
                                   minlength=cluster.num_devices)
        self._slot_bytes = cfg.total_rows * cfg.hidden_dim * cluster.bytes_per_element
        self._occupied_slots = 0

        self.staleness_records: list = []
        self.dispatch_bytes = 0
        self.combine_bytes = 0
        self.peak_buffer_bytes = 0
        self.active_pairs = 0
        self.total_pairs = 0
        self.per_step_active_pairs: list = []
        self.per_step_total_pairs: list = []
        self.step_inputs: list = []
        self.step_routes: list = []

    # ---------------------------------------------------------------- compute

    def _charge_shardwise(self, per_token_elems: int, label: str) -> None:
        overhead = self.cluster.op_overhead_elements
        for d in range(self.cluster.num_devices):
            self.timeline.charge_compute(
                d, int(self._shards[d]) * per_token_elems + overhead, label)

    def _charge_expert(self, pair_count: int, label: str) -> None:
        elems = _expert_split(
            pair_count * 2 * self.cfg.hidden_dim * self.cfg.expert_dim,
            self.cluster.num_devices)
        overhead = self.cluster.op_overhead_elements
        for d in range(self.cluster.num_devices):
            self.timeline.charge_compute(d, int(elems[d]) + overhead, label)

    def _charge_local(self, layer: int) -> None:
        self._charge_shardwise(self.cfg.hidden_dim ** 2, f"local L{layer}")

    def _charge_gate(self, layer: int) -> None:
        self._charge_shardwise(self.cfg.hidden_dim * self.cfg.num_experts,
                               f"gate L{layer}")

    def _charge_shared(self, layer: int) -> None:
        self._charge_shardwise(
            self.cfg.num_shared * 2 * self.cfg.hidden_dim * self.cfg.expert_dim,
            f"shared L{layer}")

    def _charge_consume(self, layer: int) -> None:
        self._charge_shardwise(self.cfg.hidden_dim * (self.cfg.top_k + 1),
                               f"consume L{layer}")

    def _charge_denoise(self) -> None:
        self._charge_shardwise(self.cfg.hidden_dim, "denoise")

    # ------------------------------------------------------------------- comm

    def _launch(self, kind: str, route: RouteDecision, active: np.ndarray,
                step: int, layer: int):
        """Launch one all-to-all; returns (collective handle, wire bytes)."""
        per_dev = per_device_bytes(route, self.placement, active,
                                   self.cfg.hidden_dim,
                                   self.cluster.bytes_per_element, kind)
        total = plan_all_to_all(route, self.placement, active,
                                self.cfg.hidden_dim,
                                self.cluster.bytes_per_element)
        coll = self.timeline.launch_collective(kind, per_dev,
                                               f"{kind} s{step} L{layer}")
        return coll, total

    def _wait_all(self, handle, label: str) -> None:
        if handle is None:
            return
        for d in range(self.cluster.num_devices):
            self.timeline.wait_comm(d, handle, label)

    # ---------------------------------------------------------------- buffers

    def _store_dispatch(self, layer: int, payload: DispatchPayload) -> None:
        if self.buffers[layer].dispatch_slot is None:
            self._occupied_slots += 1
        self.buffers[layer].dispatch_slot = payload
        self._track_buffer()

    def _store_combine(self, layer: int, payload: CombinePayload) -> None:
        if self.buffers[layer].combine_slot is None:
            self._occupied_slots += 1
        self.buffers[layer].combine_slot = payload
        self._track_buffer()

    def _track_buffer(self) -> None:
        self.peak_buffer_bytes = max(self.peak_buffer_bytes,
                                     self._occupied_slots * self._slot_bytes)

    # ------------------------------------------------------- cond-comm helpers

    def _decide(self, layer: int, step: int, route: RouteDecision,
                force_refresh: bool):
        n, k = route.expert_ids.shape
        if self.cache is None:
            return np.ones((n, k), dtype=bool), np.zeros((n, k), dtype=bool)
        return self.cache.decide(layer, step, route, self.policy,
                                 force_refresh=force_refresh)

    def _assemble(self, payload: DispatchPayload, fresh_rows: np.ndarray):
        """Merge fresh expert rows with cached ones; returns a scale route."""
        if self.cache is None:
            return fresh_rows, payload.route
        rows, gates = self.cache.assemble(payload.layer, fresh_rows,
                                          payload.route, payload.active,
                                          payload.write)
        scale = RouteDecision(expert_ids=payload.route.expert_ids, gates=gates,
                              scores=payload.route.scores)
        return rows, scale

    def _count_pairs(self, active: np.ndarray) -> None:
        self.active_pairs += int(np.count_nonzero(active))
        self.total_pairs += active.size
        self._step_active += int(np.count_nonzero(active))
        self._step_total += active.size

    # ----------------------------------------------------------------- stages

    def _expert_rows(self, payload: DispatchPayload) -> np.ndarray:
        self._charge_expert(int(np.count_nonzero(payload.active)),
                            f"expert L{payload.layer}")
        return routed_rows(self.model, payload.layer, payload.tokens,
                           payload.route, payload.active)

    def _consume(self, layer: int, step: int, u: ActivationBlock,
                 shared_out: np.ndarray, payload: CombinePayload) -> np.ndarray:
        self._wait_all(payload.handle, f"combine-wait L{layer}")
        combined = combine_outputs(payload.scale_route, payload.rows,
                                   shared_out, payload.scale_route)
        self._charge_consume(layer)
        self.staleness_records.append(
            StalenessRecord(layer=layer, used_step=step,
                            generated_step=payload.generated_step))
        return u.values + combined

    def _sync_stage(self, step: int, layer: int, u: ActivationBlock,
                    route: RouteDecision) -> np.ndarray:
        """Blocking dispatch/combine; refreshes the strategy's buffer slots."""
        active, write = self._decide(layer, step, route, force_refresh=True)
        self._count_pairs(active)
        payload = DispatchPayload(layer, u.values, route, active, write,
                                  step, None)
        coll, total = self._launch("dispatch", route, active, step, layer)
        self.dispatch_bytes += total
        self._wait_all(coll, f"dispatch-wait L{layer}")

        rows = self._expert_rows(payload)
        rows, scale = self._assemble(payload, rows)
        coll, total = self._launch("combine", route, active, step, layer)
        self.combine_bytes += total
        self._wait_all(coll, f"combine-wait L{layer}")
        combined_payload = CombinePayload(layer, rows, scale, step, None)

        if self.strategy is Strategy.DISPLACED:
            self._store_dispatch(layer, payload)
            self._store_combine(layer, combined_payload)
        elif self.strategy is Strategy.INTERWEAVED:
            self._store_combine(layer, combined_payload)

        shared_out = shared_forward(self.model, layer, u)
        self._charge_shared(layer)
        return self._consume(layer, step, u, shared_out, combined_payload)

    def _displaced_stage(self, step: int, layer: int, u: ActivationBlock,
                         route: RouteDecision) -> np.ndarray:
        active, write = self._decide(layer, step, route, force_refresh=False)
        self._count_pairs(active)
        coll, total = self._launch("dispatch", route, active, step, layer)
        self.dispatch_bytes += total
        new_dispatch = DispatchPayload(layer, u.values, route, active, write,
                                       step, coll)
        old_dispatch = self.buffers[layer].dispatch_slot
        self._store_dispatch(layer, new_dispatch)

        self._wait_all(old_dispatch.handle, f"dispatch-wait L{layer}")
        rows = self._expert_rows(old_dispatch)
        rows, scale = self._assemble(old_dispatch, rows)
        coll, total = self._launch("combine", old_dispatch.route,
                                   old_dispatch.active, step, layer)
        self.combine_bytes += total
        old_combine = self.buffers[layer].combine_slot
        self._store_combine(layer, CombinePayload(
            layer, rows, scale, old_dispatch.generated_step, coll))

        shared_out = shared_forward(self.model, layer, u)
        self._charge_shared(layer)
        return self._consume(layer, step, u, shared_out, old_combine)

    def _interweaved_stage(self, step: int, layer: int, u: ActivationBlock,
                           route: RouteDecision) -> np.ndarray:
        active, write = self._decide(layer, step, route, force_refresh=False)
        self._count_pairs(active)
        coll, total = self._launch("dispatch", route, active, step, layer)
        self.dispatch_bytes += total
        prev, self._pending = self._pending, DispatchPayload(
            layer, u.values, route, active, write, step, coll)
        if prev is not None:
            self._process_dispatch(step, prev)

        shared_out = shared_forward(self.model, layer, u)
        self._charge_shared(layer)
        old_combine = self.buffers[layer].combine_slot
        return self._consume(layer, step, u, shared_out, old_combine)

    def _process_dispatch(self, step: int, payload: DispatchPayload) -> None:
        """Expert-compute an in-flight dispatch and launch its combine."""
        self._wait_all(payload.handle, f"dispatch-wait L{payload.layer}")
        rows = self._expert_rows(payload)
        rows, scale = self._assemble(payload, rows)
        coll, total = self._launch("combine", payload.route, payload.active,
                                   step, payload.layer)
        self.combine_bytes += total
        self._store_combine(payload.layer, CombinePayload(
            payload.layer, rows, scale, payload.generated_step, coll))

    def _flush_pending(self, step: int) -> None:
        prev, self._pending = self._pending, None
        if prev is not None:
            self._process_dispatch(step, prev)

    # -------------------------------------------------------------------- run

    def _stage_is_sync(self, step: int, layer: int) -> bool:
        if self.strategy is Strategy.SYNCHRONOUS:
            return True
        if is_sync_step(step, self.policy.warmup, self.policy.period):
            return True
        if layer in self.sync_layers:
            return True
        bufs = self.buffers[layer]
        if self.strategy is Strategy.DISPLACED:
            return bufs.dispatch_slot is None or bufs.combine_slot is None
        return bufs.combine_slot is None

    def _run_step(self, step: int, x: ActivationBlock) -> ActivationBlock:
        self._step_active = 0
        self._step_total = 0
        inputs_here = []
        routes_here = []
        h = x
        for layer in range(self.cfg.num_layers):
            u = local_block(self.model, layer, h)
            self._charge_local(layer)
            route = gate(self.model, layer, u)
            self._charge_gate(layer)
            if self.record_inputs:
                inputs_here.append(u.values)
            if self.record_routes:
                routes_here.append(route)

            if self._stage_is_sync(step, layer):
                self._flush_pending(step)
                out = self._sync_stage(step, layer, u, route)
            elif self.strategy is Strategy.DISPLACED:
                out = self._displaced_stage(step, layer, u, route)
            else:
                out = self._interweaved_stage(step, layer, u, route)
            h = ActivationBlock(values=out, generated_step=x.generated_step,
                                layer=layer)
        self._flush_pending(step)

        x_next = denoise_update(x, h.values, self.cfg.step_size, step)
        self._charge_denoise()
        if not np.isfinite(x_next.values).all():
            raise NumericalDivergenceError(
                f"non-finite sample values after step {step}", step=step)

        self.per_step_active_pairs.append(self._step_active)
        self.per_step_total_pairs.append(self._step_total)
        if self.record_inputs:
            self.step_inputs.append(inputs_here)
        if self.record_routes:
            self.step_routes.append(routes_here)
        return x_next

    def run(self) -> RunResult:
        x = self.x0
        for step in range(self.cfg.num_steps):
            try:
                x = self._run_step(step, x)
            except NumericalDivergenceError:
                raise
            except NumericsError as exc:
                raise NumericalDivergenceError(
                    f"numerical failure inside step {step}: {exc}",
                    step=step) from exc
        return RunResult(
            final=x,
            timeline=self.timeline,
            staleness_records=self.staleness_records,
            strategy=self.strategy,
            policy=self.policy,
            seed=self.seed,
            model_hash=model_hash(self.model),
            x0_hash=_array_hash(self.x0.values),
            config=self.cfg,
            cluster=self.cluster,
            dispatch_bytes=self.dispatch_bytes,
            combine_bytes=self.combine_bytes,
            peak_buffer_bytes=self.peak_buffer_bytes,
            active_pairs=self.active_pairs,
            total_pairs=self.total_pairs,
            per_step_active_pairs=self.per_step_active_pairs,
            per_step_total_pairs=self.per_step_total_pairs,
            step_inputs=self.step_inputs if self.record_inputs else None,
            step_routes=self.step_routes if self.record_routes else None,
        )


def run_sampling(model: ToyModel, x0: ActivationBlock, strategy: Strategy,
                 policies: PolicyConfig, cluster: ClusterConfig, seed: int, *,
                 record_inputs: bool = False,
                 record_routes: bool = False) -> RunResult:
    """Execute a full sampling run and return its result bundle."""
    runner = ScheduleRunner(model, x0, strategy, policies, cluster, seed,
                            record_inputs=record_inputs,
                            record_routes=record_routes)
    return runner.run()
