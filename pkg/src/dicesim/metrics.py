"""Run aggregation and report serialization.

Turns raw run results into comparable reports — divergence against a
synchronous baseline, staleness statistics, wire bytes, buffer peaks,
makespan, and speedup — and writes them as CSV or JSON with byte-stable
formatting.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .policies import CondStrategy, PolicyConfig, SyncStrategy
from .schedules import RunResult, Strategy

SCHEMA_VERSION = 1

# Stable CSV column order; documented in the README.
CSV_COLUMNS = (
    "strategy", "policy", "seed", "batch", "num_tokens", "num_layers",
    "divergence", "staleness_histogram", "total_comm_bytes", "dispatch_bytes",
    "combine_bytes", "peak_buffer_bytes", "makespan_seconds",
    "comm_stall_seconds", "comm_time_fraction", "speedup_vs_sync",
    "active_pairs", "total_pairs", "model_hash",
)


@dataclass(frozen=True)
class MetricsReport:
    strategy: str
    policy: str
    seed: int
    batch: int
    num_tokens: int
    num_layers: int
    divergence: float
    staleness_histogram: dict
    total_comm_bytes: int
    dispatch_bytes: int
    combine_bytes: int
    peak_buffer_bytes: int
    makespan_seconds: float
    comm_stall_seconds: float
    comm_time_fraction: float
    speedup_vs_sync: float
    active_pairs: int
    total_pairs: int
    model_hash: str


def policy_label(policy: PolicyConfig) -> str:
    """Compact deterministic descriptor of a policy configuration."""
    parts = [f"sync={policy.sync_strategy.value}"]
    if policy.sync_strategy is SyncStrategy.EXPLICIT:
        layers = ":".join(str(l) for l in sorted(policy.explicit_layers))
        parts.append(f"layers={layers}")
    parts.append(f"cond={policy.cond_strategy.value}")
    if policy.cond_strategy is not CondStrategy.OFF:
        parts.append(f"R={policy.refresh_interval}")
        if policy.cond_seed is not None:
            parts.append(f"cseed={policy.cond_seed}")
        if policy.strict_refresh:
            parts.append("strict")
    parts.append(f"W={policy.warmup}")
    period = "inf" if math.isinf(policy.period) else str(int(policy.period))
    parts.append(f"P={period}")
    return ",".join(parts)


def relative_l2(values: np.ndarray, reference: np.ndarray) -> float:
    """||values - reference||_2 / ||reference||_2 over flattened arrays."""
    if values.shape != reference.shape:
        raise ContractError(
            f"relative_l2: shapes {values.shape} vs {reference.shape}")
    ref_norm = float(np.linalg.norm(reference))
    diff_norm = float(np.linalg.norm(values - reference))
    if ref_norm == 0.0:
        return 0.0 if diff_norm == 0.0 else math.inf
    return diff_norm / ref_norm


def build_report(result: RunResult, baseline: RunResult) -> MetricsReport:
    """Aggregate one run against its synchronous baseline."""
    if baseline.strategy is not Strategy.SYNCHRONOUS:
        raise ContractError(
            f"baseline must be synchronous, got {baseline.strategy}")
    for attr in ("model_hash", "x0_hash", "seed", "config", "cluster"):
        if getattr(result, attr) != getattr(baseline, attr):
            raise ContractError(
                f"baseline mismatch on {attr}: run has "
                f"{getattr(result, attr)!r}, baseline has "
                f"{getattr(baseline, attr)!r}")
    makespan = float(result.makespan_seconds)
    stall = float(result.comm_stall_seconds)
    return MetricsReport(
        strategy=result.strategy.value,
        policy=policy_label(result.policy),
        seed=int(result.seed),
        batch=int(result.config.batch),
        num_tokens=int(result.config.num_tokens),
        num_layers=int(result.config.num_layers),
        divergence=relative_l2(result.final.values, baseline.final.values),
        staleness_histogram={int(k): int(v)
                             for k, v in result.staleness_histogram().items()},
        total_comm_bytes=int(result.total_comm_bytes),
        dispatch_bytes=int(result.dispatch_bytes),
        combine_bytes=int(result.combine_bytes),
        peak_buffer_bytes=int(result.peak_buffer_bytes),
        makespan_seconds=makespan,
        comm_stall_seconds=stall,
        comm_time_fraction=stall / makespan if makespan > 0.0 else 0.0,
        speedup_vs_sync=(float(baseline.makespan_seconds) / makespan
                         if makespan > 0.0 else 0.0),
        active_pairs=int(result.active_pairs),
        total_pairs=int(result.total_pairs),
        model_hash=result.model_hash,
    )


def _histogram_json(histogram: dict) -> str:
    return json.dumps({str(k): v for k, v in sorted(histogram.items())},
                      separators=(",", ":"))


def _csv_cell(column: str, value):
    if column == "staleness_histogram":
        return _histogram_json(value)
    if isinstance(value, float):
        return repr(value)
    return value


def emit(reports, fmt: str, path) -> None:
    """Write reports to ``path`` as ``csv`` or ``json``, byte-stable."""
    if fmt not in ("csv", "json"):
        raise ContractError(f"format must be csv or json, got {fmt!r}")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for report in reports:
                record = asdict(report)
                writer.writerow([_csv_cell(col, record[col])
                                 for col in CSV_COLUMNS])
    else:
        payload = {"schema_version": SCHEMA_VERSION,
                   "reports": [asdict(report) for report in reports]}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_reports(path) -> list:
    """Read back a JSON report file as MetricsReport objects."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ContractError(
            f"unsupported report schema {payload.get('schema_version')!r}")
    reports = []
    for record in payload["reports"]:
        record = dict(record)
        record["staleness_histogram"] = {
            int(k): int(v) for k, v in record["staleness_histogram"].items()}
        reports.append(MetricsReport(**record))
    return reports
