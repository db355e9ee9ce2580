"""Cost-model calibration for the synchronous communication share.

The default cluster constants are chosen so that a synchronous run's
all-to-all time share matches target fractions at three batch sizes
(the share grows with batch because per-op fixed overhead makes compute
scale sublinearly while wire bytes scale linearly).

With ``alpha = 0`` the synchronous per-step times decompose as::

    comm(b)    = beta * M_b            # sum over collectives of max bytes
    compute(b) = (E_b + n_ops * omega) / compute_rate

where ``E_b`` are the modeled per-device elements per step, ``n_ops`` the
per-device op count per step, and ``omega`` the per-op overhead in
elements. Writing ``q_b = share_b / (1 - share_b)`` turns the share
targets into equations linear in ``(beta * compute_rate, omega)``, solved
by least squares over the three batch points.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .cluster import (DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_COMPUTE_RATE,
                      DEFAULT_NUM_DEVICES, DEFAULT_OP_OVERHEAD, ClusterConfig)
from .model import init_model, preset, sample_x0
from .policies import NEUTRAL
from .schedules import Strategy, run_sampling

TARGET_SHARES = {4: 0.617, 8: 0.698, 16: 0.733}
PROBE_STEPS = 4
PROBE_SEED = 0


@dataclass(frozen=True)
class CalibrationPoint:
    """Per-step synchronous profile of one batch size."""
    batch: int
    elems_per_step: float      # modeled compute elements per device
    max_bytes_per_step: float  # sum over collectives of the slowest member
    ops_per_step: int          # charge operations per device


@dataclass(frozen=True)
class CalibrationResult:
    alpha: float
    beta: float
    op_overhead_elements: int
    compute_rate: float
    points: tuple
    target_shares: dict
    fitted_shares: dict


def measure_profile(batch: int, devices: int = DEFAULT_NUM_DEVICES,
                    steps: int = PROBE_STEPS) -> CalibrationPoint:
    """Probe a synchronous run with unit wire cost and no op overhead."""
    cfg = preset("xl-toy", batch=batch, num_steps=steps)
    model = init_model(cfg, seed=PROBE_SEED)
    x0 = sample_x0(cfg, seed=PROBE_SEED)
    probe = ClusterConfig(num_devices=devices, alpha=0.0, beta=1.0,
                          bytes_per_element=2, compute_rate=1.0,
                          op_overhead_elements=0)
    res = run_sampling(model, x0, Strategy.SYNCHRONOUS, NEUTRAL, probe,
                       PROBE_SEED)
    tl = res.timeline
    ops = sum(1 for e in tl.events if e.kind == "compute" and e.device == 0)
    return CalibrationPoint(
        batch=batch,
        elems_per_step=tl.compute_seconds(0) / steps,
        max_bytes_per_step=tl.stall_seconds(0) / steps,
        ops_per_step=ops // steps,
    )


def predicted_share(point: CalibrationPoint, beta: float, overhead: float,
                    compute_rate: float, alpha: float = 0.0,
                    collectives_per_step: int | None = None) -> float:
    comm = beta * point.max_bytes_per_step
    if alpha:
        n_coll = (collectives_per_step if collectives_per_step is not None
                  else 2 * point.ops_per_step)
        comm += alpha * n_coll
    compute = (point.elems_per_step + point.ops_per_step * overhead) / compute_rate
    return comm / (comm + compute)


def fit_cost_model(targets: dict = None,
                   devices: int = DEFAULT_NUM_DEVICES,
                   compute_rate: float = DEFAULT_COMPUTE_RATE) -> CalibrationResult:
    """Least-squares fit of (beta, op overhead) to the share targets."""
    targets = dict(TARGET_SHARES if targets is None else targets)
    points = tuple(measure_profile(b, devices) for b in sorted(targets))
    rows, rhs = [], []
    for pt in points:
        share = targets[pt.batch]
        q = share / (1.0 - share)
        rows.append([pt.max_bytes_per_step, -q * pt.ops_per_step])
        rhs.append(q * pt.elems_per_step)
    solution, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs),
                                   rcond=None)
    beta_rate, overhead = float(solution[0]), float(solution[1])
    beta = beta_rate / compute_rate
    overhead_int = max(0, round(overhead))
    fitted = {pt.batch: predicted_share(pt, beta, overhead_int, compute_rate)
              for pt in points}
    return CalibrationResult(alpha=0.0, beta=beta,
                             op_overhead_elements=overhead_int,
                             compute_rate=compute_rate, points=points,
                             target_shares=targets, fitted_shares=fitted)


def calibrated_cluster(devices: int = DEFAULT_NUM_DEVICES,
                       **overrides) -> ClusterConfig:
    """Cluster built from the baked default calibration."""
    base = dict(num_devices=devices, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA,
                bytes_per_element=2, compute_rate=DEFAULT_COMPUTE_RATE,
                op_overhead_elements=DEFAULT_OP_OVERHEAD)
    base.update(overrides)
    return ClusterConfig(**base)


def measured_share(batch: int, cluster: ClusterConfig | None = None,
                   steps: int = PROBE_STEPS) -> float:
    """All-to-all share of a real synchronous run under a cluster config."""
    cluster = calibrated_cluster() if cluster is None else cluster
    cfg = preset("xl-toy", batch=batch, num_steps=steps)
    model = init_model(cfg, seed=PROBE_SEED)
    x0 = sample_x0(cfg, seed=PROBE_SEED)
    res = run_sampling(model, x0, Strategy.SYNCHRONOUS, NEUTRAL, cluster,
                       PROBE_SEED)
    return res.comm_stall_seconds / res.makespan_seconds
