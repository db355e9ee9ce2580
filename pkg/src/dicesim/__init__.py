"""Deterministic simulator for expert-parallel iterative denoising schedules.

The package couples a toy mixture-of-experts denoiser with a cluster timing
model and three execution schedules (synchronous, displaced, interweaved),
plus selective-synchronization and conditional-communication policies. Every
run is bit-reproducible from (model seed, input seed, strategy, policy,
cluster, run seed).
"""
from .calibration import calibrated_cluster, fit_cost_model, measured_share
from .cluster import ClusterConfig, Placement, SimTimeline, build_placement
from .errors import (ConfigurationError, ContractError,
                     NumericalDivergenceError, NumericsError,
                     OracleScaleError, SimulatorError)
from .metrics import (MetricsReport, build_report, emit, load_reports,
                      policy_label, relative_l2)
from .model import (ActivationBlock, ModelConfig, RouteDecision, ToyModel,
                    init_model, model_hash, preset, sample_x0, step_similarity)
from .oracle import OracleTrace, compare_traces, oracle_run, random_grid
from .policies import (NEUTRAL, CondStrategy, PolicyConfig, SyncStrategy,
                       TokenCache, dice_policy, is_sync_step,
                       select_sync_layers)
from .schedules import RunResult, StalenessRecord, Strategy, run_sampling

__version__ = "0.1.0"

__all__ = [
    "ActivationBlock", "ClusterConfig", "CondStrategy", "ConfigurationError",
    "ContractError", "MetricsReport", "ModelConfig", "NEUTRAL",
    "NumericalDivergenceError", "NumericsError", "OracleScaleError",
    "OracleTrace", "Placement", "PolicyConfig", "RouteDecision", "RunResult",
    "SimTimeline", "SimulatorError", "StalenessRecord", "Strategy",
    "SyncStrategy", "TokenCache", "ToyModel", "build_placement",
    "build_report", "calibrated_cluster", "compare_traces", "dice_policy",
    "emit", "fit_cost_model", "init_model", "is_sync_step", "load_reports",
    "measured_share", "model_hash", "oracle_run", "policy_label", "preset",
    "random_grid", "relative_l2", "run_sampling", "sample_x0",
    "select_sync_layers", "step_similarity",
]
