"""Command-line entry point.

Subcommands
-----------
run       One experiment against a synchronous baseline; writes a report.
compare   Synchronous / displaced / interweaved / full policy stack on one
          model; writes a combined four-row report.
sweep     Cross product over axis lists from the ``[sweep]`` table; merges all
          rows into one report, independent of ``--jobs``.
validate  Replays a randomized configuration grid through the reference
          interpreter and checks the engine bit-matches it.

Configuration is TOML::

    schema_version = 1

    [model]                 # preset plus field overrides, or bare fields
    preset = "xl-toy"
    batch = 4

    [cluster]               # omitted fields fall back to the calibrated link
    num_devices = 8

    [run]
    strategy = "interweaved"
    seed = 0                # fallback: DICE_SIM_SEED env var, then 0

    [policy]
    sync_strategy = "deep"
    cond_strategy = "low_score"
    refresh_interval = 5
    warmup = 6
    period = 10             # "inf" disables periodic synchronization

    [sweep]                 # only read by the sweep subcommand
    batch = [4, 8, 16]
    strategy = ["synchronous", "interweaved"]

Overrides use repeatable ``--set section.key=value`` flags whose values parse
as TOML literals (bare words become strings). Exit codes: 0 success, 1
validation mismatch, 2 configuration error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:                       # Python < 3.11
    import tomli as tomllib

from .calibration import calibrated_cluster
from .cluster import ClusterConfig
from .errors import (ConfigurationError, ContractError, NumericsError,
                     SimulatorError)
from .metrics import build_report, emit, policy_label
from .model import ModelConfig, init_model, preset, sample_x0
from .oracle import compare_traces, oracle_run, random_grid
from .policies import NEUTRAL, CondStrategy, PolicyConfig, SyncStrategy, dice_policy
from .schedules import Strategy, run_sampling

CONFIG_SCHEMA_VERSION = 1

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_CLUSTER_FIELDS = {f.name for f in dataclasses.fields(ClusterConfig)}
_POLICY_FIELDS = {f.name for f in dataclasses.fields(PolicyConfig)}
_SWEEP_AXES = ("batch", "num_tokens", "refresh_interval", "period", "warmup",
               "strategy")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """One fully resolved experiment: what to run and with which knobs."""
    model: ModelConfig
    cluster: ClusterConfig
    strategy: Strategy
    policy: PolicyConfig
    seed: int
    sweep_axes: dict


# ---------------------------------------------------------------------------
# config loading


def _parse_literal(text: str):
    """Parse an override value as a TOML literal; bare words become strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(config: dict, pairs: list) -> dict:
    """Apply ``section.key=value`` overrides onto a parsed config dict."""
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override {pair!r} is not KEY=VALUE")
        node = config
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(
                    f"override {pair!r} descends into non-table {part!r}")
        node[parts[-1]] = _parse_literal(raw)
    return config


def load_config(path, overrides: list = ()) -> dict:
    try:
        with open(path, "rb") as handle:
            config = tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid TOML: {exc}") from exc
    except OSError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    config = apply_overrides(config, list(overrides))
    version = config.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigurationError(
            f"unsupported schema_version {version!r}; this build reads "
            f"{CONFIG_SCHEMA_VERSION}")
    return config


def _check_keys(section: str, table: dict, allowed) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigurationError(
            f"[{section}] has unknown keys {unknown}; allowed: {sorted(allowed)}")


def _model_from(table: dict) -> ModelConfig:
    table = dict(table)
    name = table.pop("preset", None)
    _check_keys("model", table, _MODEL_FIELDS)
    try:
        if name is not None:
            return preset(name, **table)
        return ModelConfig(**table)
    except TypeError as exc:
        raise ConfigurationError(f"[model]: {exc}") from exc


def _cluster_from(table: dict) -> ClusterConfig:
    _check_keys("cluster", table, _CLUSTER_FIELDS)
    devices = table.get("num_devices")
    rest = {k: v for k, v in table.items() if k != "num_devices"}
    if devices is None:
        return calibrated_cluster(**rest)
    return calibrated_cluster(devices=devices, **rest)


def _enum_from(enum_cls, value, field: str):
    try:
        return enum_cls(str(value).lower())
    except ValueError:
        choices = sorted(member.value for member in enum_cls)
        raise ConfigurationError(
            f"{field} must be one of {choices}, got {value!r}") from None


def _policy_from(table: dict) -> PolicyConfig:
    table = dict(table)
    _check_keys("policy", table, _POLICY_FIELDS)
    if "sync_strategy" in table:
        table["sync_strategy"] = _enum_from(SyncStrategy, table["sync_strategy"],
                                            "policy.sync_strategy")
    if "cond_strategy" in table:
        table["cond_strategy"] = _enum_from(CondStrategy, table["cond_strategy"],
                                            "policy.cond_strategy")
    if "explicit_layers" in table:
        layers = table["explicit_layers"]
        if not isinstance(layers, list):
            raise ConfigurationError("policy.explicit_layers must be a list")
        table["explicit_layers"] = frozenset(int(v) for v in layers)
    if isinstance(table.get("period"), str):
        if table["period"].lower() != "inf":
            raise ConfigurationError(
                f"policy.period must be a number or \"inf\", got {table['period']!r}")
        table["period"] = math.inf
    try:
        return PolicyConfig(**table)
    except TypeError as exc:
        raise ConfigurationError(f"[policy]: {exc}") from exc


def resolve_seed(table: dict, env: dict | None = None) -> int:
    """Seed priority: [run] seed, then DICE_SIM_SEED, then 0."""
    env = os.environ if env is None else env
    if "seed" in table:
        return int(table["seed"])
    raw = env.get("DICE_SIM_SEED")
    if raw is not None:
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(
                f"DICE_SIM_SEED must be an integer, got {raw!r}") from None
    return 0


def build_experiment(config: dict) -> ExperimentConfig:
    known = {"schema_version", "model", "cluster", "run", "policy", "sweep"}
    _check_keys("<top level>", config, known)
    run_table = dict(config.get("run", {}))
    _check_keys("run", run_table, {"strategy", "seed"})
    strategy = _enum_from(Strategy, run_table.get("strategy", "synchronous"),
                          "run.strategy")
    sweep = dict(config.get("sweep", {}))
    _check_keys("sweep", sweep, _SWEEP_AXES)
    for axis, values in sweep.items():
        if not isinstance(values, list) or not values:
            raise ConfigurationError(f"sweep.{axis} must be a non-empty list")
    return ExperimentConfig(
        model=_model_from(config.get("model", {})),
        cluster=_cluster_from(config.get("cluster", {})),
        strategy=strategy,
        policy=_policy_from(config.get("policy", {})),
        seed=resolve_seed(run_table),
        sweep_axes=sweep,
    )


# ---------------------------------------------------------------------------
# shared execution helpers


def _execute(exp: ExperimentConfig, *, timeline_dir=None, timeline_tag=""):
    """Run one experiment plus its synchronous baseline; return the report."""
    model = init_model(exp.model, seed=exp.seed)
    x0 = sample_x0(exp.model, seed=exp.seed)
    baseline = run_sampling(model, x0, Strategy.SYNCHRONOUS, NEUTRAL,
                            exp.cluster, exp.seed)
    if exp.strategy is Strategy.SYNCHRONOUS and exp.policy == NEUTRAL:
        result = baseline
    else:
        result = run_sampling(model, x0, exp.strategy, exp.policy,
                              exp.cluster, exp.seed)
    if timeline_dir is not None:
        name = f"timeline_{timeline_tag}.json" if timeline_tag else "timeline.json"
        (Path(timeline_dir) / name).write_text(result.timeline.to_json() + "\n")
    return build_report(result, baseline)


def _write_reports(reports: list, out_dir, name: str, fmt: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.{fmt}"
    emit(reports, fmt, path)
    return path


def _summarize(reports: list, stream=None) -> None:
    stream = sys.stdout if stream is None else stream
    header = f"{'strategy':<12} {'policy':<44} {'divergence':>12} " \
             f"{'makespan_s':>12} {'speedup':>8}"
    print(header, file=stream)
    for rep in reports:
        print(f"{rep.strategy:<12} {rep.policy:<44} {rep.divergence:>12.3e} "
              f"{rep.makespan_seconds:>12.6f} {rep.speedup_vs_sync:>8.3f}",
              file=stream)


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    exp = build_experiment(load_config(args.config, args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = _execute(exp, timeline_dir=out if args.timeline else None)
    path = _write_reports([report], out, "report", args.format)
    _summarize([report])
    print(f"wrote {path}", file=sys.stderr)
    return 0


COMPARE_VARIANTS = (
    (Strategy.SYNCHRONOUS, NEUTRAL, "synchronous"),
    (Strategy.DISPLACED, NEUTRAL, "displaced"),
    (Strategy.INTERWEAVED, NEUTRAL, "interweaved"),
    (Strategy.INTERWEAVED, dice_policy(), "dice"),
)


def cmd_compare(args) -> int:
    exp = build_experiment(load_config(args.config, args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for strategy, policy, tag in COMPARE_VARIANTS:
        variant = dataclasses.replace(exp, strategy=strategy, policy=policy)
        reports.append(_execute(variant,
                                timeline_dir=out if args.timeline else None,
                                timeline_tag=tag))
    path = _write_reports(reports, out, "compare", args.format)
    _summarize(reports)
    print(f"wrote {path}", file=sys.stderr)
    return 0


def expand_sweep(exp: ExperimentConfig) -> list:
    """Cross product of the sweep axes, ordered by axis name then value order.

    Axis names are sorted alphabetically; within each axis the configured
    value order is kept; the rightmost axis varies fastest.
    """
    axes = sorted(exp.sweep_axes)
    if not axes:
        return [exp]
    points = []
    for combo in itertools.product(*(exp.sweep_axes[a] for a in axes)):
        model, policy, strategy = exp.model, exp.policy, exp.strategy
        for axis, value in zip(axes, combo):
            if axis in ("batch", "num_tokens"):
                model = dataclasses.replace(model, **{axis: int(value)})
            elif axis == "strategy":
                strategy = _enum_from(Strategy, value, "sweep.strategy")
            elif axis == "period":
                policy = dataclasses.replace(
                    policy, period=math.inf if value == "inf" else float(value))
            else:
                policy = dataclasses.replace(policy, **{axis: int(value)})
        points.append(dataclasses.replace(exp, model=model, policy=policy,
                                          strategy=strategy, sweep_axes={}))
    return points


def cmd_sweep(args) -> int:
    exp = build_experiment(load_config(args.config, args.set))
    points = expand_sweep(exp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    timeline_dir = out if args.timeline else None

    def job(indexed):
        index, point = indexed
        return _execute(point, timeline_dir=timeline_dir,
                        timeline_tag=f"{index:03d}")

    if args.jobs <= 1:
        reports = [job(item) for item in enumerate(points)]
    else:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(job, enumerate(points)))
    path = _write_reports(reports, out, "sweep", args.format)
    _summarize(reports)
    print(f"wrote {path} ({len(reports)} rows)", file=sys.stderr)
    return 0


def cmd_validate(args) -> int:
    seed = args.seed
    if seed is None:
        seed = resolve_seed({})
    grid = random_grid(args.grid_size, seed=seed)
    for index, (cfg, strategy, policy, run_seed, devices) in enumerate(grid):
        model = init_model(cfg, seed=run_seed)
        x0 = sample_x0(cfg, seed=run_seed)
        trace = oracle_run(model, x0, strategy, policy, seed=run_seed,
                           _staleness_skew=args.inject_staleness_skew)
        result = run_sampling(model, x0, strategy, policy,
                              calibrated_cluster(devices=devices), run_seed,
                              record_inputs=True)
        outcome = compare_traces(result, trace, check_inputs=True)
        if outcome.first_divergence is not None:
            print(f"configuration {index}/{len(grid)} diverged at "
                  f"{outcome.first_divergence} "
                  f"(max |diff| {outcome.max_abs_diff:.6e}): "
                  f"strategy={strategy.value} policy={policy_label(policy)} "
                  f"seed={run_seed} devices={devices} model={cfg}",
                  file=sys.stderr)
            return 1
    print(f"validated {len(grid)} configurations: engine matches the "
          f"reference interpreter bit-exactly")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser, *, jobs: bool = False) -> None:
    parser.add_argument("--config", required=True, help="TOML experiment config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (repeatable), e.g. "
                             "--set model.batch=16")
    parser.add_argument("--out", default=".", metavar="DIR",
                        help="directory for report files (default: .)")
    parser.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="report file format (default: csv)")
    parser.add_argument("--timeline", action="store_true",
                        help="also export per-run timeline JSON files")
    if jobs:
        parser.add_argument("--jobs", type=int, default=1, metavar="N",
                            help="parallel sweep workers; results are "
                                 "byte-identical at any value (default: 1)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dicesim",
        description="Deterministic simulator for expert-parallel iterative "
                    "denoising schedules.")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("run", help="run one experiment"))
    _add_common(sub.add_parser("compare",
                               help="compare schedule variants on one model"))
    _add_common(sub.add_parser("sweep", help="run a parameter sweep"),
                jobs=True)

    val = sub.add_parser("validate",
                         help="check the engine against the reference "
                              "interpreter on a random grid")
    val.add_argument("--grid-size", type=int, default=256, metavar="N",
                     help="number of sampled configurations (default: 256)")
    val.add_argument("--seed", type=int, default=None,
                     help="grid sampling seed (default: DICE_SIM_SEED or 0)")
    val.add_argument("--inject-staleness-skew", type=int, default=0,
                     help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    handlers = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep,
                "validate": cmd_validate}
    try:
        return handlers[args.command](args)
    except NumericsError as exc:
        step = getattr(exc, "step", None)
        where = f" at step {step}" if step is not None else ""
        print(f"numerical divergence{where}: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, ContractError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SimulatorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
