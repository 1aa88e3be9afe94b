"""Command-line entry point: ``policyeval {evaluate,simulate,assign,pool-inspect}``."""
from __future__ import annotations

import argparse
import importlib
import itertools
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from . import __version__
from .assignment import InfeasibleAssignmentError, build_problem, offline_assign, online_assign
from .data import (
    DataError,
    EvaluationDataset,
    PolicyAssignment,
    ingest_dataset,
    observed_baseline,
    read_case_column,
    read_policy,
    read_predictions,
    write_policy,
)
from .estimators import UndefinedEstimateError, evaluate_all
from .pooling import build_pooling, pool_policy, pool_problem, resolve_pooled_assignment, write_pooling
from .propensity import (
    EMPIRICAL,
    PositivityError,
    PropensityModel,
    PropensityConfig,
    empirical_propensities,
    estimate_propensities,
    positivity_check,
    read_propensities,
)
from .report import (
    write_enumeration_records,
    write_gains_summary,
    write_mc_records,
    write_records,
    write_table,
)
from .simulation import Design, SyntheticConfig, enumerate_design, generate_population, monte_carlo

log = logging.getLogger("policyeval")

EXIT_DATA = 2
EXIT_POSITIVITY = 3
EXIT_INFEASIBLE = 4
EXIT_UNDEFINED = 5


class ConfigError(ValueError):
    pass


def read_kv_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _parse_pooling(value) -> float | None:
    if value is None or str(value).strip().lower() in ("", "off", "none", "no", "false"):
        return None
    return float(value)


@dataclass
class ScenarioConfig:
    individuals: str | None = None
    predictions: str | None = None
    policy: str | None = None
    capacities: str | None = None
    propensity: str = "empirical"
    propensity_file: str | None = None
    propensity_unit: str = "case"
    propensity_c: float = 1.0
    propensity_floor: float = 1e-3
    pooling: float | None = None
    assign: str = "given"
    arrival_column: str | None = None
    strategy: str = "greedy"
    floor: float = 0.0
    allow_positivity_violation: bool = False
    baseline: float | None = None
    out_dir: str = "."
    scenario: str = "scenario"
    seed: int | None = None

    @classmethod
    def from_mapping(cls, values: dict) -> "ScenarioConfig":
        cfg = cls()
        return cfg.updated(values)

    def updated(self, values: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(self)}
        changes = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if value is None:
                continue
            if key == "pooling":
                value = _parse_pooling(value)
            elif key in ("propensity_c", "propensity_floor", "floor", "baseline"):
                value = float(value)
            elif key == "seed":
                value = int(value)
            elif key == "allow_positivity_violation":
                value = _parse_bool(value)
            changes[key] = value
        return replace(self, **changes)

    def validate(self) -> None:
        for name in ("individuals", "predictions"):
            path = getattr(self, name)
            if path is None:
                raise ConfigError(f"missing required setting {name!r}")
        for name in ("individuals", "predictions", "policy", "capacities", "propensity_file"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name} file not found: {path}")
        if self.assign not in ("given", "offline", "online"):
            raise ConfigError(f"assign must be given, offline or online, got {self.assign!r}")
        if (self.assign == "given") != (self.policy is not None):
            raise ConfigError("exactly one policy source: a policy file with assign=given, or offline/online")
        if self.assign == "online" and not self.arrival_column:
            raise ConfigError("online assignment requires arrival_column")
        if self.propensity not in ("empirical", "estimated", "file"):
            raise ConfigError(f"propensity must be empirical, estimated or file, got {self.propensity!r}")
        if self.propensity == "file" and self.propensity_file is None:
            raise ConfigError("propensity=file requires propensity_file")


@dataclass
class ScenarioResult:
    scenario: str
    baseline: float
    reports: list
    records_path: Path
    table_path: Path


def _load(cfg: ScenarioConfig):
    exclude = [cfg.arrival_column] if cfg.arrival_column else []
    dataset = ingest_dataset(cfg.individuals, cfg.capacities, exclude_columns=exclude)
    predictions = read_predictions(cfg.predictions, dataset)
    if cfg.propensity == "empirical":
        props = empirical_propensities(dataset, cfg.propensity_unit)
    elif cfg.propensity == "estimated":
        if cfg.seed is None:
            raise ConfigError("--seed is required for estimated propensities")
        pconf = PropensityConfig(C=cfg.propensity_c, floor=cfg.propensity_floor, unit=cfg.propensity_unit, seed=cfg.seed)
        props = estimate_propensities(dataset, pconf)
    else:
        props = read_propensities(cfg.propensity_file, dataset, cfg.propensity_unit)
    return dataset, predictions, props


def _make_policy(cfg: ScenarioConfig, original: EvaluationDataset, dataset, predictions) -> PolicyAssignment:
    """Policy in the (possibly pooled) evaluation space."""
    arrival = None
    if cfg.assign == "online":
        arrival = read_case_column(cfg.individuals, cfg.arrival_column, original)
    problem = build_problem(dataset, predictions, arrival=arrival)
    if cfg.assign == "offline":
        return offline_assign(problem)
    return online_assign(problem, _load_strategy(cfg.strategy))


def _load_strategy(name: str):
    """``greedy`` or a ``module:function`` plugin."""
    if name == "greedy" or ":" not in name:
        return name
    module, attr = name.split(":", 1)
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load strategy {name!r}: {exc}") from exc


def run_evaluate(cfg: ScenarioConfig) -> ScenarioResult:
    cfg.validate()
    dataset, predictions, props = _load(cfg)
    baseline = observed_baseline(dataset) if cfg.baseline is None else cfg.baseline
    original = dataset
    pooling = None
    if cfg.pooling is not None:
        pooling = build_pooling(props, cfg.pooling)
        pooled = pool_problem(dataset, predictions, props, pooling)
        dataset, predictions, props = pooled.dataset, pooled.predictions, pooled.propensities
        if pooling.is_identity:
            pooling = None

    if cfg.assign == "given":
        policy = read_policy(cfg.policy, original)
        if pooling is not None:
            policy = pool_policy(policy, pooling, dataset)
    else:
        if pooling is not None and cfg.seed is None:
            raise ConfigError("--seed is required to resolve pooled assignments")
        policy = _make_policy(cfg, original, dataset, predictions)

    check = positivity_check(props, policy, dataset, cfg.floor)
    if not check.passed:
        if not cfg.allow_positivity_violation:
            raise PositivityError(check)
        log.warning("%s (overridden)", check.describe())

    reports = evaluate_all(
        dataset, props, predictions, policy,
        baseline=baseline, floor=cfg.floor, enforce_positivity=False, local_unit=cfg.propensity_unit,
    )

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records_path = out / f"{cfg.scenario}.records.csv"
    table_path = out / f"{cfg.scenario}.table.txt"
    write_records(records_path, cfg.scenario, reports)
    write_table(table_path, records_path, baseline, asdict(cfg), {r.estimator: r.flags for r in reports})
    if cfg.assign != "given":
        resolved = policy if pooling is None else resolve_pooled_assignment(policy, pooling, original, cfg.seed)
        write_policy(out / f"{cfg.scenario}.policy.csv", resolved, original)
    return ScenarioResult(cfg.scenario, baseline, reports, records_path, table_path)


def expand_grid(base: ScenarioConfig, grid: Sequence[str]) -> list[ScenarioConfig]:
    """Cartesian product of ``key=v1,v2`` overrides; names get ``_key-value`` suffixes."""
    axes = []
    for spec in grid:
        if "=" not in spec:
            raise ConfigError(f"grid entry must look like key=v1,v2: {spec!r}")
        key, values = spec.split("=", 1)
        axes.append([(key.strip().replace("-", "_"), v.strip()) for v in values.split(",")])
    if not axes:
        return [base]
    configs = []
    for combo in itertools.product(*axes):
        suffix = "_".join(f"{k}-{v}" for k, v in combo)
        cfg = base.updated(dict(combo))
        configs.append(replace(cfg, scenario=f"{base.scenario}_{suffix}"))
    return configs


def run_assign(cfg: ScenarioConfig, out: str | Path) -> PolicyAssignment:
    """Write the policy file for a given, offline or online policy (original location space)."""
    cfg.validate()
    dataset, predictions, props = _load(cfg)
    if cfg.assign == "given":
        policy = read_policy(cfg.policy, dataset)
    elif cfg.pooling is not None and not (pooling := build_pooling(props, cfg.pooling)).is_identity:
        if cfg.seed is None:
            raise ConfigError("--seed is required to resolve pooled assignments")
        pooled = pool_problem(dataset, predictions, props, pooling)
        pooled_policy = _make_policy(cfg, dataset, pooled.dataset, pooled.predictions)
        policy = resolve_pooled_assignment(pooled_policy, pooling, dataset, cfg.seed)
    else:
        policy = _make_policy(cfg, dataset, dataset, predictions)
    write_policy(out, policy, dataset)
    return policy


SIM_KEYS = {"mode", "R", "policy", "pooling", "n_jobs", "out", "mc_seed"}


def run_simulate(values: dict, seed: int, out: str | Path, mode: str | None = None, n_jobs: int = 1):
    """Population from the key-value settings, then enumeration or Monte Carlo."""
    values = dict(values)
    mode = mode or values.get("mode", "mc")
    values.setdefault("seed", str(seed))
    config = SyntheticConfig.from_mapping(values)
    pop = generate_population(config)
    problem = build_problem(pop.dataset, pop.predictions, arrival=range(pop.dataset.C))
    policy_kind = values.get("policy", "offline")
    if policy_kind == "offline":
        policy = offline_assign(problem)
    elif policy_kind == "online":
        policy = online_assign(problem)
    elif policy_kind == "observed":
        policy = PolicyAssignment.from_indices(pop.dataset, pop.dataset.case_A)
    elif policy_kind == "argmax":
        policy = PolicyAssignment.from_indices(pop.dataset, problem.case_rewards.argmax(axis=1))
    else:
        raise ConfigError(f"unknown simulation policy {policy_kind!r}")
    pooling = None
    threshold = _parse_pooling(values.get("pooling"))
    if threshold is not None:
        # membership from the design propensities, not the realized draw
        pooling = build_pooling(PropensityModel(EMPIRICAL, pop.dataset.location_ids, pop.pi), threshold)
    design = Design(pop.dataset, pop.table, pop.predictions, policy, pop.pi, pooling)
    if mode == "enumerate":
        result = enumerate_design(design)
        write_enumeration_records(out, result)
    elif mode == "mc":
        result = monte_carlo(design, int(values.get("R", 1000)), seed, n_jobs=int(values.get("n_jobs", n_jobs)))
        write_mc_records(out, result)
    else:
        raise ConfigError(f"mode must be 'mc' or 'enumerate', got {mode!r}")
    return result


def run_pool_inspect(individuals: str, threshold: float, unit: str, out: str | None) -> None:
    dataset = ingest_dataset(individuals)
    pooling = build_pooling(empirical_propensities(dataset, unit), threshold)
    write_pooling(sys.stdout if out is None else out, pooling)


def _scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file; command-line flags take precedence")
    p.add_argument("--individuals")
    p.add_argument("--predictions")
    p.add_argument("--policy", help="policy file (case_id,location)")
    p.add_argument("--capacities")
    p.add_argument("--propensity", choices=["empirical", "estimated", "file"])
    p.add_argument("--propensity-file")
    p.add_argument("--propensity-unit", choices=["case", "individual"])
    p.add_argument("--propensity-c", type=float, help="inverse regularization of the reference classifier")
    p.add_argument("--propensity-floor", type=float)
    p.add_argument("--pooling", help="'off' or a threshold such as 0.01")
    p.add_argument("--assign", choices=["given", "offline", "online"])
    p.add_argument("--arrival-column")
    p.add_argument("--strategy", help="'greedy' or a module:function online plugin")
    p.add_argument("--seed", type=int)


def _scenario_from_args(args) -> ScenarioConfig:
    values = read_kv_file(args.config) if args.config else {}
    cfg = ScenarioConfig.from_mapping(values)
    explicit = {name: getattr(args, name, None) for name in (f.name for f in fields(ScenarioConfig))}
    if getattr(args, "allow_positivity_violation", False):
        explicit["allow_positivity_violation"] = True
    if cfg.policy is not None and explicit.get("assign") not in (None, "given"):
        cfg = replace(cfg, policy=None)
    return cfg.updated(explicit)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="policyeval", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evaluate", help="estimate a policy's value with IPW, AIPW, AIPWl and model-based")
    _scenario_args(ev)
    ev.add_argument("--floor", type=float, help="positivity floor (violation if propensity <= floor)")
    ev.add_argument("--allow-positivity-violation", action="store_true")
    ev.add_argument("--baseline", type=float)
    ev.add_argument("--out-dir")
    ev.add_argument("--scenario")
    ev.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2")
    ev.add_argument("--jobs", type=int, default=1, help="scenarios evaluated concurrently")

    sm = sub.add_parser("simulate", help="synthetic design-based checks")
    sm.add_argument("--config", required=True)
    sm.add_argument("--seed", type=int, required=True)
    sm.add_argument("--mode", choices=["mc", "enumerate"])
    sm.add_argument("--n-jobs", type=int, default=1)
    sm.add_argument("--out", required=True)

    asg = sub.add_parser("assign", help="write a counterfactual policy file")
    _scenario_args(asg)
    asg.add_argument("--out", required=True)

    pi = sub.add_parser("pool-inspect", help="show the small-location pooling map")
    pi.add_argument("--individuals", required=True)
    pi.add_argument("--threshold", type=float, default=0.01)
    pi.add_argument("--propensity-unit", choices=["case", "individual"], default="case")
    pi.add_argument("--out")
    return parser


def _evaluate_many(configs: list[ScenarioConfig], jobs: int) -> list[ScenarioResult]:
    if jobs > 1 and len(configs) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_evaluate, configs))
    return [run_evaluate(cfg) for cfg in configs]


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.command == "evaluate":
            base = _scenario_from_args(args)
            configs = expand_grid(base, args.grid)
            results = _evaluate_many(configs, args.jobs)
            out_dir = Path(base.out_dir)
            write_gains_summary(out_dir / "gains_summary.csv", [(r.scenario, r.baseline, r.reports) for r in results])
            for r in results:
                print(r.table_path.read_text(encoding="utf-8").split("config:")[0], end="")
        elif args.command == "simulate":
            run_simulate(read_kv_file(args.config), args.seed, args.out, args.mode, args.n_jobs)
        elif args.command == "assign":
            run_assign(_scenario_from_args(args), args.out)
        elif args.command == "pool-inspect":
            run_pool_inspect(args.individuals, args.threshold, args.propensity_unit, args.out)
    except PositivityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_POSITIVITY
    except InfeasibleAssignmentError as exc:
        print(f"error: infeasible assignment: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except UndefinedEstimateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED
    except (DataError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
