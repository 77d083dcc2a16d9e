"""Ensemble runs, bound-coverage tests, convergence sweeps and report files."""

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from fkpm.application import particle_engine
from fkpm.application.backward_smoother import (
    AdditiveFunctional,
    TrajectoryStore,
    smoothed_additive,
)
from fkpm.application.concentration_bounds import (
    TailCurve,
    backward_tail,
    free_energy_tail,
    genealogical_tail,
    marginal_tail,
    uniform_marginal_tail,
)
from fkpm.application.errors import InvalidCertificate, InvalidModel
from fkpm.application.fk_core import (
    FeynmanKacModel,
    exact_flow,
    load_model,
    log_normalizing_constant,
    path_marginals_exact,
)
from fkpm.application.model_zoo import ZOO, ZooModel, build
from fkpm.application.semigroup_analysis import (
    certify_H0,
    certify_Hm,
    contraction_profile,
    density_ratio_certificate,
)
from fkpm.infrastructure.config import get_settings
from fkpm.infrastructure.models import ExperimentConfig

logger = logging.getLogger(__name__)

SELF_REFERENCE_FACTOR = 64
SELF_REFERENCE_SEED_OFFSET = 1_000_003
LOG_Z = "log_Z"


@dataclass
class EnsembleRow:
    replicate: int
    N: int
    seed: int
    functional: str
    estimate: float
    reference: float
    deviation: float
    reference_kind: str


@dataclass
class CoverageRow:
    x: float
    sign: int
    N: int
    functional: str
    violations: int
    replicates: int
    frequency: float
    floor: float
    slack: float
    passed: bool


@dataclass
class CoverageReport:
    which: str
    rows: List[CoverageRow]

    @property
    def verdict(self) -> bool:
        return all(row.passed for row in self.rows)


@dataclass
class SweepPoint:
    N: int
    functional: str
    rmse: float


@dataclass
class SweepReport:
    points: List[SweepPoint]
    slopes: Dict[str, Optional[float]] = field(default_factory=dict)
    intercepts: Dict[str, Optional[float]] = field(default_factory=dict)
    notes: Dict[str, str] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    table: List[EnsembleRow]
    coverage: Optional[CoverageReport] = None
    sweep: Optional[SweepReport] = None

    @property
    def verdict(self) -> bool:
        return self.coverage is None or self.coverage.verdict


def resolve_model(ref: str) -> Tuple[FeynmanKacModel, Optional[ZooModel]]:
    """A zoo name or a path to a model JSON file."""
    if ref in ZOO:
        zoo = build(ref)
        return zoo.model, zoo
    if Path(ref).is_file():
        return load_model(ref), None
    raise InvalidModel(f"{ref!r} is neither a zoo model nor a model file")


def _functional_names(config: ExperimentConfig, model: FeynmanKacModel) -> List[str]:
    if config.estimator == "free_energy":
        return [LOG_Z]
    missing = [f for f in config.functionals if f not in model.functionals]
    if missing:
        raise InvalidModel(f"unknown functionals: {', '.join(missing)}")
    return list(config.functionals)


def _check_oscillation(model: FeynmanKacModel, names: Sequence[str]) -> None:
    if not model.is_finite:
        return
    states = np.arange(model.size(0))
    for name in names:
        if name == LOG_Z:
            continue
        values = np.asarray(model.functionals[name](states), dtype=float)
        if values.max() - values.min() > 1.0 + 1e-12:
            raise InvalidModel(f"functional {name!r} has oscillation above 1")


def estimate_once(
    model: FeynmanKacModel,
    estimator: str,
    names: Sequence[str],
    N: int,
    seed: int,
    horizon: int,
    epsilon: Optional[float] = None,
) -> Dict[str, float]:
    """One replicate of ``estimator`` for every functional in ``names``."""
    needs_tree = estimator in ("tree", "backward")
    result = particle_engine.run(
        model, N, seed, horizon=horizon, epsilon=epsilon,
        retain_genealogy=needs_tree, functionals=[],
    )
    pop = result.population
    if estimator == "free_energy":
        return {LOG_Z: pop.log_free_energy}
    if estimator == "marginal":
        eta = particle_engine.occupation_measure(pop)
        return {f: eta.integrate(model.functionals[f]) for f in names}
    if estimator == "tree":
        lines = particle_engine.ancestral_lines(pop).support
        return {
            f: float(np.mean([model.functionals[f](lines[:, p]).mean() for p in range(horizon + 1)]))
            for f in names
        }
    store = TrajectoryStore.from_population(
        model, pop, cache_densities=get_settings().cache_densities
    )
    return {
        f: smoothed_additive(store, AdditiveFunctional.stationary(model.functionals[f], horizon))
        for f in names
    }


def _oracle_value(
    model: FeynmanKacModel, zoo: Optional[ZooModel], estimator: str, name: str, n: int
) -> Optional[float]:
    if model.is_finite:
        if estimator == "free_energy":
            return log_normalizing_constant(model, n)
        if estimator == "marginal":
            return exact_flow(model, n)[-1].integrate(model.functionals[name])
        marginals = path_marginals_exact(model, n)
        return float(np.mean([m.integrate(model.functionals[name]) for m in marginals]))
    if zoo is None:
        return None
    if zoo.oracle == "kalman" and estimator == "marginal" and name in ("x0", "x0_sq"):
        mean = zoo.references["predicted_means"].value[n][0]
        if name == "x0":
            return float(mean)
        return float(zoo.references["predicted_covs"].value[n][0, 0] + mean**2)
    if "saw_probability" in zoo.references and estimator == "free_energy":
        # Z_n is the probability of avoiding up to time n-1
        probs = zoo.references["saw_probability"].value
        return math.log(probs[n - 1]) if n >= 1 else 0.0
    return None


def _references(
    config: ExperimentConfig,
    model: FeynmanKacModel,
    zoo: Optional[ZooModel],
    names: Sequence[str],
    horizon: int,
) -> Dict[str, Tuple[float, str]]:
    refs = {}
    missing = []
    for name in names:
        value = _oracle_value(model, zoo, config.estimator, name, horizon)
        if value is None:
            missing.append(name)
        else:
            refs[name] = (value, "oracle")
    if missing:
        n_ref = SELF_REFERENCE_FACTOR * max(config.n_particles)
        logger.info("no oracle for %s; self-reference at N=%d", ", ".join(missing), n_ref)
        values = estimate_once(
            model, config.estimator, missing, n_ref,
            config.seed + SELF_REFERENCE_SEED_OFFSET, horizon, config.epsilon,
        )
        for name in missing:
            refs[name] = (values[name], f"self-reference N_ref={n_ref}")
    return refs


def _deviation(estimator: str, estimate: float, reference: float, horizon: int) -> float:
    if estimator == "free_energy":
        # (1/n) log(Z_n^N / Z_n)
        return (estimate - reference) / max(horizon, 1)
    return estimate - reference


def run_ensemble(config: ExperimentConfig) -> List[EnsembleRow]:
    """R replicates per N with seeds seed+r, ordered by (N, replicate, functional)."""
    model, zoo = resolve_model(config.model)
    horizon = model.horizon if config.horizon is None else config.horizon
    if horizon > model.horizon:
        raise InvalidModel(f"horizon {horizon} exceeds the model horizon {model.horizon}")
    names = _functional_names(config, model)
    if config.bound is not None:
        _check_oscillation(model, names)
    refs = _references(config, model, zoo, names, horizon)
    threads = get_settings().threads

    def replicate(job: Tuple[int, int]) -> Dict[str, float]:
        N, r = job
        return estimate_once(model, config.estimator, names, N, config.seed + r, horizon, config.epsilon)

    jobs = [(N, r) for N in config.n_particles for r in range(config.replicates)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        outcomes = list(pool.map(replicate, jobs))

    rows = []
    for (N, r), values in zip(jobs, outcomes):
        for name in names:
            reference, kind = refs[name]
            rows.append(
                EnsembleRow(
                    replicate=r,
                    N=N,
                    seed=config.seed + r,
                    functional=name,
                    estimate=values[name],
                    reference=reference,
                    deviation=_deviation(config.estimator, values[name], reference, horizon),
                    reference_kind=kind,
                )
            )
    logger.info(
        "ensemble %s/%s: %d replicates x %d sizes on %d threads",
        config.model, config.estimator, config.replicates, len(config.n_particles), threads,
    )
    return rows


def coverage_slack(floor: float, replicates: int) -> float:
    return 3.0 * math.sqrt(floor * (1.0 - floor) / replicates)


def coverage_test(
    config: ExperimentConfig,
    tail_curve: Union[TailCurve, Callable[[int], TailCurve]],
    table: Optional[List[EnsembleRow]] = None,
) -> CoverageReport:
    """Count replicates whose signed deviation exceeds bound(x) at each grid x.

    ``tail_curve`` is either one curve or a factory called with N.
    """
    table = run_ensemble(config) if table is None else table
    signs = (1, -1) if config.estimator == "free_energy" else (1,)
    rows = []
    groups: Dict[Tuple[int, str], List[float]] = {}
    for row in table:
        groups.setdefault((row.N, row.functional), []).append(row.deviation)
    for (N, name), deviations in groups.items():
        curve = tail_curve if isinstance(tail_curve, TailCurve) else tail_curve(N)
        dev = np.asarray(deviations, dtype=float)
        R = len(dev)
        for sign in signs:
            for x in config.x_grid:
                bound = curve(x)
                violations = int(np.sum(sign * dev > bound))
                floor = math.exp(-x)
                slack = coverage_slack(floor, R)
                frequency = violations / R
                rows.append(
                    CoverageRow(
                        x=x, sign=sign, N=N, functional=name, violations=violations,
                        replicates=R, frequency=frequency, floor=floor, slack=slack,
                        passed=frequency <= floor + slack,
                    )
                )
    report = CoverageReport(which=config.bound or "custom", rows=rows)
    if not report.verdict:
        logger.warning("coverage check for %s failed", report.which)
    return report


def sweep(config: ExperimentConfig, table: Optional[List[EnsembleRow]] = None) -> SweepReport:
    """log RMSE against log N per functional."""
    table = run_ensemble(config) if table is None else table
    groups: Dict[Tuple[str, int], List[float]] = {}
    for row in table:
        groups.setdefault((row.functional, row.N), []).append(row.deviation)
    points = [
        SweepPoint(N=N, functional=name, rmse=float(np.sqrt(np.mean(np.square(devs)))))
        for (name, N), devs in sorted(groups.items())
    ]
    report = SweepReport(points=points)
    for name in sorted({p.functional for p in points}):
        mine = [p for p in points if p.functional == name]
        rmse = np.array([p.rmse for p in mine])
        if len(mine) < 2:
            report.slopes[name] = report.intercepts[name] = None
            report.notes[name] = "undefined: fewer than two population sizes"
        elif np.any(rmse == 0) or not np.all(np.isfinite(rmse)):
            report.slopes[name] = report.intercepts[name] = None
            report.notes[name] = "undefined: zero or non-finite RMSE"
        else:
            fit = stats.linregress(np.log([p.N for p in mine]), np.log(rmse))
            report.slopes[name] = float(fit.slope)
            report.intercepts[name] = float(fit.intercept)
    return report


def bound_factory(
    config: ExperimentConfig, model: FeynmanKacModel, horizon: int
) -> Callable[[int], TailCurve]:
    """Tail curve for ``config.bound`` as a function of N."""
    which = config.bound
    model = model.truncated(horizon)
    if which == "marginal":
        profile = contraction_profile(model)
        return lambda N: marginal_tail(profile, config.sigma, N, horizon)
    if which in ("tree", "backward") and config.m < 1:
        raise InvalidCertificate(f"the {which} bound needs an H_m certificate, set m >= 1")
    cert = certify_H0(model) if config.m == 0 else certify_Hm(model, config.m)
    if which == "uniform":
        return lambda N: uniform_marginal_tail(cert, config.sigma, N)
    if which == "tree":
        return lambda N: genealogical_tail(cert, config.sigma, N, horizon)
    if which == "free-energy":
        return lambda N: free_energy_tail(cert, config.sigma, N)
    if which == "backward":
        tau_h = density_ratio_certificate(model)
        return lambda N: backward_tail(cert, tau_h, config.sigma, N, horizon)
    raise InvalidModel(f"unknown bound {which!r}")


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    model, _ = resolve_model(config.model)
    horizon = model.horizon if config.horizon is None else config.horizon
    table = run_ensemble(config)
    result = ExperimentResult(config=config, table=table)
    if config.bound is not None:
        result.coverage = coverage_test(config, bound_factory(config, model, horizon), table)
    if config.sweep:
        result.sweep = sweep(config, table)
    return result


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    return format(float(value), ".17g")


def write_outputs(result: ExperimentResult, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """runs.csv, coverage.csv and report.txt; contents depend only on config and seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("runs.csv", "coverage.csv", "report.txt")}

    with open(paths["runs.csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["replicate", "N", "seed", "functional", "estimate", "reference", "deviation", "reference_kind"]
        )
        for row in result.table:
            writer.writerow(
                [row.replicate, row.N, row.seed, row.functional, _fmt(row.estimate),
                 _fmt(row.reference), _fmt(row.deviation), row.reference_kind]
            )

    with open(paths["coverage.csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["x", "sign", "N", "functional", "violations", "replicates",
             "frequency", "floor", "slack", "verdict"]
        )
        for row in result.coverage.rows if result.coverage else []:
            writer.writerow(
                [_fmt(row.x), row.sign, row.N, row.functional, row.violations, row.replicates,
                 _fmt(row.frequency), _fmt(row.floor), _fmt(row.slack),
                 "PASS" if row.passed else "FAIL"]
            )

    lines = [
        f"model: {result.config.model}",
        f"estimator: {result.config.estimator}",
        f"replicates: {result.config.replicates}",
        f"N: {', '.join(str(n) for n in result.config.n_particles)}",
        f"seed: {result.config.seed}",
    ]
    if result.coverage is not None:
        lines.append(f"bound: {result.coverage.which}")
        lines.append(f"coverage: {'PASS' if result.coverage.verdict else 'FAIL'}")
    if result.sweep is not None:
        for name, slope in result.sweep.slopes.items():
            if slope is None:
                lines.append(f"sweep {name}: slope {result.sweep.notes[name]}")
            else:
                lines.append(
                    f"sweep {name}: slope {_fmt(slope)} intercept {_fmt(result.sweep.intercepts[name])}"
                )
    lines.append(f"verdict: {'PASS' if result.verdict else 'FAIL'}")
    paths["report.txt"].write_text("\n".join(lines) + "\n")
    return paths


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(Path(path).read_text())
    except ValueError as exc:
        raise InvalidModel(f"invalid experiment config {path}: {exc}") from exc

