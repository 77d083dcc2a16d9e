"""Mean-field N-particle approximation of a Feynman-Kac flow.

One generation is: accumulate log eta_n^N(G_n), select (keep particle i
with probability epsilon_n G_n(xi^i), otherwise resample proportionally to
G_n), then mutate every selected particle with M_{n+1}.
"""

import logging
import time as _time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fkpm.application import rng as streams
from fkpm.application.errors import (
    AllDead,
    EpsilonTooLarge,
    InvalidModel,
    MissingStates,
    StationarityViolated,
)
from fkpm.application.fk_core import (
    FeynmanKacModel,
    FiniteSpace,
    InitialLaw,
    Kernel,
    Measure,
    Potential,
    SampledSpace,
    exact_flow,
)
from fkpm.application.rng import RngStream

logger = logging.getLogger(__name__)

STATIONARITY_TOL = 1e-8


@dataclass(frozen=True)
class GenealogyRecord:
    """ancestors[g-1] maps generation g onto generation g-1 (g = 1..n).

    Ancestors and potentials are always recorded; retained_states only when
    retain_states is set.
    """

    ancestors: Tuple[np.ndarray, ...] = ()
    retained_states: Tuple[np.ndarray, ...] = ()
    potentials: Tuple[np.ndarray, ...] = ()
    retain_states: bool = True


@dataclass(frozen=True)
class ParticlePopulation:
    time: int
    states: np.ndarray
    log_free_energy: float = 0.0
    genealogy: GenealogyRecord = field(default_factory=GenealogyRecord)

    @property
    def N(self) -> int:
        return len(self.states)


@dataclass
class StepRecord:
    step: int
    eta_hat: Dict[str, float]
    log_z_hat: float
    ess: float
    wall_ns: int


@dataclass
class RunResult:
    population: ParticlePopulation
    records: List[StepRecord]


def effective_sample_size(weights: np.ndarray) -> float:
    total = weights.sum()
    if total <= 0:
        return 0.0
    return float(total**2 / np.square(weights).sum())


def init(
    model: FeynmanKacModel,
    N: int,
    seed: int,
    retain_genealogy: bool = False,
) -> ParticlePopulation:
    if N < 1:
        raise InvalidModel("population size must be >= 1")
    states = model.eta0.sample(N, RngStream(seed).generator(0, streams.INIT))
    genealogy = GenealogyRecord(
        retained_states=(states,) if retain_genealogy else (),
        retain_states=retain_genealogy,
    )
    return ParticlePopulation(time=0, states=states, genealogy=genealogy)


def selection_step(
    model: FeynmanKacModel,
    pop: ParticlePopulation,
    rng: RngStream,
    epsilon: Optional[float] = None,
) -> Tuple[ParticlePopulation, np.ndarray]:
    n, N = pop.time, pop.N
    eps = 1.0 if epsilon is None else float(epsilon)
    g = model.G(n)(pop.states)
    if np.any(eps * g > 1.0 + 1e-12):
        raise EpsilonTooLarge(f"epsilon_{n} * G_{n} reaches {float((eps * g).max())}")
    total = g.sum()
    if not total > 0:
        raise AllDead(f"every particle has zero potential at time {n}")
    accept = rng.uniforms(n, streams.SELECT_ACCEPT, N) < eps * g
    cdf = np.cumsum(g) / total
    resampled = np.minimum(
        np.searchsorted(cdf, rng.uniforms(n, streams.SELECT_RESAMPLE, N), side="right"),
        N - 1,
    )
    ancestors = np.where(accept, np.arange(N), resampled)
    genealogy = replace(
        pop.genealogy,
        ancestors=pop.genealogy.ancestors + (ancestors,),
        potentials=pop.genealogy.potentials + (g,),
    )
    selected = replace(pop, states=pop.states[ancestors], genealogy=genealogy)
    return selected, ancestors


def _move(
    pop: ParticlePopulation, kernel: Kernel, gen: np.random.Generator
) -> ParticlePopulation:
    states = kernel.sample(pop.states, gen)
    genealogy = pop.genealogy
    if genealogy.retain_states:
        genealogy = replace(genealogy, retained_states=genealogy.retained_states + (states,))
    return replace(pop, time=pop.time + 1, states=states, genealogy=genealogy)


def mutation_step(
    model: FeynmanKacModel, pop: ParticlePopulation, rng: RngStream
) -> ParticlePopulation:
    n = pop.time
    return _move(pop, model.M(n + 1), rng.generator(n + 1, streams.MUTATE))


def step(
    model: FeynmanKacModel,
    pop: ParticlePopulation,
    rng: RngStream,
    epsilon: Optional[float] = None,
) -> ParticlePopulation:
    n = pop.time
    g = model.G(n)(pop.states)
    mass = g.mean()
    if mass > 0:
        pop = replace(pop, log_free_energy=pop.log_free_energy + float(np.log(mass)))
        pop, _ = selection_step(model, pop, rng, epsilon)
    else:
        logger.warning("all particles dead at time %d; free energy set to -inf", n)
        genealogy = replace(
            pop.genealogy,
            ancestors=pop.genealogy.ancestors + (np.arange(pop.N),),
            potentials=pop.genealogy.potentials + (g,),
        )
        pop = replace(pop, log_free_energy=-np.inf, genealogy=genealogy)
    return mutation_step(model, pop, rng)


def occupation_measure(pop: ParticlePopulation) -> Measure:
    return Measure.uniform(pop.states)


def free_energy_estimate(
    pop: ParticlePopulation,
) -> Tuple[float, Callable[[Callable[[np.ndarray], np.ndarray]], float]]:
    """(log Z_n^N, f -> gamma_n^N(f) = Z_n^N eta_n^N(f))."""
    log_z = pop.log_free_energy
    eta = occupation_measure(pop)

    def gamma_f(f: Callable[[np.ndarray], np.ndarray]) -> float:
        if log_z == -np.inf:
            return 0.0
        return float(np.exp(log_z) * eta.integrate(f))

    return log_z, gamma_f


def ancestral_lines(pop: ParticlePopulation) -> Measure:
    """Uniform measure over the N reconstructed ancestral lines.

    Path support has shape (N, n+1, ...) when states are arrays of equal shape.
    """
    genealogy = pop.genealogy
    if not genealogy.retain_states:
        raise MissingStates("ancestral lines need retain_genealogy=True")
    n = pop.time
    idx = np.arange(pop.N)
    path = [pop.states]
    for g in range(n, 0, -1):
        idx = genealogy.ancestors[g - 1][idx]
        path.append(genealogy.retained_states[g - 1][idx])
    path.reverse()
    return Measure.uniform(np.stack(path, axis=1))


def historical_lift(model: FeynmanKacModel) -> FeynmanKacModel:
    """Feynman-Kac model on path space whose time-n flow is Q_n.

    Finite models keep exact matrices: paths of length p+1 are indexed in
    row-major order, so extending path a by y gives index a*d + y.
    Other models carry paths as arrays of shape (N, p+1, ...).
    """
    if model.is_finite and len({model.size(p) for p in range(model.horizon + 1)}) == 1:
        return _finite_lift(model)
    kernels = tuple(
        Kernel(sampler=_path_sampler(model.M(n)), name=f"path_M_{n}")
        for n in range(1, model.horizon + 1)
    )
    potentials = tuple(
        Potential(fn=_terminal(model.G(n)), hard=model.G(n).hard, name=f"path_G_{n}")
        for n in range(model.horizon + 1)
    )
    eta0 = InitialLaw(sampler=lambda N, gen: model.eta0.sample(N, gen)[:, None])
    return FeynmanKacModel(
        horizon=model.horizon,
        spaces=tuple(SampledSpace(f"paths_{n}") for n in range(model.horizon + 1)),
        kernels=kernels,
        potentials=potentials,
        eta0=eta0,
        functionals={},
        name=f"{model.name}_paths",
    )


def _path_sampler(kernel: Kernel):
    def sample(paths: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        nxt = kernel.sample(paths[:, -1], gen)
        return np.concatenate([paths, nxt[:, None]], axis=1)

    return sample


def _terminal(potential: Potential):
    return lambda paths: potential(np.asarray(paths)[:, -1])


def _finite_lift(model: FeynmanKacModel) -> FeynmanKacModel:
    d = model.size(0)
    spaces, kernels, potentials = [], [], []
    for p in range(model.horizon + 1):
        count = d ** (p + 1)
        last = np.arange(count) % d
        spaces.append(FiniteSpace(tuple(range(count))))
        potentials.append(
            Potential(values=model.G(p).values[last], hard=model.G(p).hard, name=f"path_G_{p}")
        )
        if p >= 1:
            prev = d**p
            mat = np.zeros((prev, count))
            rows = np.arange(prev)
            for y in range(d):
                mat[rows, rows * d + y] = model.M(p).matrix[rows % d, y]
            kernels.append(Kernel(matrix=mat, name=f"path_M_{p}"))
    return FeynmanKacModel(
        horizon=model.horizon,
        spaces=tuple(spaces),
        kernels=tuple(kernels),
        potentials=tuple(potentials),
        eta0=InitialLaw(vector=model.eta0.vector),
        functionals={},
        name=f"{model.name}_paths",
    )


def unravel_paths(indices: np.ndarray, d: int, length: int) -> np.ndarray:
    """Row-major path indices of a finite lift back to (K, length) state paths."""
    return np.stack(np.unravel_index(np.asarray(indices), (d,) * length), axis=1)


def mcmc_regularized_mutation(
    model: FeynmanKacModel,
    pop: ParticlePopulation,
    K: Kernel,
    rng: RngStream,
) -> ParticlePopulation:
    """Mutate with M_{n+1} followed by an eta_{n+1}-invariant move K."""
    n = pop.time
    if K.is_finite and model.is_finite:
        target = exact_flow(model, n + 1)[-1].weights
        err = np.abs(target @ K.matrix - target).max()
        if err > STATIONARITY_TOL:
            raise StationarityViolated(f"eta_{n + 1} K differs from eta_{n + 1} by {err:.3e}")
    moved = mutation_step(model, pop, rng)
    states = K.sample(moved.states, rng.generator(n + 1, streams.MCMC))
    genealogy = moved.genealogy
    if genealogy.retain_states:
        genealogy = replace(
            genealogy, retained_states=genealogy.retained_states[:-1] + (states,)
        )
    return replace(moved, states=states, genealogy=genealogy)


def run(
    model: FeynmanKacModel,
    N: int,
    seed: int,
    horizon: Optional[int] = None,
    epsilon: Optional[float] = None,
    retain_genealogy: bool = False,
    functionals: Optional[Sequence[str]] = None,
) -> RunResult:
    """Run the particle model to ``horizon`` recording eta_n^N(f), log Z_n^N and ESS."""
    horizon = model.horizon if horizon is None else horizon
    if horizon > model.horizon:
        raise InvalidModel(f"horizon {horizon} exceeds the model horizon {model.horizon}")
    names = list(functionals) if functionals is not None else sorted(model.functionals)
    missing = [f for f in names if f not in model.functionals]
    if missing:
        raise InvalidModel(f"unknown functionals: {', '.join(missing)}")
    rng = RngStream(seed)
    pop = init(model, N, seed, retain_genealogy)
    records = []
    for n in range(horizon + 1):
        started = _time.perf_counter_ns()
        eta = occupation_measure(pop)
        eta_hat = {f: eta.integrate(model.functionals[f]) for f in names}
        ess = effective_sample_size(model.G(n)(pop.states))
        if n < horizon:
            nxt = step(model, pop, rng, epsilon)
        records.append(
            StepRecord(
                step=n,
                eta_hat=eta_hat,
                log_z_hat=pop.log_free_energy,
                ess=ess,
                wall_ns=_time.perf_counter_ns() - started,
            )
        )
        if n < horizon:
            pop = nxt
            logger.debug("step %d done, log_Z_hat=%.6g", n + 1, pop.log_free_energy)
    logger.info(
        "particle run %s: N=%d horizon=%d log_Z_hat=%.6g", model.name, N, horizon, pop.log_free_energy
    )
    return RunResult(population=pop, records=records)
