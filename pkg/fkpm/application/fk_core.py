"""Feynman-Kac models and exact measure-flow operators on finite spaces.

Conventions: potentials G_0..G_horizon, kernels M_1..M_horizon. On finite
spaces states are integer indices into the space labels and the reference
measure is the counting measure, so the transition density H_n is the
matrix entry M_n(x, y).
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from fkpm.application.errors import (
    EnumerationCap,
    InvalidModel,
    NegativeWeight,
    PotentialRange,
    SupportMismatch,
    UnsupportedSpace,
    ZeroMass,
)
from fkpm.infrastructure.config import get_settings
from fkpm.infrastructure.models import ModelSpec

logger = logging.getLogger(__name__)

ROW_TOL = 1e-12
PROB_TOL = 1e-10

Functional = Callable[[np.ndarray], np.ndarray]
Sampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]
PairwiseDensity = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class FiniteSpace:
    labels: Tuple[Any, ...]

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SampledSpace:
    name: str = "sampled"


Space = Union[FiniteSpace, SampledSpace]


class Potential:
    """A (0,1]-valued potential function.

    ``hard`` potentials may also take the value 0 (indicator obstacles);
    they are meant for estimator stress tests, not for certificates.
    """

    def __init__(
        self,
        fn: Optional[Functional] = None,
        values: Optional[Sequence[float]] = None,
        hard: bool = False,
        name: str = "",
    ):
        if fn is None and values is None:
            raise InvalidModel("a potential needs a function or a value table")
        self.fn = fn
        self.values = None if values is None else np.asarray(values, dtype=float)
        self.hard = hard
        self.name = name
        if self.values is not None:
            self._check(self.values)

    @classmethod
    def constant(cls, c: float = 1.0) -> "Potential":
        return cls(fn=lambda x: np.full(len(x), float(c)), name=f"const({c})")

    def _check(self, g: np.ndarray) -> None:
        if np.any(g > 1.0 + ROW_TOL):
            raise PotentialRange(f"potential {self.name!r} exceeds 1: max={g.max()!r}")
        if self.hard:
            if np.any(g < 0.0):
                raise PotentialRange(f"potential {self.name!r} is negative")
        elif np.any(g <= 0.0):
            raise PotentialRange(f"potential {self.name!r} is not positive")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.values is not None:
            g = self.values[np.asarray(x, dtype=int)]
        else:
            g = np.asarray(self.fn(x), dtype=float)
            self._check(g)
        return np.minimum(g, 1.0)

    @property
    def sup_ratio(self) -> float:
        """sup_{x,y} G(x)/G(y) over the value table."""
        if self.values is None:
            raise UnsupportedSpace("potential ratio needs a finite value table")
        low = self.values.min()
        return float(self.values.max() / low) if low > 0 else float("inf")


class Kernel:
    """Markov kernel: a sampler, optionally an exact matrix and a density."""

    def __init__(
        self,
        matrix: Optional[np.ndarray] = None,
        sampler: Optional[Sampler] = None,
        density: Optional[PairwiseDensity] = None,
        name: str = "",
    ):
        if matrix is None and sampler is None:
            raise InvalidModel("a kernel needs a matrix or a sampler")
        self.matrix = None if matrix is None else np.asarray(matrix, dtype=float)
        self.sampler = sampler
        self.density = density
        self.name = name
        if self.matrix is not None:
            self._check_matrix()

    def _check_matrix(self) -> None:
        m = self.matrix
        if m.ndim != 2:
            raise InvalidModel(f"kernel {self.name!r} must be a 2-d matrix")
        if np.any(m < 0):
            raise InvalidModel(f"kernel {self.name!r} has negative entries")
        err = np.abs(m.sum(axis=1) - 1.0).max()
        if err > ROW_TOL:
            raise InvalidModel(f"kernel {self.name!r} rows do not sum to 1 (error {err:.3e})")
        if self.density is not None:
            d_prev, d_next = m.shape
            h = self.density(np.arange(d_prev), np.arange(d_next))
            if np.abs(h - m).max() > ROW_TOL:
                raise InvalidModel(
                    f"kernel {self.name!r}: density disagrees with the counting-measure matrix"
                )

    @classmethod
    def identity(cls, d: int) -> "Kernel":
        return cls(matrix=np.eye(d), name="identity")

    @property
    def is_finite(self) -> bool:
        return self.matrix is not None

    def sample(self, x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        if self.sampler is not None:
            return self.sampler(x, gen)
        u = gen.random(len(x))
        return inverse_cdf_rows(self.matrix[np.asarray(x, dtype=int)], u)

    def density_matrix(self, x_prev: np.ndarray, x_next: np.ndarray) -> Optional[np.ndarray]:
        """H(x_prev[j], x_next[i]) as a (len(x_prev), len(x_next)) array."""
        if self.density is not None:
            return np.asarray(self.density(x_prev, x_next), dtype=float)
        if self.matrix is not None:
            return self.matrix[np.ix_(np.asarray(x_prev, dtype=int), np.asarray(x_next, dtype=int))]
        return None


def inverse_cdf_rows(rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Draw one column index per row of ``rows`` by inverse CDF."""
    cdf = np.cumsum(rows, axis=1)
    cdf[:, -1] = np.inf
    return (u[:, None] >= cdf).sum(axis=1)


class InitialLaw:
    def __init__(
        self,
        vector: Optional[Sequence[float]] = None,
        sampler: Optional[Callable[[int, np.random.Generator], np.ndarray]] = None,
    ):
        if vector is None and sampler is None:
            raise InvalidModel("an initial law needs a vector or a sampler")
        self.vector = None if vector is None else np.asarray(vector, dtype=float)
        self.sampler = sampler
        if self.vector is not None:
            if np.any(self.vector < 0) or abs(self.vector.sum() - 1.0) > ROW_TOL:
                raise InvalidModel("eta0 must be a probability vector")

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        if self.sampler is not None:
            return self.sampler(n, gen)
        u = gen.random(n)
        return inverse_cdf_rows(np.broadcast_to(self.vector, (n, len(self.vector))), u)


@dataclass(frozen=True)
class FeynmanKacModel:
    horizon: int
    spaces: Tuple[Space, ...]
    kernels: Tuple[Kernel, ...]
    potentials: Tuple[Potential, ...]
    eta0: InitialLaw
    functionals: Dict[str, Functional] = field(default_factory=dict)
    name: str = "model"

    def __post_init__(self):
        if len(self.spaces) != self.horizon + 1:
            raise InvalidModel("one space per time 0..horizon is required")
        if len(self.kernels) != self.horizon:
            raise InvalidModel("one kernel per time 1..horizon is required")
        if len(self.potentials) != self.horizon + 1:
            raise InvalidModel("one potential per time 0..horizon is required")
        if self.is_finite:
            for n in range(1, self.horizon + 1):
                shape = self.M(n).matrix.shape
                if shape != (self.size(n - 1), self.size(n)):
                    raise InvalidModel(f"kernel M_{n} has shape {shape}")
            if len(self.eta0.vector) != self.size(0):
                raise InvalidModel("eta0 length does not match the time-0 space")

    def M(self, n: int) -> Kernel:
        if not 1 <= n <= self.horizon:
            raise InvalidModel(f"no kernel M_{n} within horizon {self.horizon}")
        return self.kernels[n - 1]

    def G(self, n: int) -> Potential:
        if not 0 <= n <= self.horizon:
            raise InvalidModel(f"no potential G_{n} within horizon {self.horizon}")
        return self.potentials[n]

    @property
    def is_finite(self) -> bool:
        return (
            all(isinstance(s, FiniteSpace) for s in self.spaces)
            and all(k.is_finite for k in self.kernels)
            and all(p.values is not None for p in self.potentials)
            and self.eta0.vector is not None
        )

    def require_finite(self) -> None:
        if not self.is_finite:
            raise UnsupportedSpace(f"model {self.name!r} is not finite")

    def size(self, n: int) -> int:
        space = self.spaces[n]
        if not isinstance(space, FiniteSpace):
            raise UnsupportedSpace(f"space at time {n} is not finite")
        return space.size

    def Q(self, n: int) -> np.ndarray:
        """Q_n(x, y) = G_{n-1}(x) M_n(x, y)."""
        self.require_finite()
        return self.G(n - 1).values[:, None] * self.M(n).matrix

    def truncated(self, horizon: int) -> "FeynmanKacModel":
        if horizon > self.horizon:
            raise InvalidModel(f"cannot extend horizon {self.horizon} to {horizon}")
        return FeynmanKacModel(
            horizon=horizon,
            spaces=self.spaces[: horizon + 1],
            kernels=self.kernels[:horizon],
            potentials=self.potentials[: horizon + 1],
            eta0=self.eta0,
            functionals=self.functionals,
            name=self.name,
        )

    @classmethod
    def finite(
        cls,
        eta0: Sequence[float],
        kernels: Union[np.ndarray, Sequence[np.ndarray]],
        potentials: Union[Sequence[float], Sequence[Sequence[float]]],
        horizon: int,
        labels: Optional[Sequence[Any]] = None,
        functionals: Optional[Dict[str, Sequence[float]]] = None,
        name: str = "model",
        hard: bool = False,
    ) -> "FeynmanKacModel":
        """Build a time-homogeneous or inhomogeneous finite model.

        A single matrix / vector is broadcast across time.
        """
        eta0 = np.asarray(eta0, dtype=float)
        d = len(eta0)
        labels = tuple(labels) if labels is not None else tuple(range(d))
        kern = np.asarray(kernels, dtype=float)
        mats = [kern] * horizon if kern.ndim == 2 else list(kern)
        pots = np.asarray(potentials, dtype=float)
        vecs = [pots] * (horizon + 1) if pots.ndim == 1 else list(pots)
        if len(mats) != horizon or len(vecs) != horizon + 1:
            raise InvalidModel("kernel/potential counts do not match the horizon")
        table = default_functionals(labels)
        for key, values in (functionals or {}).items():
            table[key] = _table_functional(values)
        return cls(
            horizon=horizon,
            spaces=tuple(FiniteSpace(labels) for _ in range(horizon + 1)),
            kernels=tuple(Kernel(matrix=m, name=f"M_{n + 1}") for n, m in enumerate(mats)),
            potentials=tuple(
                Potential(values=v, hard=hard, name=f"G_{n}") for n, v in enumerate(vecs)
            ),
            eta0=InitialLaw(vector=eta0),
            functionals=table,
            name=name,
        )

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "FeynmanKacModel":
        try:
            return cls.finite(
                eta0=spec.eta0,
                kernels=[np.asarray(k) for k in spec.kernels] if spec.horizon else np.empty((0, 0, 0)),
                potentials=spec.potentials,
                horizon=spec.horizon,
                labels=spec.states,
                functionals=spec.functionals,
                name=spec.name,
                hard=spec.hard_potentials,
            )
        except ValueError as exc:
            raise InvalidModel(str(exc)) from exc

    def to_spec(self) -> ModelSpec:
        self.require_finite()
        labels = list(self.spaces[0].labels)
        tables = {
            key: [float(v) for v in np.asarray(fn(np.arange(len(labels))), dtype=float)]
            for key, fn in self.functionals.items()
        }
        return ModelSpec(
            name=self.name,
            horizon=self.horizon,
            states=labels,
            eta0=self.eta0.vector.tolist(),
            kernels=[k.matrix.tolist() for k in self.kernels],
            potentials=[p.values.tolist() for p in self.potentials],
            functionals=tables,
            hard_potentials=any(p.hard for p in self.potentials),
        )


def _table_functional(values: Sequence[float]) -> Functional:
    table = np.asarray(values, dtype=float)
    return lambda x: table[np.asarray(x, dtype=int)]


def default_functionals(labels: Sequence[Any]) -> Dict[str, Functional]:
    """scaled_index (x/(d-1), oscillation 1) and one indicator per state."""
    d = len(labels)
    scale = max(d - 1, 1)
    table: Dict[str, Functional] = {
        "scaled_index": lambda x: np.asarray(x, dtype=float) / scale,
    }
    for k, label in enumerate(labels):
        table[f"state_{label}"] = (lambda k: lambda x: (np.asarray(x) == k).astype(float))(k)
    return table


def load_model(path: Union[str, Path]) -> FeynmanKacModel:
    with open(path) as fh:
        raw = json.load(fh)
    try:
        spec = ModelSpec.model_validate(raw)
    except ValueError as exc:
        raise InvalidModel(f"invalid model file {path}: {exc}") from exc
    return FeynmanKacModel.from_spec(spec)


@dataclass(frozen=True)
class Measure:
    """Weighted atoms; ``total_mass`` is Z for unnormalized measures.

    Finite-space measures have ``support = arange(d)``; path measures carry a
    (K, n+1) support of index paths; particle measures carry particle states.
    """

    support: np.ndarray
    weights: np.ndarray
    total_mass: float = 1.0

    def __post_init__(self):
        if len(self.support) != len(self.weights):
            raise SupportMismatch("support and weights have different lengths")
        if np.any(self.weights < 0):
            raise NegativeWeight("measure weights must be nonnegative")

    @classmethod
    def finite(cls, weights: Sequence[float], total_mass: float = 1.0) -> "Measure":
        w = np.asarray(weights, dtype=float)
        return cls(support=np.arange(len(w)), weights=w, total_mass=total_mass)

    @classmethod
    def uniform(cls, support: np.ndarray) -> "Measure":
        n = len(support)
        return cls(support=support, weights=np.full(n, 1.0 / n))

    def integrate(self, f: Union[Functional, np.ndarray]) -> float:
        values = f(self.support) if callable(f) else np.asarray(f, dtype=float)
        return float(self.weights @ values)

    def unnormalized(self, f: Union[Functional, np.ndarray]) -> float:
        return self.total_mass * self.integrate(f)

    def to_finite(self, size: int) -> "Measure":
        w = np.bincount(np.asarray(self.support, dtype=int), weights=self.weights, minlength=size)
        return Measure.finite(w, total_mass=self.total_mass)


def _potential_values(G: Union[Potential, Functional, np.ndarray], support: np.ndarray) -> np.ndarray:
    if isinstance(G, np.ndarray) or isinstance(G, (list, tuple)):
        return np.asarray(G, dtype=float)
    return np.asarray(G(support), dtype=float)


def boltzmann_gibbs(mu: Measure, G: Union[Potential, Functional, np.ndarray]) -> Measure:
    """Psi_G(mu)(dx) = G(x) mu(dx) / mu(G)."""
    g = _potential_values(G, mu.support)
    weighted = mu.weights * g
    mass = weighted.sum()
    if not mass > 0:
        raise ZeroMass("mu(G) = 0: the potential vanishes on the support of mu")
    return Measure(support=mu.support, weights=weighted / mass)


def flow_step_exact(model: FeynmanKacModel, eta_prev: Measure, n: int) -> Measure:
    """Phi_n(eta_{n-1}) = Psi_{G_{n-1}}(eta_{n-1}) M_n."""
    model.require_finite()
    selected = boltzmann_gibbs(eta_prev, model.G(n - 1))
    w = selected.weights @ model.M(n).matrix
    return Measure.finite(w / w.sum())


def exact_flow(model: FeynmanKacModel, n: Optional[int] = None) -> List[Measure]:
    """eta_0, ..., eta_n."""
    model.require_finite()
    n = model.horizon if n is None else n
    flow = [Measure.finite(model.eta0.vector)]
    for p in range(1, n + 1):
        flow.append(flow_step_exact(model, flow[-1], p))
    return flow


def log_normalizing_constant(model: FeynmanKacModel, n: int) -> float:
    """log Z_n = sum_{p<n} log eta_p(G_p)."""
    flow = exact_flow(model, n)
    total = 0.0
    for p in range(n):
        mass = flow[p].integrate(model.G(p).values)
        if mass <= 0:
            return -np.inf
        total += np.log(mass)
    return total


def unnormalized_flow_exact(model: FeynmanKacModel, n: int) -> Tuple[Measure, float]:
    """gamma_n and Z_n = gamma_n(1).

    gamma_n is returned as the normalized eta_n with ``total_mass = Z_n``.
    The raw recursion gamma_n = gamma_{n-1} Q_n is cross-checked against the
    product formula whenever it has not underflowed.
    """
    model.require_finite()
    log_z = log_normalizing_constant(model, n)
    z = float(np.exp(log_z))
    raw = model.eta0.vector.copy()
    for p in range(1, n + 1):
        raw = raw @ model.Q(p)
    raw_mass = raw.sum()
    if raw_mass > 1e-300 and z > 0 and abs(raw_mass - z) > 1e-10 * z:
        logger.warning("gamma_%d(1) drift: recursion %.17g vs product %.17g", n, raw_mass, z)
    eta = exact_flow(model, n)[-1]
    return Measure(support=eta.support, weights=eta.weights, total_mass=z), z


def path_measure_exact(model: FeynmanKacModel, n: int, cap: Optional[int] = None) -> Measure:
    """Q_n over all index paths (x_0, ..., x_n), total_mass = Z_n."""
    model.require_finite()
    cap = get_settings().enumeration_cap if cap is None else cap
    shape = tuple(model.size(p) for p in range(n + 1))
    count = int(np.prod(shape, dtype=object))
    if count > cap:
        raise EnumerationCap(f"{count} paths exceed the enumeration cap {cap}")
    w = model.eta0.vector.copy()
    for p in range(1, n + 1):
        w = w[..., None] * model.Q(p)
    z = w.sum()
    if not z > 0:
        raise ZeroMass("all paths have zero weight")
    support = np.indices(shape).reshape(n + 1, -1).T
    return Measure(support=support, weights=w.ravel() / z, total_mass=float(z))


def path_marginals_exact(model: FeynmanKacModel, n: int) -> List[Measure]:
    """Time-p marginals of Q_n, p = 0..n, proportional to gamma_p * G_{p,n}."""
    flow = exact_flow(model, n)
    v = np.ones(model.size(n))
    tails = [v]
    for p in range(n - 1, -1, -1):
        v = model.G(p).values * (model.M(p + 1).matrix @ v)
        v = v / v.max()
        tails.append(v)
    tails.reverse()
    marginals = []
    for p in range(n + 1):
        w = flow[p].weights * tails[p]
        marginals.append(Measure.finite(w / w.sum()))
    return marginals


def selection_transport_kernel(mu: Measure, G: Potential, x: Any) -> Measure:
    """S_{mu,G}(x, .) = G(x) delta_x + (1 - G(x)) Psi_G(mu)."""
    gx = float(np.asarray(G(np.asarray([x])))[0])
    if not 0.0 < gx <= 1.0:
        raise PotentialRange(f"G(x) = {gx} is outside (0, 1]")
    psi = boltzmann_gibbs(mu, G)
    matches = np.nonzero(np.all(np.asarray(mu.support).reshape(len(mu.support), -1)
                                == np.asarray(x).reshape(1, -1), axis=1))[0]
    if len(matches) == 0:
        raise SupportMismatch(f"state {x!r} is not an atom of mu")
    w = (1.0 - gx) * psi.weights
    w[matches[0]] += gx
    return Measure(support=mu.support, weights=w)


def selection_transport_matrix(mu: Measure, G: Potential) -> np.ndarray:
    """Rows S_{mu,G}(x, .) for every atom x of a finite measure."""
    return np.vstack([selection_transport_kernel(mu, G, x).weights for x in mu.support])


def total_variation(mu: Measure, nu: Measure) -> float:
    if mu.support.shape != nu.support.shape or not np.array_equal(mu.support, nu.support):
        raise SupportMismatch("measures live on different supports")
    return float(0.5 * np.abs(mu.weights - nu.weights).sum())
