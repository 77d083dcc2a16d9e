"""Backward particle Markov model Q_n^N.

The random backward matrix at time p has rows indexed by particles at time
p and columns by particles at time p-1:

    B_p[i, j] = G_{p-1}(xi_{p-1}^j) H_p(xi_{p-1}^j, xi_p^i) / sum_k (...)

Q_n^N is the law of the chain started uniformly at time n and moved
backward by B_n, ..., B_1.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from fkpm.application import rng as streams
from fkpm.application.errors import (
    EnumerationCap,
    MissingDensity,
    MissingGradient,
    MissingStates,
    ZeroRow,
)
from fkpm.application.fk_core import FeynmanKacModel, Measure
from fkpm.application.particle_engine import GenealogyRecord, ParticlePopulation
from fkpm.application.rng import RngStream
from fkpm.infrastructure.config import get_settings

logger = logging.getLogger(__name__)

PairFunction = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class TrajectoryStore:
    model: FeynmanKacModel
    states: List[np.ndarray]
    potentials: List[np.ndarray]
    log_free_energy: float = 0.0
    cache_densities: bool = False
    _cache: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def from_population(
        cls, model: FeynmanKacModel, pop: ParticlePopulation, cache_densities: bool = False
    ) -> "TrajectoryStore":
        genealogy = pop.genealogy
        if not genealogy.retain_states:
            raise MissingStates("backward smoothing needs retain_genealogy=True")
        return cls(
            model=model,
            states=list(genealogy.retained_states),
            potentials=list(genealogy.potentials),
            log_free_energy=pop.log_free_energy,
            cache_densities=cache_densities,
        )

    @property
    def horizon(self) -> int:
        return len(self.states) - 1

    @property
    def N(self) -> int:
        return len(self.states[-1])

    def density(self, p: int) -> np.ndarray:
        """H_p(xi_{p-1}^j, xi_p^i) as an (N_prev, N) array."""
        if p in self._cache:
            return self._cache[p]
        h = self.model.M(p).density_matrix(self.states[p - 1], self.states[p])
        if h is None:
            raise MissingDensity(f"kernel M_{p} has no transition density")
        if self.cache_densities:
            self._cache[p] = h
        return h

    def save(self, path: Union[str, Path]) -> None:
        arrays = {f"states_{p}": s for p, s in enumerate(self.states)}
        arrays.update({f"potentials_{p}": g for p, g in enumerate(self.potentials)})
        np.savez(path, log_free_energy=self.log_free_energy, **arrays)

    @classmethod
    def load(cls, path: Union[str, Path], model: FeynmanKacModel) -> "TrajectoryStore":
        with np.load(path) as data:
            n = sum(1 for key in data.files if key.startswith("states_"))
            states = [data[f"states_{p}"] for p in range(n)]
            potentials = [data[f"potentials_{p}"] for p in range(n - 1)]
            log_z = float(data["log_free_energy"])
        return cls(model=model, states=states, potentials=potentials, log_free_energy=log_z)


@dataclass(frozen=True)
class AdditiveFunctional:
    """Components f_p(x_p); ``normalized`` averages them over n+1 times."""

    components: Sequence[Callable[[np.ndarray], np.ndarray]]
    normalized: bool = True

    @classmethod
    def stationary(cls, f: Callable[[np.ndarray], np.ndarray], n: int, normalized: bool = True):
        return cls(components=[f] * (n + 1), normalized=normalized)

    def component(self, p: int) -> Callable[[np.ndarray], np.ndarray]:
        return self.components[p]


def backward_matrix(store: TrajectoryStore, p: int) -> np.ndarray:
    weights = store.potentials[p - 1][:, None] * store.density(p)
    norm = weights.sum(axis=0)
    if np.any(norm <= 0):
        bad = int(np.argmin(norm))
        raise ZeroRow(f"backward row {bad} at time {p} has a zero normalizer")
    return (weights / norm).T


def backward_row(store: TrajectoryStore, p: int, i: int) -> np.ndarray:
    h = store.model.M(p).density_matrix(store.states[p - 1], store.states[p][i : i + 1])
    if h is None:
        raise MissingDensity(f"kernel M_{p} has no transition density")
    w = store.potentials[p - 1] * h[:, 0]
    total = w.sum()
    if not total > 0:
        raise ZeroRow(f"backward row {i} at time {p} has a zero normalizer")
    return w / total


def smoothed_additive(store: TrajectoryStore, f: AdditiveFunctional) -> float:
    """Q_n^N(f) by backward matrix-vector recursion, O(n N^2)."""
    n = store.horizon
    v = np.full(store.N, 1.0 / store.N)
    total = float(v @ f.component(n)(store.states[n]))
    for p in range(n, 0, -1):
        v = v @ backward_matrix(store, p)
        total += float(v @ f.component(p - 1)(store.states[p - 1]))
    return total / (n + 1) if f.normalized else total


def smoothed_pair_additive(
    store: TrajectoryStore,
    pair_fn: PairFunction,
    terminal: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Q_n^N(f_n(x_n) * sum_{p=1}^n h_p(x_{p-1}, x_p)).

    ``pair_fn(p, x_prev, x_next)`` receives broadcastable arrays of shape
    (N, 1) and (1, N) and returns (N, N) or (N, N, d) values.
    """
    n = store.horizon
    f_n = np.ones(store.N) if terminal is None else terminal(store.states[n])
    v = f_n / store.N
    total = None
    for p in range(n, 0, -1):
        b = backward_matrix(store, p)
        x_prev = store.states[p - 1]
        x_next = store.states[p]
        h = pair_fn(p, _column(x_prev), _row(x_next))
        if h is None:
            raise MissingGradient(f"no pair values at time {p}")
        h = np.asarray(h, dtype=float)
        if h.ndim == 2:
            h = h[..., None]
        # h[j, i, :] pairs xi_{p-1}^j with xi_p^i
        term = np.einsum("i,ij,jik->k", v, b, h)
        total = term if total is None else total + term
        v = v @ b
    if total is None:
        return np.zeros(1)
    return total


def _column(x: np.ndarray) -> np.ndarray:
    return x.reshape((len(x), 1) + x.shape[1:])


def _row(x: np.ndarray) -> np.ndarray:
    return x.reshape((1, len(x)) + x.shape[1:])


def sample_backward_paths(
    store: TrajectoryStore, rng: RngStream, size: int = 1
) -> np.ndarray:
    """Index paths (size, n+1) drawn from Q_n^N."""
    n = store.horizon
    N = store.N
    paths = np.empty((size, n + 1), dtype=int)
    paths[:, n] = np.minimum((rng.uniforms(n, streams.BACKWARD, size) * N).astype(int), N - 1)
    for p in range(n, 0, -1):
        cdf = np.cumsum(backward_matrix(store, p), axis=1)
        cdf[:, -1] = np.inf
        u = rng.uniforms(p - 1, streams.BACKWARD, size, salt=1)
        paths[:, p - 1] = (u[:, None] >= cdf[paths[:, p]]).sum(axis=1)
    return paths


def sample_backward_path(store: TrajectoryStore, rng: RngStream) -> List[np.ndarray]:
    """One path of particle states (xi_0, ..., xi_n) drawn from Q_n^N."""
    idx = sample_backward_paths(store, rng, 1)[0]
    return [store.states[p][i] for p, i in enumerate(idx)]


def enumerate_backward_measure(store: TrajectoryStore, cap: Optional[int] = None) -> Measure:
    """Q_n^N as an explicit measure over all N^(n+1) index paths."""
    n, N = store.horizon, store.N
    cap = get_settings().enumeration_cap if cap is None else cap
    if N ** (n + 1) > cap:
        raise EnumerationCap(f"{N ** (n + 1)} index paths exceed the cap {cap}")
    # w[i_0, ..., i_n] = (1/N) prod_p B_p[i_p, i_{p-1}]
    w = np.full(N, 1.0 / N)
    for p in range(n, 0, -1):
        w = w[None, ...] * backward_matrix(store, p).T.reshape((N, N) + (1,) * (n - p))
    support = np.indices((N,) * (n + 1)).reshape(n + 1, -1).T
    return Measure(support=support, weights=w.ravel())


def marginal_consistency(store: TrajectoryStore) -> Measure:
    """Time-n marginal of Q_n^N, summing x_0..x_{n-1} out through B_1, ..., B_n.

    Equals eta_n^N (terminal particles, weight 1/N) when every B_p is stochastic.
    """
    mass = np.ones(store.N)
    for p in range(1, store.horizon + 1):
        mass = backward_matrix(store, p) @ mass
    return Measure(support=store.states[-1], weights=mass / store.N)


def sensitivity_gradient(
    store: TrajectoryStore,
    grad_log: Optional[PairFunction],
    f: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """Z_n^N Q_n^N(f * Lambda_n), Lambda_n = sum_p grad log(G_{p-1} H_p)(x_{p-1}, x_p)."""
    if grad_log is None:
        raise MissingGradient("sensitivity needs grad log(G_{p-1} H_p) evaluations")
    if store.log_free_energy == -np.inf:
        return np.zeros(1)
    value = smoothed_pair_additive(store, grad_log, terminal=f)
    return np.exp(store.log_free_energy) * value
