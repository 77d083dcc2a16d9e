"""Canonical Feynman-Kac instances with exact or closed-form oracles.

Each reference quantity is a ``Reference`` carrying its value, a provenance
tag and the procedure that recomputes it, so tests can rebuild every number
from scratch.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from fkpm.application.errors import InvalidModel, NonPositiveEigenvector
from fkpm.application.fk_core import (
    FeynmanKacModel,
    FiniteSpace,
    InitialLaw,
    Kernel,
    Measure,
    Potential,
    SampledSpace,
    boltzmann_gibbs,
    exact_flow,
    log_normalizing_constant,
    total_variation,
    unnormalized_flow_exact,
)
from fkpm.application.semigroup_analysis import MixingCertificate, dobrushin
from fkpm.infrastructure.models import ZooEntry

logger = logging.getLogger(__name__)

POWER_TOL = 1e-12
POWER_MAX_ITER = 1_000_000


@dataclass
class Reference:
    value: Any
    provenance: str
    recompute: Callable[[], Any]


@dataclass
class ZooModel:
    model: FeynmanKacModel
    oracle: str
    references: Dict[str, Reference] = field(default_factory=dict)
    log_rescale: np.ndarray = field(default_factory=lambda: np.zeros(0))
    extras: Dict[str, Any] = field(default_factory=dict)


def _reference(provenance: str, fn: Callable[[], Any]) -> Reference:
    return Reference(value=fn(), provenance=provenance, recompute=fn)


def _exact_references(model: FeynmanKacModel) -> Dict[str, Reference]:
    return {
        "eta": _reference("exact flow", lambda: [m.weights for m in exact_flow(model)]),
        "log_Z": _reference(
            "exact flow", lambda: [log_normalizing_constant(model, n) for n in range(model.horizon + 1)]
        ),
    }


# Hidden Markov models


def finite_hmm(
    M: np.ndarray,
    emission: Union[np.ndarray, Callable[[int, np.ndarray, Any], np.ndarray]],
    observations: Sequence[Any],
    eta0: Optional[Sequence[float]] = None,
    labels: Optional[Sequence[Any]] = None,
    name: str = "hmm",
) -> ZooModel:
    """G_n(x) = g_n(x, y_n) / max_x g_n(x, y_n); the rescaling is recorded."""
    M = np.asarray(M, dtype=float)
    d = M.shape[0]
    eta0 = np.full(d, 1.0 / d) if eta0 is None else np.asarray(eta0, dtype=float)
    horizon = len(observations) - 1
    if horizon < 0:
        raise InvalidModel("an HMM needs at least one observation")
    states = np.arange(d)
    potentials, log_c = [], []
    for n, y in enumerate(observations):
        if callable(emission):
            lik = np.asarray(emission(n, states, y), dtype=float)
        else:
            lik = np.asarray(emission, dtype=float)[:, y]
        if np.any(lik <= 0):
            raise InvalidModel("emission likelihoods must be positive")
        c = lik.max()
        potentials.append(lik / c)
        log_c.append(math.log(c))
    model = FeynmanKacModel.finite(
        eta0, M, np.array(potentials), horizon, labels=labels, name=name
    )
    log_c = np.array(log_c)

    def log_evidence() -> float:
        # log p(y_0..y_h) = log Z_h + log eta_h(G_h) + sum_p log c_p
        eta_h = exact_flow(model)[-1]
        return (
            log_normalizing_constant(model, horizon)
            + math.log(eta_h.integrate(model.G(horizon).values))
            + float(log_c.sum())
        )

    refs = _exact_references(model)
    refs["log_evidence"] = _reference("exact flow + recorded rescaling", log_evidence)
    refs["filter"] = _reference(
        "exact flow", lambda: boltzmann_gibbs(exact_flow(model)[-1], model.G(horizon)).weights
    )
    return ZooModel(model=model, oracle="exact-flow", references=refs, log_rescale=log_c)


# Linear-Gaussian state space models


@dataclass
class KalmanResult:
    predicted_means: List[np.ndarray]
    predicted_covs: List[np.ndarray]
    filtered_means: List[np.ndarray]
    filtered_covs: List[np.ndarray]
    log_likelihood: float


def kalman_predictor(
    A: np.ndarray,
    C: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    observations: np.ndarray,
    m0: np.ndarray,
    P0: np.ndarray,
) -> KalmanResult:
    """Predictor/filter recursion; predicted_* at n is the law of X_n given y_0..y_{n-1}."""
    m, P = np.asarray(m0, dtype=float), np.asarray(P0, dtype=float)
    pm, pc, fm, fc = [], [], [], []
    loglik = 0.0
    for n, y in enumerate(observations):
        pm.append(m.copy())
        pc.append(P.copy())
        S = C @ P @ C.T + R
        resid = np.atleast_1d(y) - C @ m
        K = np.linalg.solve(S, C @ P).T
        loglik += float(stats.multivariate_normal.logpdf(resid, mean=np.zeros(len(resid)), cov=S))
        m = m + K @ resid
        P = P - K @ S @ K.T
        fm.append(m.copy())
        fc.append(P.copy())
        if n < len(observations) - 1:
            m = A @ m
            P = A @ P @ A.T + Q
    return KalmanResult(pm, pc, fm, fc, loglik)


def linear_gaussian(
    A: Any,
    C: Any,
    Q: Any,
    R: Any,
    observations: Sequence[Any],
    m0: Any = 0.0,
    P0: Any = 1.0,
    name: str = "linear_gaussian",
) -> ZooModel:
    A, C, Q, R = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (A, C, Q, R))
    dx, dy = A.shape[0], C.shape[0]
    m0 = np.broadcast_to(np.asarray(m0, dtype=float), (dx,)).copy()
    P0 = np.atleast_2d(np.asarray(P0, dtype=float)) * (np.eye(dx) if np.ndim(P0) == 0 else 1.0)
    obs = np.asarray(observations, dtype=float).reshape(len(observations), dy)
    try:
        R_chol = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise InvalidModel("observation noise covariance R must be positive definite") from exc
    R_inv = np.linalg.inv(R)
    Q_chol = _psd_factor(Q)
    P0_chol = _psd_factor(P0)
    horizon = len(obs) - 1
    log_c = np.full(
        horizon + 1, -0.5 * dy * math.log(2 * math.pi) - float(np.log(np.diag(R_chol)).sum())
    )

    def potential(y: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        def G(x: np.ndarray) -> np.ndarray:
            resid = y[None, :] - np.asarray(x) @ C.T
            return np.exp(-0.5 * np.einsum("ni,ij,nj->n", resid, R_inv, resid))

        return G

    def sampler(x: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        return x @ A.T + gen.standard_normal(x.shape) @ Q_chol.T

    density = None
    if np.all(np.linalg.eigvalsh(Q) > 0):
        Q_inv = np.linalg.inv(Q)
        log_norm = -0.5 * dx * math.log(2 * math.pi) - 0.5 * float(np.linalg.slogdet(Q)[1])

        def density(x_prev: np.ndarray, x_next: np.ndarray) -> np.ndarray:
            # pairwise N(x_next; A x_prev, Q); arrays may arrive pre-broadcast
            xp = np.asarray(x_prev).reshape(-1, dx)
            xn = np.asarray(x_next).reshape(-1, dx)
            diff = xn[None, :, :] - (xp @ A.T)[:, None, :]
            quad = np.einsum("jik,kl,jil->ji", diff, Q_inv, diff)
            return np.exp(log_norm - 0.5 * quad)

    model = FeynmanKacModel(
        horizon=horizon,
        spaces=tuple(SampledSpace(f"R^{dx}") for _ in range(horizon + 1)),
        kernels=tuple(Kernel(sampler=sampler, density=density, name=f"M_{n}") for n in range(1, horizon + 1)),
        potentials=tuple(Potential(fn=potential(obs[n]), name=f"G_{n}") for n in range(horizon + 1)),
        eta0=InitialLaw(sampler=lambda N, gen: m0[None, :] + gen.standard_normal((N, dx)) @ P0_chol.T),
        functionals={
            "x0": lambda x: np.asarray(x)[:, 0],
            "x0_sq": lambda x: np.asarray(x)[:, 0] ** 2,
        },
        name=name,
    )

    def kalman() -> KalmanResult:
        return kalman_predictor(A, C, Q, R, obs, m0, P0)

    refs = {
        "predicted_means": _reference("Kalman recursion", lambda: kalman().predicted_means),
        "predicted_covs": _reference("Kalman recursion", lambda: kalman().predicted_covs),
        "filtered_means": _reference("Kalman recursion", lambda: kalman().filtered_means),
        "log_evidence": _reference("Kalman recursion", lambda: kalman().log_likelihood),
    }
    return ZooModel(model=model, oracle="kalman", references=refs, log_rescale=log_c)


def _psd_factor(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(S)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))[None, :]


# Restriction to nested subsets


def restricted_kernel(K: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Moves of K leaving ``mask`` are rejected."""
    M = K * mask[None, :]
    np.fill_diagonal(M, 0.0)
    M[np.diag_indices_from(M)] = 1.0 - M.sum(axis=1)
    return M


def subset_restriction(
    lam: Sequence[float],
    K: np.ndarray,
    sets: Sequence[Sequence[bool]],
    floor: Optional[float] = None,
    name: str = "subset",
) -> ZooModel:
    """eta_n = lambda restricted to A_n; Z_n = lambda(A_n)/lambda(A_0) for the hard model.

    ``floor`` softens G_n = 1_{A_{n+1}} to floor outside A_{n+1}; floor=None
    keeps hard zeros.
    """
    lam = np.asarray(lam, dtype=float)
    K = np.asarray(K, dtype=float)
    masks = [np.asarray(s, dtype=bool) for s in sets]
    flux = lam[:, None] * K
    if np.abs(flux - flux.T).max() > 1e-12:
        raise InvalidModel("the proposal kernel must be lambda-reversible")
    for a, b in zip(masks, masks[1:]):
        if np.any(b & ~a):
            raise InvalidModel("subsets must be nested and decreasing")
    horizon = len(masks) - 1
    pots = []
    for n in range(horizon + 1):
        if n < horizon:
            inside = masks[n + 1].astype(float)
            pots.append(inside if floor is None else np.where(masks[n + 1], 1.0, floor))
        else:
            pots.append(np.ones(len(lam)))
    eta0 = lam * masks[0]
    eta0 = eta0 / eta0.sum()
    kernels = [restricted_kernel(K, masks[n]) for n in range(1, horizon + 1)]
    model = FeynmanKacModel.finite(
        eta0,
        np.array(kernels) if kernels else np.empty((0, len(lam), len(lam))),
        np.array(pots),
        horizon,
        name=name,
        hard=floor is None,
    )
    refs = _exact_references(model)
    if floor is None:
        refs["Z"] = _reference(
            "lambda(A_n)/lambda(A_0)", lambda: [float(lam[m].sum() / lam[masks[0]].sum()) for m in masks]
        )
    return ZooModel(model=model, oracle="exact-flow", references=refs)


# Simulated annealing


def metropolis_kernel(V: np.ndarray, beta: float, K: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Metropolis-Hastings kernel with proposal K targeting lam * exp(-beta V)."""
    target = lam * np.exp(-beta * (V - V.min()))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (target[None, :] * K.T) / (target[:, None] * K)
    accept = np.where(K > 0, np.minimum(1.0, np.nan_to_num(ratio, nan=0.0, posinf=1.0)), 0.0)
    M = K * accept
    np.fill_diagonal(M, 0.0)
    M[np.diag_indices_from(M)] = 1.0 - M.sum(axis=1)
    return M


def boltzmann(V: np.ndarray, beta: float, lam: np.ndarray) -> np.ndarray:
    w = lam * np.exp(-beta * (V - V.min()))
    return w / w.sum()


def simulated_annealing(
    V: Sequence[float],
    betas: Sequence[float],
    K: np.ndarray,
    iterates: Union[int, Sequence[int]] = 1,
    lam: Optional[Sequence[float]] = None,
    name: str = "annealing",
) -> ZooModel:
    """G_n = exp(-(beta_{n+1} - beta_n) V), M_n = MH(beta_n)^{m_n}; eta_n = mu_{beta_n} exactly."""
    V = np.asarray(V, dtype=float)
    betas = np.asarray(betas, dtype=float)
    K = np.asarray(K, dtype=float)
    d = len(V)
    lam = np.full(d, 1.0 / d) if lam is None else np.asarray(lam, dtype=float)
    if np.any(np.diff(betas) < 0):
        raise InvalidModel("inverse temperatures must be nondecreasing")
    horizon = len(betas) - 1
    counts = [iterates] * horizon if isinstance(iterates, int) else list(iterates)
    if len(counts) != horizon or any(c < 1 for c in counts):
        raise InvalidModel("one positive iterate count per time 1..horizon is required")
    Vc = V - V.min()
    pots = [np.exp(-(betas[n + 1] - betas[n]) * Vc) for n in range(horizon)] + [np.ones(d)]
    kernels = [
        np.linalg.matrix_power(metropolis_kernel(V, betas[n], K, lam), counts[n - 1])
        for n in range(1, horizon + 1)
    ]
    model = FeynmanKacModel.finite(
        boltzmann(V, betas[0], lam),
        np.array(kernels) if kernels else np.empty((0, d, d)),
        np.array(pots),
        horizon,
        name=name,
    )
    refs = _exact_references(model)
    refs["boltzmann"] = _reference("closed form", lambda: [boltzmann(V, b, lam) for b in betas])
    refs["log_Z"] = _reference(
        "closed form",
        lambda: [
            float(math.log((lam * np.exp(-b * Vc)).sum()) - math.log((lam * np.exp(-betas[0] * Vc)).sum()))
            for b in betas
        ],
    )
    return ZooModel(model=model, oracle="exact-flow", references=refs, extras={"iterates": counts})


def doeblin_minorization(K: np.ndarray, k: int = 1) -> float:
    """Largest eps with K^k(x, .) >= eps nu(.) for a probability nu."""
    return float(np.linalg.matrix_power(np.asarray(K, dtype=float), k).min(axis=0).sum())


def annealing_schedule_tuner(
    eps: Union[float, Sequence[float]],
    k: Union[int, Sequence[int]],
    v: float,
    rho_prime: float,
    betas: Sequence[float],
) -> List[int]:
    """Iterate counts l_n (n = 1..horizon) so that g_{n-1} beta(M_n) <= rho_prime."""
    if not 0.0 < rho_prime < 1.0:
        raise InvalidModel("rho_prime must lie in (0, 1)")
    betas = np.asarray(betas, dtype=float)
    horizon = len(betas) - 1
    eps = np.broadcast_to(np.asarray(eps, dtype=float), (horizon,))
    k = np.broadcast_to(np.asarray(k, dtype=int), (horizon,))
    counts = []
    for n in range(1, horizon + 1):
        floor = eps[n - 1] * math.exp(-betas[n] * k[n - 1] * v)
        numerator = math.log(1.0 / rho_prime) + v * (betas[n] - betas[n - 1])
        if floor >= 1.0:
            counts.append(1)
            continue
        denominator = -math.log1p(-floor)
        counts.append(max(1, math.ceil(numerator / denominator)))
    return counts


# Self-avoiding walks


def _lattice_steps(dim: int) -> np.ndarray:
    eye = np.eye(dim, dtype=int)
    return np.concatenate([eye, -eye])


def count_self_avoiding_walks(n: int, dim: int = 2) -> int:
    """Number of n-step self-avoiding walks from the origin, by depth-first search."""
    steps = [tuple(s) for s in _lattice_steps(dim)]
    origin = (0,) * dim
    visited = {origin}

    def extend(pos: Tuple[int, ...], remaining: int) -> int:
        if remaining == 0:
            return 1
        total = 0
        for s in steps:
            nxt = tuple(a + b for a, b in zip(pos, s))
            if nxt not in visited:
                visited.add(nxt)
                total += extend(nxt, remaining - 1)
                visited.remove(nxt)
        return total

    return extend(origin, n)


def self_avoiding_walk(
    n: int, dim: int = 2, repulsion: Optional[float] = None, name: str = "saw"
) -> ZooModel:
    """Historical model of the simple random walk on Z^dim.

    States are paths of shape (p+1, dim). G_p penalizes revisits of the
    terminal site: the indicator of no revisit (hard), or
    exp(-repulsion * #revisits). For the hard model
    gamma_n(G_n) = P(the walk is self-avoiding up to time n).

    The normalizing constant lags by one step: Z_n = P(self-avoiding up to
    time n-1), so Z_2 = 1 and Z_3 = 3/4 on Z^2. ``saw_probability[k]`` is
    P(self-avoiding up to time k), which is Z_{k+1}.
    """
    steps = _lattice_steps(dim)

    def sampler(paths: np.ndarray, gen: np.random.Generator) -> np.ndarray:
        moves = steps[gen.integers(0, len(steps), size=len(paths))]
        return np.concatenate([paths, (paths[:, -1] + moves)[:, None, :]], axis=1)

    def revisits(paths: np.ndarray) -> np.ndarray:
        paths = np.asarray(paths)
        return np.all(paths[:, :-1] == paths[:, -1:], axis=2).sum(axis=1)

    if repulsion is None:
        potential = lambda paths: (revisits(paths) == 0).astype(float)
    else:
        potential = lambda paths: np.exp(-repulsion * revisits(paths))
    model = FeynmanKacModel(
        horizon=n,
        spaces=tuple(SampledSpace(f"paths_{p}") for p in range(n + 1)),
        kernels=tuple(Kernel(sampler=sampler, name=f"walk_{p}") for p in range(1, n + 1)),
        potentials=tuple(
            Potential(fn=potential, hard=repulsion is None, name=f"G_{p}") for p in range(n + 1)
        ),
        eta0=InitialLaw(sampler=lambda N, gen: np.zeros((N, 1, dim), dtype=int)),
        functionals={"end_to_end_sq": lambda paths: (np.asarray(paths)[:, -1] ** 2).sum(axis=1).astype(float)},
        name=name,
    )
    refs = {}
    if repulsion is None:
        refs["saw_probability"] = _reference(
            "exhaustive enumeration",
            lambda: [count_self_avoiding_walks(p, dim) / (2 * dim) ** p for p in range(n + 1)],
        )
    return ZooModel(model=model, oracle="enumeration", references=refs)


# Absorption, Doob h-process and Yaglom limits


@dataclass
class DoobAnalysis:
    zoo: ZooModel
    lam: float
    h: np.ndarray
    doob_kernel: np.ndarray
    mu: np.ndarray
    eta_inf: np.ndarray
    eta_inf_h: np.ndarray


def stationary_distribution(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(M.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return v / v.sum()


def power_iteration(Q: np.ndarray, tol: float = POWER_TOL) -> Tuple[float, np.ndarray]:
    h = np.ones(Q.shape[0])
    lam = 0.0
    for _ in range(POWER_MAX_ITER):
        nxt = Q @ h
        lam = float(np.abs(nxt).max())
        if lam == 0.0:
            raise NonPositiveEigenvector("Q annihilates the constant function")
        nxt = nxt / lam
        if np.abs(nxt - h).max() < tol:
            h = nxt
            break
        h = nxt
    else:
        logger.warning("power iteration stopped before reaching %.1e", tol)
    lam = float((Q @ h).max() / h[np.argmax(Q @ h)]) if np.all(h > 0) else lam
    return lam, h


def absorption_doob(
    G: Sequence[float],
    M: np.ndarray,
    horizon: int = 60,
    eta0: Optional[Sequence[float]] = None,
    name: str = "absorption",
) -> DoobAnalysis:
    """Ground state (lambda, h) of Q = G M, its Doob h-process and Yaglom limits."""
    G = np.asarray(G, dtype=float)
    M = np.asarray(M, dtype=float)
    d = len(G)
    mu = stationary_distribution(M)
    if np.abs(mu[:, None] * M - (mu[:, None] * M).T).max() > 1e-10:
        raise InvalidModel("M must be reversible")
    Q = G[:, None] * M
    lam, h = power_iteration(Q)
    if np.any(h <= 0):
        raise NonPositiveEigenvector("the ground state eigenvector is not positive")
    doob = Q * h[None, :] / (lam * h[:, None])
    Mh = M @ h
    eta_inf = mu * Mh / (mu @ Mh)
    eta_inf_h = mu * h * Mh / (mu @ (h * Mh))
    eta0 = np.full(d, 1.0 / d) if eta0 is None else np.asarray(eta0, dtype=float)
    model = FeynmanKacModel.finite(eta0, M, G, horizon, name=name)
    refs = _exact_references(model)
    refs["eta_inf"] = _reference("Yaglom limit Psi_{M(h)}(mu)", lambda: eta_inf)
    zoo = ZooModel(model=model, oracle="eigen", references=refs)
    return DoobAnalysis(zoo, lam, h, doob, mu, eta_inf, eta_inf_h)


def doob_free_energy(analysis: DoobAnalysis, n: int) -> float:
    """Z_n = lambda^n eta_0(h) E[1/h(X_n^h)], X_0^h ~ Psi_h(eta_0)."""
    eta0 = analysis.zoo.model.eta0.vector
    start = eta0 * analysis.h / (eta0 @ analysis.h)
    law = start @ np.linalg.matrix_power(analysis.doob_kernel, n)
    return float(analysis.lam**n * (eta0 @ analysis.h) * (law @ (1.0 / analysis.h)))


def yaglom_decay(analysis: DoobAnalysis, n_max: Optional[int] = None) -> Tuple[float, float]:
    """Fit ||eta_n - eta_inf||_tv <= c3 exp(-delta n); returns (delta, c3)."""
    model = analysis.zoo.model
    n_max = model.horizon if n_max is None else n_max
    target = Measure.finite(analysis.eta_inf)
    tv = np.array([total_variation(m, target) for m in exact_flow(model, n_max)])
    keep = tv > 1e-13
    ns = np.arange(n_max + 1)[keep]
    fit = stats.linregress(ns, np.log(tv[keep]))
    delta = -fit.slope
    c3 = float(np.max(tv[keep] * np.exp(delta * ns)))
    return float(delta), c3


# Time discretization with geometric clocks


def geometric_clock_discretization(
    V: Sequence[float],
    K: np.ndarray,
    lambdas: Union[float, Sequence[float]],
    h: float,
    horizon: int = 10,
    eta0: Optional[Sequence[float]] = None,
    name: str = "geometric_clock",
) -> Tuple[ZooModel, MixingCertificate]:
    """G_n = exp(-V h), M_n = (1 - lambda_n h) Id + lambda_n h K.

    The returned H_0 certificate carries g <= exp(h osc(V)) and
    rho <= exp(-alpha h), alpha = min_n lambda_n (1 - beta(K)) - osc(V).
    """
    V = np.asarray(V, dtype=float)
    K = np.asarray(K, dtype=float)
    d = len(V)
    if np.any(V < 0):
        raise InvalidModel("V must be nonnegative")
    lams = np.broadcast_to(np.asarray(lambdas, dtype=float), (horizon,))
    if np.any(lams * h > 1.0 + 1e-12) or np.any(lams <= 0):
        raise InvalidModel("each lambda_n must lie in (0, 1/h]")
    kernels = [(1.0 - l * h) * np.eye(d) + l * h * K for l in lams]
    eta0 = np.full(d, 1.0 / d) if eta0 is None else np.asarray(eta0, dtype=float)
    model = FeynmanKacModel.finite(
        eta0,
        np.array(kernels) if kernels else np.empty((0, d, d)),
        np.exp(-V * h),
        horizon,
        name=name,
    )
    v = float(V.max() - V.min())
    alpha = float(lams.min() * (1.0 - dobrushin(K)) - v)
    cert = MixingCertificate(
        kind="H0", m=0, g=math.exp(h * v), rho=math.exp(-alpha * h), horizon=horizon
    )
    zoo = ZooModel(model=model, oracle="exact-flow", references=_exact_references(model))
    return zoo, cert


# Registry backing `fkpm zoo`


def _hmm4() -> ZooModel:
    M = np.array(
        [
            [0.7, 0.2, 0.05, 0.05],
            [0.1, 0.7, 0.1, 0.1],
            [0.05, 0.15, 0.7, 0.1],
            [0.1, 0.1, 0.2, 0.6],
        ]
    )
    emission = np.array([[0.8, 0.2], [0.6, 0.4], [0.3, 0.7], [0.1, 0.9]])
    observations = [0, 0, 1, 0, 1, 1, 1, 0, 1, 0, 0]
    return finite_hmm(M, emission, observations, name="hmm4")


def _linear_gaussian_1d() -> ZooModel:
    gen = np.random.default_rng(20_111)
    x, obs = 0.0, []
    for _ in range(21):
        obs.append(x + gen.standard_normal())
        x = 0.9 * x + gen.standard_normal()
    return linear_gaussian(0.9, 1.0, 1.0, 1.0, obs, m0=0.0, P0=1.0, name="linear_gaussian_1d")


def _subset_soft() -> ZooModel:
    d = 8
    K = np.full((d, d), 1.0 / d)
    sets = [np.arange(d) < k for k in (8, 6, 4, 3)]
    return subset_restriction(np.full(d, 1.0 / d), K, sets, floor=0.05, name="subset_soft")


def _subset_hard() -> ZooModel:
    d = 8
    K = np.full((d, d), 1.0 / d)
    sets = [np.arange(d) < k for k in (8, 6, 4, 3)]
    return subset_restriction(np.full(d, 1.0 / d), K, sets, floor=None, name="subset_hard")


def _two_well() -> ZooModel:
    V = np.array([0.0, 1.0, 2.0, 1.5, 0.3, 1.2])
    d = len(V)
    K = 0.5 * np.eye(d) + 0.25 * (np.roll(np.eye(d), 1, axis=1) + np.roll(np.eye(d), -1, axis=1))
    return simulated_annealing(V, np.linspace(0.0, 3.0, 9), K, iterates=3, name="annealing_two_well")


def _saw() -> ZooModel:
    return self_avoiding_walk(5, name="saw_2d")


def _absorption() -> ZooModel:
    d = 5
    M = 0.5 * np.eye(d)
    for i in range(d):
        M[i, max(i - 1, 0)] += 0.25
        M[i, min(i + 1, d - 1)] += 0.25
    G = np.array([0.95, 0.9, 0.85, 0.9, 0.6])
    return absorption_doob(G, M, name="absorption_5").zoo


def _geometric_clock() -> ZooModel:
    K = np.full((4, 4), 0.25)
    return geometric_clock_discretization([0.0, 0.5, 1.0, 0.2], K, 1.0, 0.5, name="geometric_clock")[0]


ZOO: Dict[str, Tuple[str, str, bool, Callable[[], ZooModel]]] = {
    "hmm4": ("4-state hidden Markov model, 11 binary observations", "exact-flow", True, _hmm4),
    "linear_gaussian_1d": ("1-d AR(1) observed in Gaussian noise, 21 observations", "kalman", False, _linear_gaussian_1d),
    "subset_soft": ("nested restriction on 8 states, floor 0.05", "exact-flow", True, _subset_soft),
    "subset_hard": ("nested restriction on 8 states, indicator potentials", "exact-flow", True, _subset_hard),
    "annealing_two_well": ("interacting annealing on a 6-state two-well landscape", "exact-flow", True, _two_well),
    "saw_2d": ("self-avoiding walks on Z^2, 5 steps", "enumeration", False, _saw),
    "absorption_5": ("absorbed reflecting walk on 5 states", "eigen", True, _absorption),
    "geometric_clock": ("geometric-clock time discretization on 4 states", "exact-flow", True, _geometric_clock),
}


def list_models() -> List[ZooEntry]:
    return [
        ZooEntry(name=name, description=desc, oracle=oracle, finite=finite)
        for name, (desc, oracle, finite, _) in ZOO.items()
    ]


def build(name: str) -> ZooModel:
    if name not in ZOO:
        raise InvalidModel(f"unknown zoo model {name!r}; try one of {', '.join(ZOO)}")
    return ZOO[name][3]()


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def emit(name: str, out: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the model JSON and an ``<stem>.oracle.json`` sidecar of reference values."""
    zoo = build(name)
    zoo.model.require_finite()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(zoo.model.to_spec().model_dump_json(indent=2))
    sidecar = out.with_name(f"{out.stem}.oracle.json")
    payload = {
        "model": name,
        "oracle": zoo.oracle,
        "log_rescale": _jsonable(zoo.log_rescale),
        "references": {
            key: {"value": _jsonable(ref.value), "provenance": ref.provenance}
            for key, ref in zoo.references.items()
        },
    }
    sidecar.write_text(json.dumps(payload, indent=2))
    logger.info("emitted %s to %s (+ %s)", name, out, sidecar.name)
    return out, sidecar
