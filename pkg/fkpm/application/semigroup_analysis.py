"""Exact Feynman-Kac semigroup stability parameters on finite spaces."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from fkpm.application.errors import InvalidCertificate, NotMixing
from fkpm.application.fk_core import FeynmanKacModel
from fkpm.infrastructure.models import CertificateRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SemigroupTriple:
    Q: np.ndarray
    G: np.ndarray
    P: np.ndarray


@dataclass
class ContractionProfile:
    """g[p, n] = g_{p,n} and beta[p, n] = beta(P_{p,n}) for 0 <= p <= n <= horizon."""

    horizon: int
    g: np.ndarray
    beta: np.ndarray
    G_pn: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class MixingCertificate:
    kind: str
    m: int = 0
    chi_m: float = 1.0
    g: float = 1.0
    rho: Optional[float] = None
    horizon: Optional[int] = None

    @property
    def valid(self) -> bool:
        if self.kind == "H0":
            return self.rho is not None and self.rho < 1.0 and math.isfinite(self.g)
        return self.m >= 1 and math.isfinite(self.chi_m) and math.isfinite(self.g)

    def to_record(self) -> CertificateRecord:
        return CertificateRecord(
            kind=self.kind,
            m=self.m,
            chi_m=self.chi_m,
            g=self.g,
            rho=self.rho,
            horizon=self.horizon,
            valid=self.valid,
        )

    @classmethod
    def from_record(cls, record: CertificateRecord) -> "MixingCertificate":
        return cls(
            kind=record.kind,
            m=record.m,
            chi_m=record.chi_m,
            g=record.g,
            rho=record.rho,
            horizon=record.horizon,
        )


def dobrushin(M: np.ndarray) -> float:
    """beta(M): the largest total-variation distance between two rows."""
    M = np.asarray(M, dtype=float)
    if M.shape[0] < 2:
        return 0.0
    diffs = 0.5 * np.abs(M[:, None, :] - M[None, :, :]).sum(axis=2)
    return float(min(diffs.max(), 1.0))


def twisted_kernel(M: np.ndarray, G: np.ndarray) -> np.ndarray:
    """M_G(x, dy) = M(x, dy) G(y) / M(G)(x)."""
    w = np.asarray(M) * np.asarray(G)[None, :]
    return w / w.sum(axis=1, keepdims=True)


def _ratio(v: np.ndarray) -> float:
    return float(v.max() / v.min())


def semigroup_Qpn(model: FeynmanKacModel, p: int, n: int) -> SemigroupTriple:
    """Q_{p,n} = Q_{p+1} ... Q_n, G_{p,n} = Q_{p,n}(1), P_{p,n} = Q_{p,n}/G_{p,n}."""
    model.require_finite()
    if p > n:
        raise ValueError(f"p={p} must not exceed n={n}")
    Q = np.eye(model.size(p))
    for q in range(p + 1, n + 1):
        Q = Q @ model.Q(q)
    G = Q.sum(axis=1)
    return SemigroupTriple(Q=Q, G=G, P=Q / G[:, None])


def contraction_profile(model: FeynmanKacModel, horizon: Optional[int] = None) -> ContractionProfile:
    """Exact g_{p,n} and beta(P_{p,n}) for every pair p <= n <= horizon.

    Products are built backward and rescaled by their maximum each step;
    ratios and P_{p,n} are scale free.
    """
    model.require_finite()
    horizon = model.horizon if horizon is None else horizon
    g = np.full((horizon + 1, horizon + 1), np.nan)
    beta = np.full((horizon + 1, horizon + 1), np.nan)
    G_pn = {}
    for n in range(horizon + 1):
        Q = np.eye(model.size(n))
        for p in range(n, -1, -1):
            if p < n:
                Q = model.Q(p + 1) @ Q
                Q = Q / Q.max()
            G = Q.sum(axis=1)
            g[p, n] = _ratio(G)
            beta[p, n] = dobrushin(Q / G[:, None])
            G_pn[(p, n)] = G / G.max()
    return ContractionProfile(horizon=horizon, g=g, beta=beta, G_pn=G_pn)


def tau_kappa(profile: ContractionProfile, k: float, l: float, n: int) -> Tuple[float, float]:
    """tau_{k,l}(n) = sum_{p<=n} g_{p,n}^k beta(P_{p,n})^l, kappa(n) = max_p g_{p,n} beta(P_{p,n})."""
    g = profile.g[: n + 1, n]
    b = profile.beta[: n + 1, n]
    return float(np.sum(g**k * b**l)), float(np.max(g * b))


def potential_ratio(model: FeynmanKacModel, horizon: Optional[int] = None) -> float:
    horizon = model.horizon if horizon is None else horizon
    return max(model.G(n).sup_ratio for n in range(horizon + 1))


def certify_Hm(model: FeynmanKacModel, m: int) -> MixingCertificate:
    """chi_m = max M_{n,n+m}(x,y)/M_{n,n+m}(x',y) over window starts in the horizon."""
    model.require_finite()
    if m < 1:
        raise InvalidCertificate("H_m needs m >= 1; use certify_H0 for m = 0")
    if m > model.horizon:
        raise InvalidCertificate(f"window m={m} exceeds horizon {model.horizon}")
    chi = 1.0
    for n in range(0, model.horizon - m + 1):
        W = np.eye(model.size(n))
        for q in range(n + 1, n + m + 1):
            W = W @ model.M(q).matrix
        positive = W > 0
        mixed = positive.any(axis=0) & ~positive.all(axis=0)
        if np.any(mixed):
            raise NotMixing(f"M_{{{n},{n + m}}} rows have different supports")
        cols = positive.all(axis=0)
        if np.any(cols):
            ratios = W[:, cols].max(axis=0) / W[:, cols].min(axis=0)
            chi = max(chi, float(ratios.max()))
    cert = MixingCertificate(
        kind="Hm", m=m, chi_m=chi, g=potential_ratio(model), horizon=model.horizon
    )
    logger.debug("certified H_%d: chi=%.6g g=%.6g", m, cert.chi_m, cert.g)
    return cert


def certify_H0(model: FeynmanKacModel) -> MixingCertificate:
    """rho = sup_n g_n beta(M_{n+1}); valid iff rho < 1."""
    model.require_finite()
    rho = 0.0
    for n in range(model.horizon):
        rho = max(rho, model.G(n).sup_ratio * dobrushin(model.M(n + 1).matrix))
    cert = MixingCertificate(
        kind="H0", m=0, g=potential_ratio(model), rho=rho, horizon=model.horizon
    )
    if not cert.valid:
        logger.info("H_0 fails for %s: rho=%.6g", model.name, rho)
    return cert


def _require_valid(cert: MixingCertificate) -> None:
    if not cert.valid:
        raise InvalidCertificate(f"{cert.kind} certificate is not valid: {cert}")


def hm_contraction(cert: MixingCertificate) -> float:
    """g^{-(m-1)} chi_m^{-2}, the per-window contraction gain under H_m."""
    return cert.g ** (-(cert.m - 1)) * cert.chi_m ** (-2)


def hm_bounds(cert: MixingCertificate, p: int, n: int) -> Tuple[float, float]:
    """g_{p,n} <= chi_m g^m and beta(P_{p,n}) <= (1 - g^{-(m-1)} chi_m^{-2})^k, k = (n-p)//m."""
    _require_valid(cert)
    if cert.kind != "Hm":
        raise InvalidCertificate("hm_bounds needs an H_m certificate")
    k = (n - p) // cert.m
    return cert.chi_m * cert.g**cert.m, (1.0 - hm_contraction(cert)) ** k


def h0_bounds(cert: MixingCertificate, p: int, n: int) -> Tuple[float, float]:
    """beta(P_{p,n}) <= rho^{n-p}, g_{p,n} <= exp((g-1)(1-rho^{n-p})/(1-rho))."""
    _require_valid(cert)
    if cert.kind != "H0":
        raise InvalidCertificate("h0_bounds needs an H_0 certificate")
    rho = cert.rho
    decay = rho ** (n - p)
    return math.exp((cert.g - 1.0) * (1.0 - decay) / (1.0 - rho)), decay


def uniform_tau_bounds(cert: MixingCertificate, k: float, l: float) -> Tuple[float, float]:
    """(tau_bar_{k,l}, kappa_bar) uniform in the time horizon."""
    _require_valid(cert)
    if cert.kind == "Hm":
        a = cert.chi_m * cert.g**cert.m
        denom = 1.0 - (1.0 - hm_contraction(cert)) ** l
        tau = cert.m * a**k / denom if denom > 0 else math.inf
        return tau, a
    spread = (cert.g - 1.0) / (1.0 - cert.rho)
    denom = 1.0 - cert.rho**l
    tau = math.exp(k * spread) / denom if denom > 0 else math.inf
    return tau, math.exp(spread)


def historical_profile(cert: MixingCertificate, n: int, k: float = 1.0) -> Tuple[float, float]:
    """Path-space bounds tau_{k,l}(n) <= (n+1)(chi_m g^m)^k, kappa(n) <= chi_m g^m."""
    _require_valid(cert)
    if cert.kind != "Hm" or cert.m < 1:
        raise InvalidCertificate("historical_profile needs an H_m certificate with m >= 1")
    a = cert.chi_m * cert.g**cert.m
    return (n + 1) * a**k, a


def density_ratio_certificate(model: FeynmanKacModel) -> float:
    """tau = max_{n,x,y,y'} H_n(x,y)/H_n(x,y') with counting reference measure."""
    model.require_finite()
    tau = 1.0
    for n in range(1, model.horizon + 1):
        M = model.M(n).matrix
        if np.any(M <= 0):
            raise NotMixing(f"M_{n} has zero entries; the density ratio is infinite")
        tau = max(tau, float((M.max(axis=1) / M.min(axis=1)).max()))
    return tau


def dominance_report(
    model: FeynmanKacModel, profile: ContractionProfile, cert: MixingCertificate
) -> Dict[str, bool]:
    """Whether every exact g_{p,n}, beta(P_{p,n}) and tau_{k,l}(n) sits below its bound."""
    bounds = hm_bounds if cert.kind == "Hm" else h0_bounds
    verdict = {"g": True, "beta": True, "tau_2_1": True, "tau_2_2": True, "kappa": True}
    if not cert.valid:
        return {key: False for key in verdict}
    tol = 1e-9
    for n in range(profile.horizon + 1):
        for p in range(n + 1):
            g_bound, b_bound = bounds(cert, p, n)
            verdict["g"] &= bool(profile.g[p, n] <= g_bound * (1 + tol))
            verdict["beta"] &= bool(profile.beta[p, n] <= b_bound + tol)
        for k, l in ((2, 1), (2, 2)):
            tau, kappa = tau_kappa(profile, k, l, n)
            tau_bar, kappa_bar = uniform_tau_bounds(cert, k, l)
            verdict[f"tau_{k}_{l}"] &= bool(tau <= tau_bar * (1 + tol))
            verdict["kappa"] &= bool(kappa <= kappa_bar * (1 + tol))
    return verdict


def profile_rows(profile: ContractionProfile) -> Tuple[List[List[Optional[float]]], List[List[Optional[float]]]]:
    def clean(a: np.ndarray) -> List[List[Optional[float]]]:
        return [[None if np.isnan(v) else float(v) for v in row] for row in a]

    return clean(profile.g), clean(profile.beta)
