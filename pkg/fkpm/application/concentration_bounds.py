"""Concentration bounds as evaluable tail curves.

Every curve reads "deviation <= bound(x) with probability >= 1 - e^{-x}".
Constants carry a provenance string so reports can tell certified values
from configured surrogates.
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
from scipy import integrate
from scipy.special import gammaln

from fkpm.application.errors import DivergentEntropy, InvalidBn, InvalidCertificate, NegativeLambda
from fkpm.application.semigroup_analysis import (
    ContractionProfile,
    MixingCertificate,
    tau_kappa,
    uniform_tau_bounds,
)
from fkpm.infrastructure.models import ConstantRecord

logger = logging.getLogger(__name__)

KINDS = ("L", "L0", "L1")
BISECTION_RTOL = 1e-12
NOT_CERTIFIED = "configured, not certified"


@dataclass(frozen=True)
class LegendreFn:
    """One of L, L0, L1 or L_{a,b}(t) = b/(2a^2) L(a t)."""

    kind: str
    a: float = 0.0
    b: float = 0.0

    @property
    def domain_end(self) -> float:
        return {"L": 1.0, "L0": 0.5, "L1": math.inf}.get(self.kind, 1.0 / self.a if self.a else math.inf)

    def __call__(self, t: float) -> float:
        if self.kind == "L":
            return t * t / (1.0 - t)
        if self.kind == "L0":
            return -t - 0.5 * math.log(1.0 - 2.0 * t)
        if self.kind == "L1":
            return math.expm1(t) - t
        return self.b / (2.0 * self.a**2) * LegendreFn("L")(self.a * t)

    def star(self, lam: float) -> float:
        if self.kind in KINDS:
            return l_star(self.kind, lam)
        return self.b / (2.0 * self.a**2) * l_star("L", 2.0 * self.a * lam / self.b)

    def star_inverse(self, x: float) -> float:
        if self.kind in KINDS:
            return inv_l_star(self.kind, x)
        return lab_inverse(self.a, self.b, x)


@dataclass(frozen=True)
class TailCurve:
    fn: Callable[[float], float]
    constants: Dict[str, ConstantRecord] = field(default_factory=dict)
    statement: str = "deviation <= bound(x) w.p. >= 1 - exp(-x)"
    cap: float = math.inf

    def __call__(self, x: float) -> float:
        if x < 0:
            raise ValueError("tail curves are defined for x >= 0")
        return min(float(self.fn(x)), self.cap)

    def grid(self, xs: Sequence[float]) -> np.ndarray:
        return np.array([self(x) for x in xs])

    @staticmethod
    def prob_floor(x: float) -> float:
        return 1.0 - math.exp(-x)


@dataclass(frozen=True)
class CoverageClass:
    """Covering numbers N(eps) of a function class."""

    kind: str
    covering: Callable[[float], float]
    d: int = 0
    c: float = 1.0

    @classmethod
    def cells_rd(cls, d: int, c: float = 1.0) -> "CoverageClass":
        """Indicators of cells in R^d: N(eps) <= c (d+1) (4e)^{d+1} eps^{-2d}."""
        const = c * (d + 1) * (4.0 * math.e) ** (d + 1)
        return cls(kind="cells_Rd", covering=lambda eps: const * eps ** (-2 * d), d=d, c=c)

    @classmethod
    def user(cls, covering: Callable[[float], float]) -> "CoverageClass":
        return cls(kind="user", covering=covering)


def _const(value: float, provenance: str) -> ConstantRecord:
    return ConstantRecord(value=float(value), provenance=provenance)


def l_star(kind: str, lam: float) -> float:
    if lam < 0:
        raise NegativeLambda(f"Legendre transforms are evaluated at lambda >= 0, got {lam}")
    if kind == "L":
        return (math.sqrt(lam + 1.0) - 1.0) ** 2
    if kind == "L0":
        return 0.5 * (lam - math.log1p(lam))
    if kind == "L1":
        return (1.0 + lam) * math.log1p(lam) - lam
    raise ValueError(f"unknown Legendre kind {kind!r}")


def inv_l_star(kind: str, x: float) -> float:
    """Solve star(lambda) = x by bisection; (L*)^{-1}(x) = x + 2 sqrt(x) in closed form."""
    if x <= 0:
        return 0.0
    if kind == "L":
        return x + 2.0 * math.sqrt(x)
    hi = 1.0
    while l_star(kind, hi) < x:
        hi *= 2.0
    lo = 0.0
    while hi - lo > BISECTION_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if l_star(kind, mid) < x:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def lab_inverse(a: float, b: float, x: float) -> float:
    """(L*_{a,b})^{-1}(x) = a x + sqrt(2 b x)."""
    return a * x + math.sqrt(2.0 * b * x)


def bernstein_ab(u: float, v: float) -> tuple:
    """a(u,v) = 2u + v/3, b(u,v) = (sqrt(2) u + v)^2."""
    return 2.0 * u + v / 3.0, (math.sqrt(2.0) * u + v) ** 2


def bernstein_convert(a: float, b: float, c: float = 0.0) -> Callable[[float], float]:
    """Turn "X <= a x + sqrt(2 b x) + c w.p. >= 1 - e^{-x}" into a Bernstein tail.

    The returned function is y -> exp(-y^2 / (2 (b + a y))), an upper bound
    on P(X > y + c).
    """

    def tail(y: float) -> float:
        if y <= 0:
            return 1.0
        return math.exp(-(y * y) / (2.0 * (b + a * y)))

    return tail


def bretagnolle_rio_add(curve_a: TailCurve, curve_b: TailCurve) -> TailCurve:
    constants = {f"A.{k}": v for k, v in curve_a.constants.items()}
    constants.update({f"B.{k}": v for k, v in curve_b.constants.items()})
    return TailCurve(
        fn=lambda x: curve_a(x) + curve_b(x),
        constants=constants,
        statement="(L*_{A+B})^{-1}(x) <= (L*_A)^{-1}(x) + (L*_B)^{-1}(x)",
    )


def legendre_curve(kind: str, scale: float = 1.0) -> TailCurve:
    return TailCurve(
        fn=lambda x: scale * inv_l_star(kind, x),
        constants={"scale": _const(scale, "user")},
        statement=f"{scale} (L*_{kind})^{{-1}}(x)",
    )


def kintchine_b(m: int) -> float:
    """b(m) with E(U^{2m}) = b(2m)^{2m} and E|U|^{2m+1} <= b(2m+1)^{2m+1}."""
    if m < 1:
        raise ValueError("b(m) is defined for m >= 1")
    if m % 2 == 0:
        q = m // 2
        # (2q)_q 2^{-q}
        log_value = gammaln(2 * q + 1) - gammaln(q + 1) - q * math.log(2.0)
    else:
        q = (m - 1) // 2
        # (2q+1)_(q+1) / sqrt(q+1/2) 2^{-(q+1/2)}
        log_value = (
            gammaln(2 * q + 2) - gammaln(q + 1)
            - 0.5 * math.log(q + 0.5) - (q + 0.5) * math.log(2.0)
        )
    return float(math.exp(log_value / m))


def orlicz_gaussian() -> float:
    """Orlicz psi-norm of a standard Gaussian, psi(u) = e^{u^2} - 1."""
    return math.sqrt(8.0 / 3.0)


def orlicz_threshold(pi: float, x: float) -> float:
    """Y <= pi_psi(Y) sqrt(x + log 2) w.p. >= 1 - e^{-x}."""
    return pi * math.sqrt(x + math.log(2.0))


def _entropy_quad(covering: Callable[[float], float], upper: float) -> float:
    def integrand(eps: float) -> float:
        return math.sqrt(math.log(8.0 + covering(eps) ** 2))

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, _ = integrate.quad(integrand, 0.0, upper, epsrel=1e-8, limit=200)
        except (integrate.IntegrationWarning, OverflowError, ZeroDivisionError) as exc:
            raise DivergentEntropy(f"entropy integral does not converge: {exc}") from exc
    if not math.isfinite(value):
        raise DivergentEntropy("entropy integral is infinite")
    return value


def _log_covering(cls: CoverageClass) -> Callable[[float], float]:
    """Covering function that stays finite near 0 for the cells class."""
    if cls.kind != "cells_Rd":
        return cls.covering
    # log(8 + N^2) ~ 2 log N once N is huge; clip N to keep floats finite
    return lambda eps: min(cls.covering(max(eps, 1e-300)), 1e150)


def entropy_integral(cls: CoverageClass) -> float:
    """I(F) = 12^2 int_0^2 sqrt(log(8 + N(eps)^2)) d eps."""
    return 12.0**2 * _entropy_quad(_log_covering(cls), 2.0)


def cells_entropy_scaling(cls: CoverageClass) -> float:
    """I(F)/sqrt(d): the c' in the I(F) <= c' sqrt(d) bound for cells."""
    if cls.kind != "cells_Rd" or cls.d < 1:
        raise ValueError("scaling is reported for the cells_Rd class only")
    return entropy_integral(cls) / math.sqrt(cls.d)


def empirical_process_constant(cls: CoverageClass) -> float:
    """c_F = 24^2 int_0^1 sqrt(log(8 + N(eps)^2)) d eps."""
    return 24.0**2 * _entropy_quad(_log_covering(cls), 1.0)


def _inverse_terms(x: float) -> tuple:
    return inv_l_star("L0", x), inv_l_star("L1", x)


def marginal_tail(
    profile: ContractionProfile,
    sigma: Union[float, Sequence[float]],
    N: int,
    n: int,
    b_n: Optional[float] = None,
) -> TailCurve:
    """Finite-horizon bound on [eta_n^N - eta_n](f) for f with oscillation <= 1."""
    tau21, kappa = tau_kappa(profile, 2, 1, n)
    b_n = kappa if b_n is None else b_n
    if b_n < kappa - 1e-12:
        raise InvalidBn(f"b_n={b_n} is below kappa(n)={kappa}")
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (n + 1,))
    g = profile.g[: n + 1, n]
    beta = profile.beta[: n + 1, n]
    # b_n = 0 only when every g beta term vanishes
    sigma_bar2 = float(np.sum((g * beta * sig) ** 2)) / b_n**2 if b_n > 0 else 0.0

    def bound(x: float) -> float:
        first = 4.0 * tau21 / N * (1.0 + inv_l_star("L0", x))
        if sigma_bar2 == 0.0:
            return first
        return first + 2.0 * b_n * sigma_bar2 * inv_l_star("L1", x / (N * sigma_bar2))

    sigma_origin = "user" if np.any(sig != 1.0) else "universal bound sigma=1"
    return TailCurve(
        fn=bound,
        constants={
            "tau_2_1": _const(tau21, f"exact profile, n={n}"),
            "kappa": _const(kappa, f"exact profile, n={n}"),
            "b_n": _const(b_n, "user" if b_n != kappa else "kappa(n)"),
            "sigma_bar2": _const(sigma_bar2, sigma_origin),
            "N": _const(N, "run"),
        },
        statement="[eta_n^N - eta_n](f) <= bound(x) w.p. >= 1 - exp(-x)",
    )


def _sigma_record(sigma: float) -> ConstantRecord:
    return _const(sigma, "universal bound sigma=1" if sigma == 1.0 else "user")


def uniform_marginal_tail(cert: MixingCertificate, sigma: float, N: int) -> TailCurve:
    """p_m(x)/N + q_m(x)/sqrt(N), uniform in the time horizon."""
    tau21, kappa = uniform_tau_bounds(cert, 2, 1)
    tau22, _ = uniform_tau_bounds(cert, 2, 2)

    def bound(x: float) -> float:
        p = 4.0 * tau21 * (1.0 + 2.0 * (x + math.sqrt(x))) + 2.0 / 3.0 * kappa * x
        q = math.sqrt(8.0 * sigma**2 * tau22 * x)
        return p / N + q / math.sqrt(N)

    return TailCurve(
        fn=bound,
        constants={
            "tau_bar_2_1": _const(tau21, f"{cert.kind} certificate"),
            "tau_bar_2_2": _const(tau22, f"{cert.kind} certificate"),
            "kappa_bar": _const(kappa, f"{cert.kind} certificate"),
            "sigma": _sigma_record(sigma),
            "N": _const(N, "run"),
        },
        statement="[eta_n^N - eta_n](f) <= p_m(x)/N + q_m(x)/sqrt(N) w.p. >= 1 - exp(-x)",
    )


def _hm_scale(cert: MixingCertificate) -> float:
    if not cert.valid:
        raise InvalidCertificate(f"{cert.kind} certificate is not valid")
    if cert.kind != "Hm" or cert.m < 1:
        raise InvalidCertificate("path-space bounds need an H_m certificate with m >= 1")
    return cert.chi_m * cert.g**cert.m


def genealogical_tail(cert: MixingCertificate, sigma: float, N: int, n: int) -> TailCurve:
    """Bound on [eta_n^N - Q_n](f_n) for the genealogical tree occupation measure."""
    a = _hm_scale(cert)
    ratio = (n + 1) / N

    def bound(x: float) -> float:
        p = 4.0 * a**2 * (1.0 + 2.0 * (x + math.sqrt(x))) + 2.0 / 3.0 * a / (n + 1) * x
        q = a * math.sqrt(8.0 * sigma**2 * x)
        return ratio * p + math.sqrt(ratio) * q

    return TailCurve(
        fn=bound,
        constants={
            "chi_m_g_m": _const(a, f"{cert.kind} certificate"),
            "sigma": _sigma_record(sigma),
            "N": _const(N, "run"),
            "n": _const(n, "run"),
        },
        statement="[eta_n^N - Q_n](f_n) <= bound(x) w.p. >= 1 - exp(-x)",
    )


def free_energy_tail(cert: MixingCertificate, sigma: float, N: int) -> TailCurve:
    """Bound on (eps/n) log(Z_n^N / Z_n) for eps in {+1, -1}.

    The linear coefficient uses 4 g kappa_bar / 3 in place of an undefined
    constant of the source statement; it is labeled as interpreted.
    """
    tau11, kappa = uniform_tau_bounds(cert, 1, 1)
    tau31, _ = uniform_tau_bounds(cert, 3, 1)
    tau22, _ = uniform_tau_bounds(cert, 2, 2)
    g = cert.g
    c1 = (4.0 * g * tau11) ** 2 + 8.0 * g * tau31
    c2 = 4.0 * g * kappa / 3.0
    c3 = 4.0 * g * math.sqrt(2.0 * tau22 * sigma**2)

    def bound(x: float) -> float:
        p = c1 * (1.0 + 2.0 * (x + math.sqrt(x))) + c2 * x
        return p / N + c3 * math.sqrt(x) / math.sqrt(N)

    return TailCurve(
        fn=bound,
        constants={
            "c1": _const(c1, f"{cert.kind} certificate"),
            "c2": _const(c2, "interpreted: 4 g kappa_bar / 3"),
            "c3": _const(c3, f"{cert.kind} certificate"),
            "sigma": _sigma_record(sigma),
            "N": _const(N, "run"),
        },
        statement="(eps/n) log(Z_n^N/Z_n) <= bound(x) w.p. >= 1 - exp(-x), eps = +1 and -1",
    )


def _backward_constants(cert: MixingCertificate, tau_h: float) -> tuple:
    if cert.kind != "Hm" or cert.m < 1:
        raise InvalidCertificate("backward bounds need an H_m certificate with m >= 1")
    a = _hm_scale(cert)
    c1 = 2.0 * a * (tau_h**2 + cert.m * cert.g ** (2 * cert.m - 1) * cert.chi_m**3)
    return c1, 2.0 * a * c1


def backward_tail(
    cert: MixingCertificate, tau_h: float, sigma: float, N: int, n: int
) -> TailCurve:
    """Bound on [Q_n^N - Q_n](f) for normalized additive functionals."""
    c1, c2 = _backward_constants(cert, tau_h)

    def bound(x: float) -> float:
        first = c2 / N * (1.0 + inv_l_star("L0", x))
        if sigma == 0.0:
            return first
        return first + c1 * sigma**2 * inv_l_star("L1", x / (N * (n + 1) * sigma**2))

    return TailCurve(
        fn=bound,
        constants={
            "c1": _const(c1, "H_m certificate + density ratio"),
            "c2": _const(c2, "H_m certificate + density ratio"),
            "tau_h": _const(tau_h, "exact density ratio"),
            "sigma": _sigma_record(sigma),
            "N": _const(N, "run"),
            "n": _const(n, "run"),
        },
        statement="[Q_n^N - Q_n](f_bar) <= bound(x) w.p. >= 1 - exp(-x)",
    )


def uniform_backward_tail(cert: MixingCertificate, tau_h: float, sigma: float, N: int) -> TailCurve:
    """backward_tail with both inverse transforms replaced by their closed-form majorants."""
    c1, c2 = _backward_constants(cert, tau_h)

    def bound(x: float) -> float:
        return c2 / N * (1.0 + 2.0 * (x + math.sqrt(x))) + c1 / N * x / 3.0 + c1 * sigma * math.sqrt(2.0 * x / N)

    return TailCurve(
        fn=bound,
        constants={
            "c1": _const(c1, "H_m certificate + density ratio"),
            "c2": _const(c2, "H_m certificate + density ratio"),
            "sigma": _sigma_record(sigma),
            "N": _const(N, "run"),
        },
        statement="[Q_n^N - Q_n](f_bar) <= bound(x) for every n, w.p. >= 1 - exp(-x)",
    )


def empirical_process_tail(cls: CoverageClass, tau_11: float, N: int) -> TailCurve:
    """sup_f |eta_n^N(f) - eta_n(f)| <= c_F tau_{1,1}(n) sqrt(x + log 2)/sqrt(N)."""
    c_f = empirical_process_constant(cls)
    provenance = f"quadrature over {cls.kind}"
    if cls.kind == "cells_Rd":
        provenance += f", covering constant c={cls.c} ({NOT_CERTIFIED})"
    return TailCurve(
        fn=lambda x: c_f * tau_11 * math.sqrt(x + math.log(2.0)) / math.sqrt(N),
        constants={
            "c_F": _const(c_f, provenance),
            "tau_1_1": _const(tau_11, "user"),
            "N": _const(N, "run"),
        },
        statement="sup_f |[eta_n^N - eta_n](f)| <= bound(x) w.p. >= 1 - exp(-x)",
    )
