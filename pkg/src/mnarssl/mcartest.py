"""Likelihood-ratio test of MCAR labels against self-masked MNAR labels.

The null model ties every class to the same observation rate, whose MLE is
the labeled fraction n_l / n whatever theta is. The statistic

    2 * (min_theta l(theta, n_l/n) - min_{theta, phi} l(theta, phi))

is compared to a chi-squared law with K - 1 degrees of freedom. The
reference law is established for a fixed theta; with theta optimized
jointly it is a working assumption, and the report says which regime ran.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .core import Dataset, ValidationError, validate
from .mechanism import MleConfig, MleResult, mcar_phi, mle_fit, observed_nll
from .model import ModelParams

_MAX_ITER = 500
_TINY = 1e-300


def _gamma_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) by its power series."""
    term = total = 1.0 / a
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cfrac(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) by modified Lentz."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_q(a: float, x: float) -> float:
    """Regularized upper incomplete gamma function Q(a, x)."""
    if a <= 0 or x < 0:
        raise ValidationError("gamma_q needs a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cfrac(a, x)


def chi2_sf(x: float, d: int) -> float:
    """Survival function of the chi-squared law with ``d`` degrees of freedom."""
    if d < 1:
        raise ValidationError("degrees of freedom must be >= 1")
    if x < 0:
        raise ValidationError("chi2_sf needs x >= 0")
    return gamma_q(0.5 * d, 0.5 * x)


@dataclass(frozen=True)
class LrTestConfig:
    """Fit settings for both sides of the test.

    With ``mle.freeze_theta`` the statistic is evaluated at the supplied
    theta (the regime where the chi-squared reference holds).
    """

    mle: MleConfig = field(default_factory=lambda: MleConfig(freeze_theta=True, phi_solver="newton"))
    alpha: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "LrTestConfig":
        d = dict(d)
        mle = MleConfig.from_dict(d.pop("mle")) if "mle" in d else cls().mle
        return cls(mle=mle, **d)


@dataclass
class TestReport:
    statistic: float
    dof: int
    p_value: float
    alpha: float
    reject: bool
    nll_restricted: float
    nll_unrestricted: float
    phi_restricted: List[float]
    phi_unrestricted: List[float]
    theta_frozen: bool
    theta_restricted: List[float] = field(default_factory=list, repr=False)
    theta_unrestricted: List[float] = field(default_factory=list, repr=False)

    __test__ = False  # not a pytest class

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def summary(self) -> str:
        verdict = "reject MCAR" if self.reject else "cannot reject MCAR"
        regime = "fixed theta" if self.theta_frozen else "joint theta"
        return (
            f"LR={self.statistic:.4f} dof={self.dof} p={self.p_value:.4g} "
            f"alpha={self.alpha:g} -> {verdict} ({regime})"
        )


def lr_statistic(
    dataset: Dataset,
    theta0: ModelParams,
    config: LrTestConfig = LrTestConfig(),
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, Tuple[MleResult, MleResult]]:
    """Fit the MCAR and the unrestricted model; return the floored statistic.

    The restricted fit keeps phi at n_l / n and, unless theta is frozen,
    optimizes theta only. The unrestricted fit starts from the restricted
    optimum, so the nested statistic is non-negative up to solver slack
    (which the floor at 0 absorbs).
    """
    validate(dataset)
    rng = np.random.default_rng(0) if rng is None else rng
    phi0 = tuple(float(v) for v in mcar_phi(dataset))
    base = replace(config.mle, phi_init=phi0)
    restricted = mle_fit(dataset, theta0, replace(base, freeze_phi=True), rng)
    nll_r = observed_nll(restricted.theta, phi0, dataset)
    unrestricted = mle_fit(dataset, restricted.theta, base, rng)
    nll_u = observed_nll(unrestricted.theta, unrestricted.mechanism.phi, dataset)
    restricted.nll, unrestricted.nll = nll_r, nll_u
    return max(0.0, 2.0 * (nll_r - nll_u)), (restricted, unrestricted)


def mcar_test(
    dataset: Dataset,
    theta0: ModelParams,
    config: LrTestConfig = LrTestConfig(),
    rng: Optional[np.random.Generator] = None,
) -> TestReport:
    stat, (res_r, res_u) = lr_statistic(dataset, theta0, config, rng)
    dof = dataset.n_classes - 1
    p = chi2_sf(stat, dof)
    return TestReport(
        statistic=stat,
        dof=dof,
        p_value=p,
        alpha=config.alpha,
        reject=p < config.alpha,
        nll_restricted=res_r.nll,
        nll_unrestricted=res_u.nll,
        phi_restricted=[float(v) for v in res_r.mechanism.phi],
        phi_unrestricted=[float(v) for v in res_u.mechanism.phi],
        theta_frozen=config.mle.freeze_theta,
        theta_restricted=res_r.theta.flat().tolist(),
        theta_unrestricted=res_u.theta.flat().tolist(),
    )
