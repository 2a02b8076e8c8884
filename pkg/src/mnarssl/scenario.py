"""Synthetic data and label-masking processes.

Masks depend on the label only (self-masked), so ``r`` is independent of
``x`` given ``y`` by construction. Hidden labels go into a
:class:`~mnarssl.core.SealedLabels` returned next to the masked dataset.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from .core import MISSING, Dataset, SealedLabels, ValidationError, validate
from .model import ModelParams


@dataclass(frozen=True)
class MCAR:
    rate: float


@dataclass(frozen=True)
class ClassBernoulli:
    phi: Tuple[float, ...]


@dataclass(frozen=True)
class GeometricImbalance:
    """Exact per-class labeled counts ``n1 * gamma**(-(k-1)/(K-1))``.

    With ``side="unlabeled-too"`` the unlabeled pool is also capped per
    class, using ``unlabeled_n1`` and ``unlabeled_gamma`` (default
    ``1/gamma``); samples selected in neither set are dropped.
    """

    n1: int
    gamma: float
    side: str = "labeled"
    unlabeled_n1: Optional[int] = None
    unlabeled_gamma: Optional[float] = None


@dataclass(frozen=True)
class Composed:
    """Mechanism built from an intermediate score: p(r|y) = sum_s p(r|s) p(s|y)."""

    p_r_given_s: Tuple[float, ...]
    p_s_given_y: Tuple[Tuple[float, ...], ...]


Masking = Union[MCAR, ClassBernoulli, GeometricImbalance, Composed]


@dataclass(frozen=True)
class ScenarioSpec:
    masking: Masking
    seed: int = 0

    def __post_init__(self) -> None:
        m = self.masking
        if isinstance(m, MCAR) and not 0.0 <= m.rate <= 1.0:
            raise ValidationError("MCAR rate must lie in [0, 1]")
        if isinstance(m, ClassBernoulli) and not all(0.0 <= p <= 1.0 for p in m.phi):
            raise ValidationError("ClassBernoulli phi must lie in [0, 1]")
        if isinstance(m, GeometricImbalance):
            if m.n1 < 1:
                raise ValidationError("GeometricImbalance requires n1 >= 1")
            if m.gamma <= 0:
                raise ValidationError("GeometricImbalance requires gamma > 0")
            if m.side not in ("labeled", "unlabeled-too"):
                raise ValidationError(f"unknown side {m.side!r}")
            if m.side == "unlabeled-too" and (m.unlabeled_n1 is None or m.unlabeled_n1 < 1):
                raise ValidationError("side='unlabeled-too' requires unlabeled_n1 >= 1")
        if isinstance(m, Composed):
            _check_composed(m.p_r_given_s, m.p_s_given_y)

    def to_dict(self) -> dict[str, Any]:
        m = self.masking
        kind = {MCAR: "mcar", ClassBernoulli: "class_bernoulli",
                GeometricImbalance: "geometric", Composed: "composed"}[type(m)]
        body = {k: (list(map(list, v)) if k == "p_s_given_y" else list(v) if isinstance(v, tuple) else v)
                for k, v in m.__dict__.items()}
        return {"kind": kind, **body, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioSpec":
        d = dict(d)
        kind = d.pop("kind")
        seed = int(d.pop("seed", 0))
        if kind == "mcar":
            m: Masking = MCAR(float(d["rate"]))
        elif kind == "class_bernoulli":
            m = ClassBernoulli(tuple(float(p) for p in d["phi"]))
        elif kind == "geometric":
            m = GeometricImbalance(
                int(d["n1"]), float(d["gamma"]), d.get("side", "labeled"),
                d.get("unlabeled_n1"), d.get("unlabeled_gamma"),
            )
        elif kind == "composed":
            m = Composed(tuple(map(float, d["p_r_given_s"])),
                         tuple(tuple(map(float, row)) for row in d["p_s_given_y"]))
        else:
            raise ValidationError(f"unknown masking kind {kind!r}")
        return cls(m, seed)


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Isotropic Gaussian classes: x | y=k ~ N(means[k], sigma^2 I)."""

    means: NDArray[np.float64]
    sigma: float
    counts: Tuple[int, ...]

    def __post_init__(self) -> None:
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.sigma <= 0:
            raise ValidationError("sigma must be > 0")
        if len(self.counts) != means.shape[0]:
            raise ValidationError("one count per class mean is required")
        if min(self.counts) < 1:
            raise ValidationError("class counts must be >= 1")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def prior(self) -> NDArray[np.float64]:
        c = np.asarray(self.counts, dtype=np.float64)
        return c / c.sum()

    def to_dict(self) -> dict[str, Any]:
        return {"means": self.means.tolist(), "sigma": self.sigma, "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GaussianMixtureSpec":
        return cls(np.asarray(d["means"], dtype=np.float64), float(d["sigma"]), tuple(d["counts"]))


def geometric_counts(n1: int, gamma: float, n_classes: int) -> NDArray[np.int64]:
    """Per-class counts ``round(n1 * gamma**(-(k-1)/(K-1)))``, at least 1.

    Rounding is half-to-even.
    """
    if n_classes < 2:
        raise ValidationError("geometric_counts needs K >= 2")
    if gamma <= 0:
        raise ValidationError("gamma must be > 0")
    if n1 < 1:
        raise ValidationError("n1 must be >= 1")
    k = np.arange(n_classes)
    raw = n1 * np.power(float(gamma), -k / (n_classes - 1))
    return np.maximum(np.round(raw), 1).astype(np.int64)


def _check_composed(p_r_given_s, p_s_given_y) -> Tuple[NDArray, NDArray]:
    prs = np.asarray(p_r_given_s, dtype=np.float64)
    psy = np.asarray(p_s_given_y, dtype=np.float64)
    if prs.ndim != 1 or psy.ndim != 2 or psy.shape[1] != prs.shape[0]:
        raise ValidationError(
            f"dimension mismatch: p_r_given_s has {prs.shape}, p_s_given_y has {psy.shape}"
        )
    if np.any(prs < 0) or np.any(prs > 1):
        raise ValidationError("p_r_given_s must lie in [0, 1]")
    if np.any(psy < 0) or np.any(np.abs(psy.sum(axis=1) - 1.0) > 1e-9):
        raise ValidationError("rows of p_s_given_y must be probability vectors")
    return prs, psy


def compose_mechanism(p_r_given_s, p_s_given_y) -> NDArray[np.float64]:
    """phi_y = sum_s p(r=1|s) p(s|y), one entry per row of ``p_s_given_y``.

    Returns the raw vector; it may contain 0 or 1, which :class:`Mechanism`
    would reject.
    """
    prs, psy = _check_composed(p_r_given_s, p_s_given_y)
    return psy @ prs


# Subtlety-score preset for a benign/malignant nodule task. Observation
# probability is 0.1 for subtle scores {1,2,3} and 0.9 for obvious {4,5}.
# The benign row puts 41.25% of its mass on subtle scores, giving
# phi_benign = 0.57. With these observation probabilities phi can never
# exceed 0.9, so the malignant row puts all its mass on obvious scores.
NODULE_PRESET = Composed(
    p_r_given_s=(0.1, 0.1, 0.1, 0.9, 0.9),
    p_s_given_y=(
        (0.15, 0.15, 0.1125, 0.30, 0.2875),
        (0.0, 0.0, 0.0, 0.40, 0.60),
    ),
)


def synth_gaussian_mixture(spec: GaussianMixtureSpec, rng: np.random.Generator) -> Dataset:
    """Draw a fully labeled dataset from the mixture, in shuffled order."""
    xs, ys = [], []
    for k, (mu, c) in enumerate(zip(spec.means, spec.counts)):
        xs.append(mu + spec.sigma * rng.standard_normal((c, spec.dim)))
        ys.append(np.full(c, k, dtype=np.int64))
    X, y = np.concatenate(xs), np.concatenate(ys)
    perm = rng.permutation(X.shape[0])
    return Dataset.fully_labeled(X[perm], y[perm], spec.n_classes)


def bayes_params(spec: GaussianMixtureSpec, prior: Optional[NDArray] = None) -> ModelParams:
    """Linear-softmax weights equal to the true p(y|x) of the mixture."""
    prior = spec.prior if prior is None else np.asarray(prior, dtype=np.float64)
    s2 = spec.sigma ** 2
    W = spec.means.T / s2
    b = -0.5 * np.sum(spec.means ** 2, axis=1) / s2 + np.log(prior)
    return ModelParams("linear", (W, b))


def scenario_phi(spec: ScenarioSpec, n_classes: int) -> Optional[NDArray[np.float64]]:
    """The mechanism implied by a Bernoulli-type spec (None for exact counts)."""
    m = spec.masking
    if isinstance(m, MCAR):
        return np.full(n_classes, m.rate)
    if isinstance(m, ClassBernoulli):
        return np.asarray(m.phi, dtype=np.float64)
    if isinstance(m, Composed):
        return compose_mechanism(m.p_r_given_s, m.p_s_given_y)
    return None


def apply_mask(
    full: Dataset, spec: ScenarioSpec, rng: np.random.Generator
) -> Tuple[Dataset, SealedLabels]:
    """Hide labels according to ``spec``.

    Returns the masked dataset and the sealed ground truth (all labels plus
    the mechanism that generated the mask).
    """
    y = np.asarray(full.labels)
    if np.any(y == MISSING) or np.any(full.indicator != 1):
        raise ValidationError("apply_mask needs a fully labeled dataset")
    K = full.n_classes
    m = spec.masking
    keep = np.arange(full.n)

    if isinstance(m, GeometricImbalance):
        counts = geometric_counts(m.n1, m.gamma, K)
        u_counts = None
        if m.side == "unlabeled-too":
            ug = m.unlabeled_gamma if m.unlabeled_gamma is not None else 1.0 / m.gamma
            u_counts = geometric_counts(m.unlabeled_n1, ug, K)
        r = np.zeros(full.n, dtype=np.int8)
        chosen = np.zeros(full.n, dtype=bool)
        phi_star = np.zeros(K)
        for k in range(K):
            idx = np.flatnonzero(y == k)
            need = counts[k] + (0 if u_counts is None else u_counts[k])
            if idx.size < need:
                raise ValidationError(
                    f"class {k} has {idx.size} samples but {need} were requested"
                )
            pick = rng.permutation(idx)
            r[pick[:counts[k]]] = 1
            if u_counts is None:
                chosen[idx] = True
                phi_star[k] = counts[k] / idx.size
            else:
                chosen[pick[:need]] = True
                phi_star[k] = counts[k] / need
        keep = np.flatnonzero(chosen)
        r = r[keep]
    else:
        phi = scenario_phi(spec, K)
        if phi.shape[0] != K:
            raise ValidationError(f"mechanism has {phi.shape[0]} entries for K={K} classes")
        r = (rng.random(full.n) < phi[y]).astype(np.int8)
        phi_star = phi

    truth = y[keep]
    masked = Dataset(full.features[keep], np.where(r == 1, truth, MISSING), r, K)
    validate(masked)
    return masked, SealedLabels(truth, phi_star)


def default_mixture(
    n_classes: int = 2,
    dim: int = 2,
    per_class: int = 1000,
    separation: float = 2.0,
    sigma: float = 1.0,
) -> GaussianMixtureSpec:
    """Class means on signed axes; a convenient desk-scale default.

    Two classes sit at +-separation/2 on the first axis. Otherwise class k
    sits at +-separation on axis ``k % dim``.
    """
    means = np.zeros((n_classes, dim))
    if n_classes == 2:
        means[0, 0], means[1, 0] = -separation / 2, separation / 2
    else:
        for k in range(n_classes):
            means[k, k % dim] = separation * (-1) ** (k // dim)
    return GaussianMixtureSpec(means, sigma, (per_class,) * n_classes)
