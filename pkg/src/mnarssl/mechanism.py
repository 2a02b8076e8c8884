"""Estimating the label mechanism phi_k = P(r=1 | y=k).

The observed negative log-likelihood, for fixed model probabilities
``P[i, k] = p(k | x_i; theta)``, is

    l(phi) = - sum_{r_i=1} log(P[i, y_i] phi_{y_i})
             - sum_{r_i=0} log sum_k P[i, k] (1 - phi_k)

(the theta-free constant is dropped). It is convex in phi. Two estimators
are provided: the method of moments, which needs a class prior, and the
maximum-likelihood fit, which alternates minibatch steps on phi and theta.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from .core import (
    EPS_PHI,
    EPS_PROB,
    Dataset,
    DivergenceError,
    Mechanism,
    MinibatchStream,
    ValidationError,
    check_simplex,
    validate,
)
from .model import ModelParams, backward, logits, predict_proba, softmax

log = logging.getLogger(__name__)

DIVERGENCE_PATIENCE = 10


class DegenerateMechanismWarning(RuntimeWarning):
    """A log argument in the observed likelihood hit the probability floor."""


def _check_phi(phi, K: int) -> NDArray[np.float64]:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (K,):
        raise ValidationError(f"phi has shape {phi.shape}, expected ({K},)")
    if not np.all((phi > 0) & (phi < 1)):
        raise ValidationError("phi components must lie in (0, 1)")
    return phi


def _split(P: NDArray, dataset: Dataset):
    lab = dataset.labeled_mask
    return P[lab], dataset.labels[lab], P[~lab]


def _floored(a: NDArray) -> NDArray:
    if np.any(a <= EPS_PROB):
        warnings.warn("observed likelihood term at the probability floor", DegenerateMechanismWarning)
    return np.maximum(a, EPS_PROB)


# -- evaluators on precomputed probabilities ---------------------------------

def observed_nll_probs(P: NDArray, phi, dataset: Dataset) -> float:
    phi = _check_phi(phi, dataset.n_classes)
    P_l, y_l, P_u = _split(P, dataset)
    lab = _floored(P_l[np.arange(y_l.size), y_l] * phi[y_l])
    unl = _floored(P_u @ (1.0 - phi))
    return float(-np.sum(np.log(lab)) - np.sum(np.log(unl)))


def nll_grad_phi_probs(P: NDArray, phi, dataset: Dataset) -> NDArray[np.float64]:
    phi = _check_phi(phi, dataset.n_classes)
    P_l, y_l, P_u = _split(P, dataset)
    counts = np.bincount(y_l, minlength=dataset.n_classes)
    A = _floored(P_u @ (1.0 - phi))
    return -counts / phi + (P_u / A[:, None]).sum(axis=0)


def nll_hessian_phi_probs(P: NDArray, phi, dataset: Dataset) -> NDArray[np.float64]:
    phi = _check_phi(phi, dataset.n_classes)
    P_l, y_l, P_u = _split(P, dataset)
    counts = np.bincount(y_l, minlength=dataset.n_classes)
    A = _floored(P_u @ (1.0 - phi))
    Bs = P_u / A[:, None]
    return np.diag(counts / phi ** 2) + Bs.T @ Bs


# -- public evaluators --------------------------------------------------------

def observed_nll(theta: ModelParams, phi, dataset: Dataset) -> float:
    """Negative observed log-likelihood, summed over all samples."""
    return observed_nll_probs(predict_proba(theta, dataset.features), phi, dataset)


def nll_grad_phi(theta: ModelParams, phi, dataset: Dataset) -> NDArray[np.float64]:
    """Analytic gradient of :func:`observed_nll` in phi.

    Component k is ``-n_k / phi_k + sum_{r_i=0} P[i,k] / A_i`` with
    ``A_i = sum_j P[i,j] (1 - phi_j)``.
    """
    return nll_grad_phi_probs(predict_proba(theta, dataset.features), phi, dataset)


def nll_hessian_phi(theta: ModelParams, phi, dataset: Dataset) -> NDArray[np.float64]:
    """Hessian in phi: ``diag(n_k / phi_k^2) + sum_{r_i=0} b_i b_i^T / A_i^2``."""
    return nll_hessian_phi_probs(predict_proba(theta, dataset.features), phi, dataset)


def nll_grad_logits(P: NDArray, phi: NDArray, labels: NDArray, indicator: NDArray) -> NDArray:
    """Per-sample gradient of the observed NLL w.r.t. the logits."""
    G = P.copy()
    lab = indicator == 1
    G[np.flatnonzero(lab), labels[lab]] -= 1.0
    P_u = P[~lab]
    c = 1.0 - phi
    A = np.maximum(P_u @ c, EPS_PROB)
    G[~lab] = P_u * (1.0 - c[None, :] / A[:, None])
    return G


def constraint_residual(phi, counts: NDArray, n: int) -> float:
    """``sum_y (n_y / n) / phi_y - 1``; zero when the implied prior sums to one."""
    return float(np.sum(counts / n / np.asarray(phi)) - 1.0)


# -- method of moments --------------------------------------------------------

@dataclass(frozen=True)
class ClassPrior:
    p: NDArray[np.float64]
    provenance: str = "user-prior"

    def __post_init__(self) -> None:
        object.__setattr__(self, "p", check_simplex(self.p, 1e-9, "class prior"))

    @classmethod
    def uniform(cls, K: int) -> "ClassPrior":
        return cls(np.full(K, 1.0 / K), "uniform")


@dataclass(frozen=True)
class Buffer:
    """Moving average of the model-based class prior."""

    p: NDArray[np.float64]
    momentum: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError("buffer momentum must lie in [0, 1]")
        object.__setattr__(self, "p", check_simplex(self.p, 1e-8, "buffer"))


def moment_estimator(dataset: Dataset, prior: ClassPrior, eps: float = EPS_PHI) -> Mechanism:
    """``phi_y = (labeled count of y / n) / prior_y``, clamped to (eps, 1-eps).

    The unclamped value is kept in ``Mechanism.raw``.
    """
    p = np.asarray(prior.p, dtype=np.float64)
    if p.shape != (dataset.n_classes,):
        raise ValidationError("prior length must equal the number of classes")
    if np.any(p <= 0):
        raise ValidationError("moment estimator needs every prior component > 0")
    raw = dataset.labeled_counts() / dataset.n / p
    return Mechanism.clamped(raw, eps)


def class_prior_from_model(theta: ModelParams, features: NDArray) -> ClassPrior:
    """Average predicted class distribution over all samples."""
    P = predict_proba(theta, np.atleast_2d(features))
    p = P.mean(axis=0)
    return ClassPrior(p / p.sum(), "model-based")


def buffer_update(buffer: Buffer, p_batch: ClassPrior) -> Buffer:
    p_batch_p = np.asarray(p_batch.p)
    if p_batch_p.shape != buffer.p.shape:
        raise ValidationError("buffer and batch prior shapes differ")
    mixed = buffer.momentum * buffer.p + (1.0 - buffer.momentum) * p_batch_p
    return Buffer(mixed / mixed.sum(), buffer.momentum)


# -- maximum likelihood -------------------------------------------------------

@dataclass(frozen=True)
class MleConfig:
    """Hyperparameters of the alternating maximum-likelihood fit.

    ``phi_solver="newton"`` replaces the minibatch phi step by a full-batch
    damped Newton solve (exact Hessian); with ``freeze_theta`` this gives
    the fixed-theta MLE to high accuracy. ``shared_phi`` ties all classes
    to one scalar; ``freeze_phi`` keeps phi at its initial value.
    """

    epochs: int = 50
    batch_size: int = 128
    gamma_phi: float = 0.1
    gamma_theta: float = 0.1
    penalty: float = 1.0
    multiplier_rate: float = 0.1
    use_constraint: bool = True
    phi_init: Optional[Tuple[float, ...]] = None
    eps_phi: float = EPS_PHI
    shared_phi: bool = False
    freeze_theta: bool = False
    freeze_phi: bool = False
    phi_solver: str = "sgd"
    newton_tol: float = 1e-10
    newton_max_iter: int = 100

    def __post_init__(self) -> None:
        if self.gamma_phi <= 0 or self.gamma_theta <= 0:
            raise ValidationError("learning rates must be > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.eps_phi < 0.5:
            raise ValidationError("eps_phi must lie in (0, 0.5)")
        if self.penalty < 0 or self.multiplier_rate < 0:
            raise ValidationError("penalty and multiplier_rate must be >= 0")
        if self.phi_solver not in ("sgd", "newton"):
            raise ValidationError(f"unknown phi_solver {self.phi_solver!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "MleConfig":
        d = dict(d)
        if d.get("phi_init") is not None:
            d["phi_init"] = tuple(float(v) for v in d["phi_init"])
        return cls(**d)


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    nll: float
    residual: float
    phi: Tuple[float, ...]


@dataclass
class MleResult:
    mechanism: Mechanism
    theta: ModelParams
    trace: List[TraceRow]
    nll: float
    multiplier: float = 0.0
    theta_frozen: bool = False

    def __iter__(self):
        return iter((self.mechanism, self.theta, self.trace))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


def _newton_phi(
    P: NDArray, dataset: Dataset, phi0: NDArray, cfg: MleConfig
) -> NDArray[np.float64]:
    """Damped Newton on the convex fixed-theta objective, inside the clamp box."""
    lo, hi = cfg.eps_phi, 1.0 - cfg.eps_phi
    K = dataset.n_classes
    phi = np.clip(np.asarray(phi0, dtype=np.float64), lo, hi)
    if cfg.shared_phi:
        phi = np.full(K, phi.mean())

    def f(v):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateMechanismWarning)
            return observed_nll_probs(P, v, dataset)

    fx = f(phi)
    for _ in range(cfg.newton_max_iter):
        g = nll_grad_phi_probs(P, phi, dataset)
        H = nll_hessian_phi_probs(P, phi, dataset)
        if cfg.shared_phi:
            g1, h1 = g.sum(), H.sum()
            step = np.full(K, -g1 / h1)
            decrement = g1 * g1 / h1
        else:
            try:
                step = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                step = -g / np.maximum(np.diag(H), 1e-12)
            decrement = float(-g @ step)
        # active box constraints: do not push further outward
        blocked = ((phi <= lo) & (step < 0)) | ((phi >= hi) & (step > 0))
        step[blocked] = 0.0
        if decrement < cfg.newton_tol or not np.any(step):
            break
        t = 1.0
        while True:
            cand = np.clip(phi + t * step, lo, hi)
            fc = f(cand)
            if fc <= fx + 1e-4 * float(g @ (cand - phi)):
                break
            t *= 0.5
            if t < 1e-12:
                return phi
        phi, fx = cand, fc
    return phi


def mle_fit(
    dataset: Dataset,
    theta0: ModelParams,
    config: MleConfig = MleConfig(),
    rng: Optional[np.random.Generator] = None,
) -> MleResult:
    """Jointly minimize the observed NLL over (theta, phi).

    Each iteration draws one labeled and one unlabeled minibatch, takes a
    gradient step on phi through a sigmoid reparametrization (with an
    augmented-Lagrangian term enforcing ``sum_y (n_y/n)/phi_y = 1``), then
    draws fresh minibatches and takes a gradient step on theta. Minibatch
    sums are reweighted so each step targets the full-data objective
    divided by n. An epoch is ``ceil(max(n_l, n_u) / batch_size)`` steps.
    """
    validate(dataset)
    cfg = config
    rng = np.random.default_rng(0) if rng is None else rng
    n, K = dataset.n, dataset.n_classes
    counts = dataset.labeled_counts().astype(np.float64)
    n_l, n_u = dataset.n_labeled, dataset.n_unlabeled
    lo, hi = cfg.eps_phi, 1.0 - cfg.eps_phi

    phi = np.full(K, n_l / n) if cfg.phi_init is None else np.asarray(cfg.phi_init, dtype=np.float64)
    if phi.shape != (K,):
        raise ValidationError("phi_init length must equal the number of classes")
    phi = np.clip(phi, lo, hi)
    if cfg.shared_phi:
        phi = np.full(K, phi.mean())
    s = _logit(phi)
    s_lo, s_hi = _logit(lo), _logit(hi)
    theta = theta0
    lam = 0.0

    X, y, r = dataset.features, dataset.labels, dataset.indicator
    lab_idx, unl_idx = np.flatnonzero(r == 1), np.flatnonzero(r == 0)
    streams = MinibatchStream(lab_idx, cfg.batch_size, rng), MinibatchStream(unl_idx, cfg.batch_size, rng)
    steps = math.ceil(max(n_l, n_u) / cfg.batch_size)

    def full_nll(th, ph):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateMechanismWarning)
            return observed_nll(th, ph, dataset)

    def batch():
        bl, bu = streams[0].next(), streams[1].next()
        idx = np.concatenate([bl, bu])
        w = np.concatenate([
            np.full(bl.size, n_l / (n * max(bl.size, 1))),
            np.full(bu.size, n_u / (n * max(bu.size, 1))),
        ])
        return idx, w

    trace: List[TraceRow] = []
    cur = full_nll(theta, phi)
    rising = 0

    if cfg.freeze_theta and cfg.phi_solver == "newton":
        if not cfg.freeze_phi:
            phi = _newton_phi(predict_proba(theta, X), dataset, phi, cfg)
        cur = full_nll(theta, phi)
        trace.append(TraceRow(0, cur, constraint_residual(phi, counts, n), tuple(float(v) for v in phi)))
        return MleResult(Mechanism(phi.copy(), phi.copy()), theta, trace, cur, 0.0, True)

    for epoch in range(cfg.epochs):
        if cfg.phi_solver == "newton" and not cfg.freeze_phi:
            phi = _newton_phi(predict_proba(theta, X), dataset, phi, cfg)
            s = _logit(phi)
        for _ in range(steps):
            phi_k = phi.copy()
            if cfg.phi_solver == "sgd" and not cfg.freeze_phi:
                idx, w = batch()
                P = predict_proba(theta, X[idx])
                lab = r[idx] == 1
                yl = y[idx][lab]
                g = np.zeros(K)
                np.add.at(g, yl, -w[lab] / phi[yl])
                A = np.maximum(P[~lab] @ (1.0 - phi), EPS_PROB)
                g += (w[~lab, None] * P[~lab] / A[:, None]).sum(axis=0)
                if cfg.use_constraint:
                    c = constraint_residual(phi, counts, n)
                    g += (lam + cfg.penalty * c) * (-counts / n / phi ** 2)
                gs = g * phi * (1.0 - phi)
                if cfg.shared_phi:
                    gs = np.full(K, gs.sum())
                s = np.clip(s - cfg.gamma_phi * gs, s_lo, s_hi)
                phi = _sigmoid(s)
                if cfg.use_constraint:
                    lam += cfg.multiplier_rate * constraint_residual(phi, counts, n)
            if not cfg.freeze_theta:
                idx, w = batch()
                Xb = X[idx]
                P = softmax(logits(theta, Xb))
                G = nll_grad_logits(P, phi_k, y[idx], r[idx]) * w[:, None]
                theta = theta.axpy(-cfg.gamma_theta, backward(theta, Xb, G))

        prev, cur = cur, full_nll(theta, phi)
        res = constraint_residual(phi, counts, n)
        trace.append(TraceRow(epoch, cur, res, tuple(float(v) for v in phi)))
        log.debug("mle epoch %d nll=%.6f residual=%.3e", epoch, cur, res)
        if not math.isfinite(cur) or not np.all(np.isfinite(theta.flat())):
            raise DivergenceError("observed NLL became non-finite", trace)
        rising = rising + 1 if cur > prev else 0
        if rising >= DIVERGENCE_PATIENCE:
            raise DivergenceError(f"observed NLL increased for {rising} consecutive epochs", trace)

    return MleResult(Mechanism(phi.copy(), phi.copy()), theta, trace, cur, lam, cfg.freeze_theta)


def mcar_phi(dataset: Dataset) -> NDArray[np.float64]:
    """Closed-form MCAR mechanism: every class observed with rate n_l / n."""
    return np.full(dataset.n_classes, dataset.n_labeled / dataset.n)
