"""Debiased semi-supervised training and evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from .core import (
    EPS_PROB,
    Dataset,
    DivergenceError,
    Mechanism,
    MinibatchStream,
    SealedLabels,
    ValidationError,
    validate,
)
from .mechanism import DIVERGENCE_PATIENCE, Buffer, ClassPrior, buffer_update, class_prior_from_model
from .model import ModelParams, predict_proba
from .risk import RiskConfig, batch_risk

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the training loop.

    ``objective`` selects the debiased risk (``debiased``) or the classical
    MCAR semi-supervised risk (``ssl``). The mechanism source lives in
    ``risk.mechanism``.
    """

    epochs: int = 30
    batch_size: int = 64
    gamma_theta: float = 0.1
    momentum: float = 0.0
    buffer_momentum: float = 0.99
    risk: RiskConfig = field(default_factory=RiskConfig)
    objective: str = "debiased"
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.gamma_theta <= 0:
            raise ValidationError("need epochs >= 0, batch_size >= 1, gamma_theta > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if not 0.0 <= self.buffer_momentum <= 1.0:
            raise ValidationError("buffer_momentum must lie in [0, 1]")
        if self.objective not in ("debiased", "ssl"):
            raise ValidationError(f"unknown objective {self.objective!r}")
        if self.eval_every < 1:
            raise ValidationError("eval_every must be >= 1")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        if "risk" in d:
            d["risk"] = RiskConfig.from_dict(d["risk"])
        return cls(**d)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class MetricsReport:
    accuracy: Optional[float]
    per_class_accuracy: List[Optional[float]]
    test_loss: Optional[float]
    phi_mse: Optional[float] = None
    phi: Optional[List[float]] = None
    curves: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def normalized_phi_mse(phi_hat, phi_star) -> float:
    """``||phi_hat - phi_star||_2^2 / ||phi_star||_2^2``."""
    a = np.asarray(phi_hat, dtype=np.float64)
    b = np.asarray(phi_star, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError("phi vectors have different lengths")
    denom = float(b @ b)
    if denom == 0.0:
        raise ValidationError("phi_star is zero")
    d = a - b
    return float(d @ d) / denom


def evaluate(theta: ModelParams, features: NDArray, truth: SealedLabels) -> MetricsReport:
    """Accuracy, per-class accuracy and mean NLL on held-out labeled data."""
    y = truth.reveal()
    P = predict_proba(theta, np.atleast_2d(features))
    if P.shape[0] != y.shape[0]:
        raise ValidationError("truth and features have different lengths")
    correct = np.argmax(P, axis=1) == y
    K = P.shape[1]
    per_class: List[Optional[float]] = []
    for k in range(K):
        sel = y == k
        per_class.append(float(correct[sel].mean()) if sel.any() else None)
    loss = float(-np.mean(np.log(np.maximum(P[np.arange(y.size), y], EPS_PROB))))
    return MetricsReport(float(correct.mean()), per_class, loss)


def _moment_phi(freq: NDArray, prior: NDArray, eps: float) -> Mechanism:
    return Mechanism.clamped(freq / prior, eps)


def train_debiased(
    dataset: Dataset,
    theta0: ModelParams,
    config: TrainConfig = TrainConfig(),
    phi_input: Optional[Mechanism] = None,
    rng: Optional[np.random.Generator] = None,
    test: Optional[Tuple[NDArray, SealedLabels]] = None,
    phi_star: Optional[NDArray] = None,
) -> Tuple[ModelParams, Mechanism, MetricsReport]:
    """Minibatch SGD on the chosen risk with a pluggable mechanism.

    Every step draws one labeled and one unlabeled minibatch of
    ``batch_size`` each. An epoch is ``ceil(max(n_l, n_u) / batch_size)``
    steps. If ``phi_input`` is given it is used as a fixed mechanism;
    otherwise ``config.risk.mechanism`` must be ``mcar`` or a moment
    variant. ``test`` (features and sealed labels) and ``phi_star`` only
    feed the metrics; they never touch the updates.
    """
    validate(dataset)
    cfg = config
    rcfg = cfg.risk
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n, K = dataset.n, dataset.n_classes
    n_l, n_u = dataset.n_labeled, dataset.n_unlabeled
    freq = dataset.labeled_counts() / n
    X, y, r = dataset.features, dataset.labels, dataset.indicator

    source = "fixed" if phi_input is not None else rcfg.mechanism
    if source == "fixed" and phi_input is None:
        raise ValidationError("mechanism source 'fixed' needs phi_input")
    if phi_input is not None and phi_input.n_classes != K:
        raise ValidationError("phi_input length must equal the number of classes")
    step_cfg = replace(rcfg, mechanism=source)

    buffer: Optional[Buffer] = None
    if source == "fixed":
        mech = phi_input
    elif source == "mcar":
        mech = Mechanism.clamped(np.full(K, n_l / n), rcfg.eps_phi)
    elif source == "moment-buffered":
        buffer = Buffer(class_prior_from_model(theta0, X).p, cfg.buffer_momentum)
        mech = _moment_phi(freq, buffer.p, rcfg.eps_phi)
    else:
        mech = _moment_phi(freq, class_prior_from_model(theta0, X).p, rcfg.eps_phi)

    lab_idx, unl_idx = np.flatnonzero(r == 1), np.flatnonzero(r == 0)
    s_l = MinibatchStream(lab_idx, cfg.batch_size, rng)
    s_u = MinibatchStream(unl_idx, cfg.batch_size, rng)
    steps = math.ceil(max(n_l, n_u) / cfg.batch_size)

    theta = theta0
    velocity = theta0.zeros_like()
    curves: List[Dict[str, Any]] = []
    prev_risk, rising = math.inf, 0

    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(steps):
            bl, bu = s_l.next(), s_u.next()
            a_l = n_l / (n * bl.size)
            a_u = n_u / (n * bu.size) if bu.size else 0.0
            if buffer is not None:
                P = predict_proba(theta, X[np.concatenate([bl, bu])])
                w = np.concatenate([np.full(bl.size, a_l), np.full(bu.size, a_u)])
                buffer = buffer_update(buffer, ClassPrior(w @ P / w.sum(), "buffered"))
                mech = _moment_phi(freq, buffer.p, rcfg.eps_phi)
            value, grad, _ = batch_risk(
                theta, X[bl], y[bl], X[bu], cfg.objective, step_cfg,
                mech.phi, a_l, a_u, freq,
            )
            total += value
            if cfg.momentum:
                velocity = velocity.scale(cfg.momentum) + grad
                grad = velocity
            theta = theta.axpy(-cfg.gamma_theta, grad)

        mean_risk = total / max(steps, 1)
        if not math.isfinite(mean_risk) or not np.all(np.isfinite(theta.flat())):
            raise DivergenceError("training risk became non-finite", curves)
        rising = rising + 1 if mean_risk > prev_risk else 0
        prev_risk = mean_risk
        if rising >= DIVERGENCE_PATIENCE:
            raise DivergenceError(f"training risk increased for {rising} consecutive epochs", curves)

        if source == "moment-gradient":
            mech = _moment_phi(freq, class_prior_from_model(theta, X).p, rcfg.eps_phi)
        row: Dict[str, Any] = {"epoch": epoch, "train_risk": mean_risk}
        row.update({f"phi_{k + 1}": float(v) for k, v in enumerate(mech.phi)})
        if test is not None and (epoch + 1) % cfg.eval_every == 0:
            m = evaluate(theta, *test)
            row.update(test_accuracy=m.accuracy, test_loss=m.test_loss)
        if phi_star is not None:
            row["phi_mse"] = normalized_phi_mse(_raw(mech), phi_star)
        curves.append(row)
        log.debug("train epoch %d risk=%.6f", epoch, mean_risk)

    if source == "moment-gradient":
        mech = _moment_phi(freq, class_prior_from_model(theta, X).p, rcfg.eps_phi)

    if test is not None:
        report = evaluate(theta, *test)
    else:
        report = MetricsReport(None, [None] * K, None)
    report.curves = curves
    report.phi = [float(v) for v in mech.phi]
    if phi_star is not None:
        report.phi_mse = normalized_phi_mse(_raw(mech), phi_star)
    return theta, mech, report


def _raw(mech: Mechanism) -> NDArray:
    return mech.raw if mech.raw is not None else mech.phi
