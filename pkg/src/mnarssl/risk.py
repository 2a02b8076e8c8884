"""Empirical risk estimators for classifiers trained on partially labeled data.

All estimators share one engine working on a labeled block and an
unlabeled block. Each block carries a scale ``alpha`` so that
``sum_{block} alpha * f_i`` estimates ``(1/n) sum_i f_i``: on the full
dataset ``alpha = 1/n``; on minibatches of sizes b_l, b_u it is
``n_l / (n b_l)`` and ``n_u / (n b_u)``.

For an unlabeled sample the debiasing weight ``(r_i - phi_{y_i}) / phi_{y_i}``
is exactly -1 whatever the hidden label is, so the estimator never needs
the missing labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from .core import EPS_PHI, EPS_PROB, Dataset, ValidationError
from .model import ModelParams, backward, logits, softmax, unlabeled_terms

MECHANISM_SOURCES = ("fixed", "moment-buffered", "moment-gradient", "mcar")


@dataclass(frozen=True)
class RiskConfig:
    lam: float = 1.0
    unlabeled_loss: str = "entropy"
    tau0: float = 0.95
    beta: float = 0.0
    mechanism: str = "fixed"
    eps_phi: float = EPS_PHI

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if not 0.0 < self.tau0 <= 1.0:
            raise ValidationError("tau0 must lie in (0, 1]")
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.mechanism not in MECHANISM_SOURCES:
            raise ValidationError(f"unknown mechanism source {self.mechanism!r}")
        if self.unlabeled_loss not in ("entropy", "pseudo-label"):
            raise ValidationError(f"unknown unlabeled loss {self.unlabeled_loss!r}")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RiskConfig":
        """Build from a config mapping; ``lambda`` is accepted for ``lam``."""
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def adaptive_threshold(phi, tau0: float, beta: float) -> NDArray[np.float64]:
    """Per-class pseudo-label thresholds ``tau0 * (phi_k / max phi) ** beta``.

    The most observed class keeps the strictest threshold ``tau0``.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if np.any(phi <= 0):
        raise ValidationError("adaptive_threshold needs phi > 0")
    if not 0.0 < tau0 <= 1.0 or beta < 0:
        raise ValidationError("need tau0 in (0, 1] and beta >= 0")
    return tau0 * (phi / phi.max()) ** beta


def _thresholds(cfg: RiskConfig, phi: Optional[NDArray]):
    if cfg.beta > 0 and phi is not None:
        return adaptive_threshold(phi, cfg.tau0, cfg.beta)
    return cfg.tau0


def batch_risk(
    theta: ModelParams,
    X_l: NDArray,
    y_l: NDArray,
    X_u: NDArray,
    objective: str,
    cfg: RiskConfig,
    phi: Optional[NDArray] = None,
    alpha_l: float = 1.0,
    alpha_u: float = 1.0,
    label_freq: Optional[NDArray] = None,
) -> Tuple[float, ModelParams, Optional[NDArray]]:
    """Value and theta-gradient of one risk on a labeled + unlabeled block.

    ``objective`` is ``cc`` (mean labeled loss), ``ipw``, ``ssl`` (MCAR
    semi-supervised risk: labeled mean plus ``lam`` times unlabeled mean)
    or ``debiased``. With ``cfg.mechanism == "moment-gradient"`` phi is
    rebuilt from the model as ``label_freq / p_hat(theta)`` and gradients
    flow through it; ``label_freq`` holds the labeled fraction per class.
    Returns ``(value, grad, phi_used)``.
    """
    y_l = np.asarray(y_l, dtype=np.int64)
    m_l, m_u = X_l.shape[0], X_u.shape[0]
    X = np.concatenate([X_l, X_u]) if m_u else X_l
    P = softmax(logits(theta, X))
    P_l, P_u = P[:m_l], P[m_l:]
    rows = np.arange(m_l)
    K = P.shape[1]
    G = np.zeros_like(P)
    use_u = cfg.lam > 0 and objective in ("ssl", "debiased")

    sup = -np.log(np.maximum(P_l[rows, y_l], EPS_PROB))
    dsup = P_l.copy()
    dsup[rows, y_l] -= 1.0

    if objective in ("cc", "ssl"):
        w_sup = np.full(m_l, 1.0 / max(m_l, 1))
        value = float(w_sup @ sup)
        G[:m_l] += w_sup[:, None] * dsup
        if use_u and m_u:
            tu, du = unlabeled_terms(P_u, cfg.unlabeled_loss, cfg.tau0)
            value += cfg.lam * float(tu.mean())
            G[m_l:] += (cfg.lam / m_u) * du
        return value, backward(theta, X, G), None

    if objective not in ("ipw", "debiased"):
        raise ValidationError(f"unknown risk objective {objective!r}")

    through_phi = cfg.mechanism == "moment-gradient"
    if through_phi:
        if label_freq is None:
            raise ValidationError("moment-gradient needs the labeled class frequencies")
        omega = np.concatenate([np.full(m_l, alpha_l), np.full(m_u, alpha_u)])
        p_hat = omega @ P
        p_hat = p_hat / omega.sum()
        raw = np.asarray(label_freq) / p_hat
        phi = np.clip(raw, cfg.eps_phi, 1.0 - cfg.eps_phi)
        free = (raw > cfg.eps_phi) & (raw < 1.0 - cfg.eps_phi)
    else:
        if phi is None:
            raise ValidationError("ipw/debiased risk needs phi")
        phi = np.asarray(phi, dtype=np.float64)
        if phi.shape != (K,) or np.any(phi <= 0):
            raise ValidationError("phi must have one positive entry per class")

    inv = 1.0 / phi[y_l]
    value = alpha_l * float(inv @ sup)
    G[:m_l] += (alpha_l * inv)[:, None] * dsup
    # d value / d (1/phi_k), accumulated per class for the moment-gradient path
    d_inv = np.zeros(K)
    np.add.at(d_inv, y_l, alpha_l * sup)

    if objective == "debiased" and cfg.lam > 0:
        tau = _thresholds(cfg, phi)
        tl, dl = unlabeled_terms(P_l, cfg.unlabeled_loss, tau)
        w_l = -cfg.lam * alpha_l * (inv - 1.0)
        value += float(w_l @ tl)
        G[:m_l] += w_l[:, None] * dl
        np.add.at(d_inv, y_l, -cfg.lam * alpha_l * tl)
        if m_u:
            tu, du = unlabeled_terms(P_u, cfg.unlabeled_loss, tau)
            value += cfg.lam * alpha_u * float(tu.sum())
            G[m_l:] += (cfg.lam * alpha_u) * du

    if through_phi:
        # 1/phi_k = p_hat_k / f_k on unclamped coordinates
        a = np.zeros(K)
        a[free] = d_inv[free] / np.asarray(label_freq, dtype=np.float64)[free] / omega.sum()
        G += omega[:, None] * P * (a[None, :] - (P @ a)[:, None])

    return value, backward(theta, X, G), phi


def _blocks(dataset: Dataset):
    lab = dataset.labeled_mask
    X = dataset.features
    return X[lab], dataset.labels[lab], X[~lab]


def cc_risk(theta: ModelParams, dataset: Dataset, with_grad: bool = False):
    """Mean supervised loss over the labeled samples."""
    if dataset.n_labeled < 1:
        raise ValidationError("no labeled samples")
    X_l, y_l, X_u = _blocks(dataset)
    value, grad, _ = batch_risk(theta, X_l, y_l, X_u[:0], "cc", RiskConfig(lam=0.0))
    return (value, grad) if with_grad else value


def ipw_risk(theta: ModelParams, dataset: Dataset, phi, with_grad: bool = False):
    """``(1/n) sum_{r_i=1} loss_i / phi_{y_i}``."""
    X_l, y_l, X_u = _blocks(dataset)
    a = 1.0 / dataset.n
    value, grad, _ = batch_risk(
        theta, X_l, y_l, X_u[:0], "ipw", RiskConfig(lam=0.0), phi, a, a
    )
    return (value, grad) if with_grad else value


def ssl_risk(theta: ModelParams, dataset: Dataset, config: RiskConfig) -> Tuple[float, ModelParams]:
    """Classical SSL risk: labeled mean loss + lam * unlabeled mean loss.

    When there is no unlabeled sample the second term is 0.
    """
    X_l, y_l, X_u = _blocks(dataset)
    value, grad, _ = batch_risk(theta, X_l, y_l, X_u, "ssl", config)
    return value, grad


def debiased_ssl_risk(
    theta: ModelParams, dataset: Dataset, phi, config: RiskConfig
) -> Tuple[float, ModelParams]:
    """Inverse-propensity-weighted SSL risk.

    ``(1/n) sum_i r_i loss_i / phi_{y_i}
      - (lam/n) sum_i (r_i - phi_{y_i}) / phi_{y_i} * uloss_i``.

    With ``config.mechanism == "moment-gradient"`` the ``phi`` argument is
    ignored and phi is the moment estimate built from the current model.
    """
    X_l, y_l, X_u = _blocks(dataset)
    a = 1.0 / dataset.n
    freq = dataset.labeled_counts() / dataset.n
    value, grad, _ = batch_risk(theta, X_l, y_l, X_u, "debiased", config, phi, a, a, freq)
    return value, grad
