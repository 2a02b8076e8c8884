"""Semi-supervised learning with informative (self-masked MNAR) labels.

Estimate the per-class labeling probabilities, debias semi-supervised risks
with inverse propensity weights, and test whether labels are MCAR.
"""

from .core import (
    EPS_PHI,
    EPS_PROB,
    MISSING,
    Dataset,
    DivergenceError,
    Mechanism,
    SealedLabels,
    ValidationError,
    validate,
)
from .mcartest import LrTestConfig, TestReport, chi2_sf, lr_statistic, mcar_test
from .mechanism import (
    Buffer,
    ClassPrior,
    MleConfig,
    buffer_update,
    class_prior_from_model,
    mle_fit,
    moment_estimator,
    nll_grad_phi,
    nll_hessian_phi,
    observed_nll,
)
from .model import ModelParams, init_params, predict_proba, supervised_loss_grad, unsupervised_loss_grad
from .risk import RiskConfig, adaptive_threshold, cc_risk, debiased_ssl_risk, ipw_risk, ssl_risk
from .scenario import (
    GaussianMixtureSpec,
    ScenarioSpec,
    apply_mask,
    compose_mechanism,
    geometric_counts,
    synth_gaussian_mixture,
)
from .train import MetricsReport, TrainConfig, evaluate, normalized_phi_mse, train_debiased

__version__ = "0.1.0"
