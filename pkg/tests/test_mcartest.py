import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnarssl import (
    LrTestConfig,
    MleConfig,
    ScenarioSpec,
    ValidationError,
    apply_mask,
    chi2_sf,
    init_params,
    lr_statistic,
    mcar_test,
    synth_gaussian_mixture,
)
from mnarssl.mcartest import gamma_q
from mnarssl.scenario import MCAR, ClassBernoulli, bayes_params, default_mixture


def data(masking, per_class=1000, K=2, seed=0, sep=3.0):
    spec = default_mixture(K, 2, per_class, separation=sep)
    full = synth_gaussian_mixture(spec, np.random.default_rng(seed))
    ds, _ = apply_mask(full, ScenarioSpec(masking), np.random.default_rng(seed + 1))
    return ds, spec


def test_chi2_at_zero():
    for d in (1, 2, 7, 50):
        assert chi2_sf(0.0, d) == 1.0


def test_chi2_two_dof_closed_form():
    assert chi2_sf(2.0, 2) == pytest.approx(math.exp(-1.0), abs=1e-15)


def test_chi2_critical_value():
    assert abs(chi2_sf(3.841459, 1) - 0.05) < 1e-4


def test_chi2_against_mpmath():
    for d in (1, 3, 10, 25, 50):
        for x in (0.01, 0.5, 3.0, 17.0, 49.0, 100.0):
            ref = float(mpmath.gammainc(d / 2, x / 2, mpmath.inf, regularized=True))
            assert abs(chi2_sf(x, d) - ref) < 1e-10


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 99.0), st.floats(0.01, 1.0), st.integers(1, 50))
def test_chi2_decreasing(x, dx, d):
    a, b = chi2_sf(x, d), chi2_sf(x + dx, d)
    assert b <= a
    # strict wherever both values are distinguishable from the endpoints in double precision
    if 1e-300 < b and a < 1 - 1e-12:
        assert b < a


def test_chi2_errors():
    with pytest.raises(ValidationError):
        chi2_sf(-1.0, 2)
    with pytest.raises(ValidationError):
        chi2_sf(1.0, 0)
    with pytest.raises(ValidationError):
        gamma_q(0.0, 1.0)


def test_mcar_data_not_rejected():
    ds, spec = data(MCAR(0.4), seed=2)
    rep = mcar_test(ds, bayes_params(spec))
    assert rep.p_value > 0.05 and not rep.reject
    assert rep.theta_frozen and rep.dof == 1


def test_strongly_informative_rejected():
    ds, spec = data(ClassBernoulli((0.9, 0.05)), per_class=5000, seed=3)
    rep = mcar_test(ds, bayes_params(spec))
    assert rep.p_value < 1e-4 and rep.reject


def test_report_consistency():
    ds, spec = data(ClassBernoulli((0.6, 0.4)), seed=4)
    rep = mcar_test(ds, bayes_params(spec), LrTestConfig(alpha=0.01))
    assert rep.statistic >= 0
    assert rep.p_value == chi2_sf(rep.statistic, rep.dof)
    assert rep.reject == (rep.p_value < 0.01)
    assert rep.phi_restricted == [ds.n_labeled / ds.n] * 2
    assert rep.statistic == pytest.approx(2 * (rep.nll_restricted - rep.nll_unrestricted), abs=1e-9) \
        or rep.statistic == 0.0
    d = rep.to_dict()
    assert d["dof"] == 1 and "theta_restricted" in d
    assert "reject" in rep.summary() and "fixed theta" in rep.summary()


def test_joint_regime_nonnegative():
    ds, _ = data(ClassBernoulli((0.7, 0.3)), per_class=300, seed=5)
    cfg = LrTestConfig(mle=MleConfig(epochs=10))
    stat, (res_r, res_u) = lr_statistic(ds, init_params("linear", 2, 2), cfg, np.random.default_rng(0))
    assert stat >= 0
    rep = mcar_test(ds, init_params("linear", 2, 2), cfg, np.random.default_rng(0))
    assert not rep.theta_frozen and "joint theta" in rep.summary()


def test_alpha_validation():
    with pytest.raises(ValidationError):
        LrTestConfig(alpha=1.5)
    cfg = LrTestConfig.from_dict({"alpha": 0.1, "mle": {"freeze_theta": True, "phi_solver": "newton"}})
    assert cfg.alpha == 0.1 and cfg.mle.freeze_theta
