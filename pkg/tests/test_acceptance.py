"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v`` or as a script with
``python tests/test_acceptance.py``.
"""

import json
import math
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from scipy import special

from mnarssl import (
    ClassPrior,
    Dataset,
    MleConfig,
    RiskConfig,
    ScenarioSpec,
    SealedLabels,
    TrainConfig,
    apply_mask,
    cc_risk,
    chi2_sf,
    compose_mechanism,
    debiased_ssl_risk,
    geometric_counts,
    init_params,
    ipw_risk,
    mcar_test,
    mle_fit,
    moment_estimator,
    nll_grad_phi,
    nll_hessian_phi,
    observed_nll,
    ssl_risk,
    synth_gaussian_mixture,
    train_debiased,
)
from mnarssl.model import ModelParams
from mnarssl.scenario import MCAR, NODULE_PRESET, ClassBernoulli, GeometricImbalance, bayes_params, default_mixture
from mnarssl.train import normalized_phi_mse

sys.path.insert(0, str(Path(__file__).parent))
from oracles import central_diff, probs_oracle, random_dataset, random_theta, rel_err  # noqa: E402


def criterion_1():
    t0 = time.perf_counter()
    worst = {"sgd": 0.0, "newton": 0.0}
    for seed in range(5):
        spec = default_mixture(3, 2, 400)
        full = synth_gaussian_mixture(spec, np.random.default_rng(seed))
        ds, _ = apply_mask(full, ScenarioSpec(MCAR(0.2 + 0.1 * seed)), np.random.default_rng(seed + 50))
        for solver in worst:
            cfg = MleConfig(shared_phi=True, phi_init=(0.5, 0.5, 0.5), phi_solver=solver)
            res = mle_fit(ds, init_params("linear", 2, 3, np.random.default_rng(seed)), cfg,
                          np.random.default_rng(seed))
            err = float(np.max(np.abs(res.mechanism.phi - ds.n_labeled / ds.n)))
            worst[solver] = max(worst[solver], err)
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-3 and dt < 10
    return ok, ", ".join(f"{k} max |phi0 - n_l/n| = {v:.1e}" for k, v in worst.items()) + f" over 5 datasets, {dt:.1f}s"


def criterion_2():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"phi-grad": 0.0, "phi-hessian": 0.0, "cc": 0.0, "ipw": 0.0, "ssl": 0.0, "debiased": 0.0}
    for t in range(100):
        n, K, d = int(rng.integers(5, 51)), int(rng.integers(2, 6)), int(rng.integers(1, 9))
        ds = random_dataset(rng, n, K, d)
        theta = random_theta(rng, ["linear", "mlp"][t % 2], d, K)
        phi = rng.uniform(0.1, 0.9, K)
        g = nll_grad_phi(theta, phi, ds)
        worst["phi-grad"] = max(worst["phi-grad"],
                                rel_err(g, central_diff(lambda p: observed_nll(theta, p, ds), phi)))
        H = nll_hessian_phi(theta, phi, ds)
        fd = np.array([central_diff(lambda p: nll_grad_phi(theta, p, ds)[k], phi) for k in range(K)])
        worst["phi-hessian"] = max(worst["phi-hessian"], rel_err(H, fd))
        cfg = RiskConfig(lam=1.0)
        risks = {
            "cc": lambda T: cc_risk(T, ds, True),
            "ipw": lambda T: ipw_risk(T, ds, phi, True),
            "ssl": lambda T: ssl_risk(T, ds, cfg),
            "debiased": lambda T: debiased_ssl_risk(T, ds, phi, cfg),
        }
        for name, f in risks.items():
            _, grad = f(theta)
            fd = central_diff(lambda v: f(theta.with_flat(v))[0], theta.flat())
            worst[name] = max(worst[name], rel_err(grad.flat(), fd))
    dt = time.perf_counter() - t0
    ok = all(v < 1e-5 for v in worst.values()) and dt < 30
    return ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {dt:.1f}s"


def criterion_3():
    rng = np.random.default_rng(3)
    min_eig = math.inf
    for t in range(100):
        K = int(rng.integers(2, 6))
        ds = random_dataset(rng, int(rng.integers(K, 51)), K, int(rng.integers(1, 9)))
        theta = random_theta(rng, ["linear", "mlp"][t % 2], ds.dim, K)
        H = nll_hessian_phi(theta, rng.uniform(0.01, 0.99, K), ds)
        min_eig = min(min_eig, float(np.linalg.eigvalsh(H).min()))
    ds = random_dataset(rng, 40, 4, 3)
    theta = random_theta(rng, "mlp", 3, 4)
    worst_gap = -math.inf
    for _ in range(1000):
        p1, p2, t = rng.uniform(0.001, 0.999, 4), rng.uniform(0.001, 0.999, 4), rng.random()
        lhs = observed_nll(theta, t * p1 + (1 - t) * p2, ds)
        rhs = t * observed_nll(theta, p1, ds) + (1 - t) * observed_nll(theta, p2, ds)
        worst_gap = max(worst_gap, lhs - rhs)
    ok = min_eig > 0 and worst_gap <= 1e-9
    return ok, f"smallest Hessian eigenvalue {min_eig:.3g}, worst convexity gap {worst_gap:.2e}"


# tiny fixed instance: four feature atoms, two classes, 12 samples
_ATOMS = np.array([-1.5, -0.5, 0.5, 1.5])
_PAIRS = [(0, 0)] * 2 + [(0, 1)] + [(1, 0)] * 2 + [(1, 1)] + [(2, 0)] + [(2, 1)] * 2 + [(3, 0)] + [(3, 1)] * 2
_THETA = ModelParams("linear", (np.array([[0.9, -0.4]]), np.array([0.2, -0.1])))


def _enumerated_risk():
    """(1/n) sum of the supervised loss, evaluated per (atom, label) cell with multiplicities."""
    P = probs_oracle(_THETA, _ATOMS[:, None])
    total = 0.0
    for a in range(4):
        for y in range(2):
            total += _PAIRS.count((a, y)) * -math.log(P[a, y])
    return total / len(_PAIRS)


def criterion_4(draws=100_000):
    t0 = time.perf_counter()
    phi_star = np.array([0.9, 0.1])
    x = _ATOMS[[a for a, _ in _PAIRS]][:, None]
    y = np.array([lab for _, lab in _PAIRS])
    n = y.size
    rng = np.random.default_rng(4)
    masks = rng.random((draws, n)) < phi_star[y]
    codes = masks @ (1 << np.arange(n))
    cfg = RiskConfig(lam=1.0)
    cache = {}
    for code in np.unique(codes):
        r = ((code >> np.arange(n)) & 1).astype(np.int8)
        ds = Dataset(x, np.where(r == 1, y, -1), r, 2)
        cc = cc_risk(_THETA, ds) if r.any() else math.nan
        cache[code] = (ipw_risk(_THETA, ds, phi_star), debiased_ssl_risk(_THETA, ds, phi_star, cfg)[0], cc)
    vals = np.array([cache[c] for c in codes])
    target = _enumerated_risk()
    z = {}
    for j, name in enumerate(("ipw", "debiased", "cc")):
        v = vals[:, j][np.isfinite(vals[:, j])]
        z[name] = (v.mean() - target) / (v.std(ddof=1) / math.sqrt(v.size))
    dt = time.perf_counter() - t0
    ok = abs(z["ipw"]) < 3 and abs(z["debiased"]) < 3 and abs(z["cc"]) > 3 and dt < 60
    return ok, ", ".join(f"{k} z={v:+.2f}" for k, v in z.items()) + f" (target {target:.4f}), {dt:.1f}s"


def criterion_5():
    t0 = time.perf_counter()
    phi_star = np.array([0.7, 0.2])
    prior = ClassPrior(np.array([0.5, 0.5]))

    def median_mse(n, seed):
        out = []
        for rep in range(50):
            rng = np.random.default_rng([seed, rep])
            y = np.repeat([0, 1], n // 2)
            r = (rng.random(n) < phi_star[y]).astype(np.int8)
            ds = Dataset(np.zeros((n, 1)), np.where(r == 1, y, -1), r, 2)
            out.append(normalized_phi_mse(moment_estimator(ds, prior).raw, phi_star))
        return float(np.median(out))

    small, large = median_mse(1000, 51), median_mse(100_000, 52)
    spec = default_mixture(2, 2, 25000, separation=3.0)
    full = synth_gaussian_mixture(spec, np.random.default_rng(53))
    ds, _ = apply_mask(full, ScenarioSpec(ClassBernoulli((0.8, 0.3))), np.random.default_rng(54))
    phi_mle = mle_fit(ds, bayes_params(spec), MleConfig(freeze_theta=True, phi_solver="newton")).mechanism.phi
    err = float(np.max(np.abs(phi_mle - [0.8, 0.3])))
    dt = time.perf_counter() - t0
    ok = small / large >= 10 and err < 0.03 and dt < 300
    return ok, (f"moment MSE ratio {small / large:.1f}x ({small:.2e} -> {large:.2e}); "
                f"frozen-theta MLE {np.round(phi_mle, 4).tolist()} (max err {err:.4f}), {dt:.1f}s")


def _rejection_rate(phi, reps, seed):
    spec = default_mixture(3, 2, 1667, separation=3.0)
    theta = bayes_params(spec)
    masking = MCAR(phi) if np.isscalar(phi) else ClassBernoulli(tuple(phi))
    rejected = 0
    for i in range(reps):
        full = synth_gaussian_mixture(spec, np.random.default_rng([seed, i, 0]))
        ds, _ = apply_mask(full, ScenarioSpec(masking), np.random.default_rng([seed, i, 1]))
        rejected += mcar_test(ds, theta).reject
    return rejected / reps


def criterion_6():
    t0 = time.perf_counter()
    size = _rejection_rate(0.5, 200, 61)
    power = _rejection_rate((0.8, 0.4, 0.1), 200, 62)
    spec = default_mixture(2, 2, 5000, separation=3.0)
    pvals = []
    for i in range(10):
        full = synth_gaussian_mixture(spec, np.random.default_rng([63, i, 0]))
        ds, _ = apply_mask(full, ScenarioSpec(ClassBernoulli((0.9, 0.05))), np.random.default_rng([63, i, 1]))
        pvals.append(mcar_test(ds, bayes_params(spec)).p_value)
    dt = time.perf_counter() - t0
    ok = 0.02 <= size <= 0.10 and power >= 0.95 and max(pvals) < 1e-4 and dt < 600
    return ok, (f"MCAR rejection {size:.3f}, power {power:.3f}, "
                f"2-class max p-value {max(pvals):.1e}, {dt:.1f}s")


def criterion_7a():
    counts = geometric_counts(400, 10.0, 10)
    full = synth_gaussian_mixture(default_mixture(10, 2, 6000), np.random.default_rng(7))
    ds, _ = apply_mask(full, ScenarioSpec(GeometricImbalance(400, 10.0)), np.random.default_rng(8))
    frac = ds.n_labeled / ds.n
    ok = abs(frac - 0.027) <= 0.005 and ds.n_labeled == counts.sum()
    return ok, f"labeled fraction {100 * frac:.2f}% ({ds.n_labeled} of {ds.n})"


def criterion_7b():
    missing = 1 - compose_mechanism(NODULE_PRESET.p_r_given_s, NODULE_PRESET.p_s_given_y)
    full = Dataset.fully_labeled(np.zeros((400_000, 1)), np.repeat([0, 1], 200_000), 2)
    ds, truth = apply_mask(full, ScenarioSpec(NODULE_PRESET), np.random.default_rng(9))
    y = truth.reveal()
    empirical = [1 - ds.indicator[y == k].mean() for k in range(2)]
    target = np.array([0.43, 0.08])
    ok = bool(np.all(np.abs(missing - target) <= 0.01)) and bool(np.all(np.abs(np.array(empirical) - target) <= 0.01))
    return ok, (f"missing proportions {np.round(100 * missing, 2).tolist()}% by formula, "
                f"{np.round(100 * np.array(empirical), 2).tolist()}% simulated; target [43, 8]%")


def criterion_8():
    t0 = time.perf_counter()
    spec = default_mixture(2, 2, 1000, separation=2.0)
    wins = {"moment-buffered": 0, "moment-gradient": 0}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        full = synth_gaussian_mixture(spec, rng)
        ds, truth = apply_mask(full, ScenarioSpec(ClassBernoulli((0.9, 0.1))), rng)
        test = synth_gaussian_mixture(spec, np.random.default_rng(1000 + seed))
        test_pair = (test.features, SealedLabels(test.labels))
        theta0 = init_params("linear", 2, 2)

        def minority_accuracy(objective, source):
            cfg = TrainConfig(epochs=20, batch_size=64, risk=RiskConfig(lam=1.0, mechanism=source),
                              objective=objective, seed=seed)
            return train_debiased(ds, theta0, cfg, test=test_pair)[2].per_class_accuracy[1]

        baseline = minority_accuracy("ssl", "mcar")
        for source in wins:
            wins[source] += minority_accuracy("debiased", source) > baseline
    dt = time.perf_counter() - t0
    ok = all(w >= 8 for w in wins.values()) and dt < 300
    return ok, ", ".join(f"{k} wins {v}/10" for k, v in wins.items()) + f", {dt:.1f}s"


def criterion_9():
    grid = np.round(np.arange(0.1, 100.0001, 0.1), 10)
    err = max(abs(chi2_sf(x, d) - special.gammaincc(d / 2, x / 2)) for d in range(1, 21) for x in grid)
    closed = max(abs(chi2_sf(x, 2) - math.exp(-x / 2)) for x in grid)
    ok = err < 1e-10 and closed < 1e-12
    return ok, f"max error vs incomplete-gamma oracle {err:.1e}, d=2 closed form {closed:.1e}"


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "mnarssl.cli", *map(str, args)], capture_output=True, text=True)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def criterion_10():
    gen = {"mixture": {"n_classes": 2, "dim": 2, "per_class": 300, "separation": 2.0},
           "scenario": {"kind": "class_bernoulli", "phi": [0.8, 0.3]}}
    configs = {
        "gen": gen,
        "est": {"estimator": "mle", "mle": {"epochs": 5}},
        "train": {"epochs": 3, "risk": {"mechanism": "moment-buffered"}},
        "test": {"mle": {"epochs": 3}},
        "study": {"pipeline": "train", "replicates": 2, "generate": gen, "train": {"epochs": 2}},
    }
    same, failed = [], []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for name, cfg in configs.items():
            (tmp / f"{name}.json").write_text(json.dumps(cfg))
        for run in ("a", "b"):
            base = tmp / run
            data = base / "gen" / "dataset.csv"
            calls = {
                "generate": ["generate", "--config", tmp / "gen.json", "--seed", 4, "--out", base / "gen"],
                "estimate": ["estimate", "--config", tmp / "est.json", "--seed", 4, "--data", data,
                             "--out", base / "est", "--truth", base / "gen" / "sealed" / "truth.json"],
                "train": ["train", "--config", tmp / "train.json", "--seed", 4, "--data", data, "--out", base / "train",
                          "--test", base / "gen" / "sealed" / "test.csv"],
                "test-mcar": ["test-mcar", "--config", tmp / "test.json", "--seed", 4, "--data", data,
                              "--out", base / "test"],
                "study": ["study", "--config", tmp / "study.json", "--seed", 4, "--out", base / "study"],
            }
            for cmd, argv in calls.items():
                if _cli(*argv).returncode != 0:
                    failed.append(cmd)
        for cmd, sub in (("generate", "gen"), ("estimate", "est"), ("train", "train"),
                         ("test-mcar", "test"), ("study", "study")):
            a, b = _tree(tmp / "a" / sub), _tree(tmp / "b" / sub)
            if a and a == b:
                same.append(cmd)
    ok = len(same) == 5 and not failed
    return ok, f"byte-identical: {', '.join(same) or 'none'}" + (f"; failed: {failed}" if failed else "")


def test_criterion_1_mcar_closed_form(report):
    assert report("1", *criterion_1())


def test_criterion_2_derivatives(report):
    assert report("2", *criterion_2())


def test_criterion_3_convexity(report):
    assert report("3", *criterion_3())


def test_criterion_4_unbiasedness(report):
    assert report("4", *criterion_4())


def test_criterion_5_consistency(report):
    assert report("5", *criterion_5())


def test_criterion_6_lr_test(report):
    assert report("6", *criterion_6())


def test_criterion_7a_geometric_fraction(report):
    assert report("7a", *criterion_7a())


def test_criterion_7b_composed_preset(report):
    assert report("7b", *criterion_7b())


def test_criterion_8_debiasing_benefit(report):
    assert report("8", *criterion_8())


def test_criterion_9_chi2_accuracy(report):
    assert report("9", *criterion_9())


def test_criterion_10_cli_determinism(report):
    assert report("10", *criterion_10())


if __name__ == "__main__":
    failures = 0
    for key in ("1", "2", "3", "4", "5", "6", "7a", "7b", "8", "9", "10"):
        ok, detail = globals()[f"criterion_{key}"]()
        failures += not ok
        print(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    sys.exit(1 if failures else 0)
