"""Command-line front end.

Subcommands::

    mnarssl generate  --config gen.json   --seed S --out DIR
    mnarssl estimate  --config est.json   --data DIR/dataset.csv --out DIR2 [--truth ...]
    mnarssl train     --config train.json --data DIR/dataset.csv --out DIR2 [--phi ...] [--test ...] [--truth ...]
    mnarssl test-mcar --config test.json  --data DIR/dataset.csv --out DIR2 [--theta ...]
    mnarssl study     --config study.json --seed S --out DIR

``generate`` writes ``dataset.csv`` next to a ``sealed/`` directory holding
the hidden labels, a labeled test split and the Bayes-optimal model.
Nothing under ``sealed/`` is read unless its path is passed explicitly.

Exit status: 0 on success, 1 on invalid input, 2 on numerical divergence.
Set ``MNARSSL_LOG_LEVEL`` (e.g. ``DEBUG``) for progress logs on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io
from .core import Dataset, DivergenceError, Mechanism, SealedLabels, ValidationError
from .mcartest import LrTestConfig, TestReport, mcar_test
from .mechanism import ClassPrior, MleConfig, constraint_residual, mcar_phi, mle_fit, moment_estimator
from .model import ModelParams, init_params
from .scenario import (
    GaussianMixtureSpec,
    ScenarioSpec,
    apply_mask,
    bayes_params,
    default_mixture,
    synth_gaussian_mixture,
)
from .train import TrainConfig, normalized_phi_mse, train_debiased

log = logging.getLogger("mnarssl")

ESTIMATORS = ("moment-known-prior", "moment-model", "mle")
PIPELINES = ("estimate", "train", "test-mcar")


# -- pipelines shared by single commands and studies ---------------------------

@dataclass
class Generated:
    dataset: Dataset
    truth: SealedLabels
    test: Dataset
    mixture: GaussianMixtureSpec


def _mixture(cfg: Dict[str, Any]) -> GaussianMixtureSpec:
    if "means" in cfg:
        return GaussianMixtureSpec.from_dict(cfg)
    return default_mixture(**cfg)


def generate(cfg: Dict[str, Any], seed: int) -> Generated:
    """Sample a mixture, mask it, and sample an independent test split."""
    mixture = _mixture(cfg.get("mixture", {}))
    spec = ScenarioSpec.from_dict({**cfg.get("scenario", {"kind": "mcar", "rate": 0.5}), "seed": seed})
    s_data, s_mask, s_test = np.random.SeedSequence(seed).spawn(3)
    full = synth_gaussian_mixture(mixture, np.random.default_rng(s_data))
    dataset, truth = apply_mask(full, spec, np.random.default_rng(s_mask))
    test = synth_gaussian_mixture(mixture, np.random.default_rng(s_test))
    return Generated(dataset, truth, test, mixture)


def _init_theta(cfg: Dict[str, Any], dataset: Dataset, seed: int) -> ModelParams:
    m = cfg.get("model", {})
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    return init_params(m.get("arch", "linear"), dataset.dim, dataset.n_classes, rng,
                       hidden=m.get("hidden", 16), scale=m.get("init_scale", 0.1))


def _fit_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])


def _train_config(cfg: Dict[str, Any], seed: int) -> TrainConfig:
    body = {k: v for k, v in cfg.items() if k != "model"}
    return TrainConfig.from_dict({**body, "seed": seed})


def estimate(cfg: Dict[str, Any], dataset: Dataset, seed: int) -> Dict[str, Any]:
    """Run one mechanism estimator; returns a result mapping.

    ``phi`` is the clamped estimate, ``phi_raw`` the unclamped one. The
    ``theta`` and ``trace`` entries are present when the estimator fits a
    model.
    """
    kind = cfg.get("estimator", "mle")
    K, n = dataset.n_classes, dataset.n
    out: Dict[str, Any] = {"estimator": kind, "n": n, "n_labeled": dataset.n_labeled,
                           "labeled_counts": dataset.labeled_counts().tolist()}
    if kind == "moment-known-prior":
        prior = cfg.get("prior")
        cp = ClassPrior.uniform(K) if prior is None else ClassPrior(np.asarray(prior, dtype=np.float64))
        mech = moment_estimator(dataset, cp, cfg.get("eps_phi", 1e-3))
    elif kind == "moment-model":
        tcfg = _train_config(cfg.get("train", {}), seed)
        if tcfg.risk.mechanism in ("fixed", "mcar"):
            tcfg = replace(tcfg, risk=replace(tcfg.risk, mechanism="moment-buffered"))
        theta, mech, _ = train_debiased(dataset, _init_theta(cfg, dataset, seed), tcfg, rng=_fit_rng(seed))
        out["theta"] = theta
    elif kind == "mle":
        res = mle_fit(dataset, _init_theta(cfg, dataset, seed),
                      MleConfig.from_dict(cfg.get("mle", {})), _fit_rng(seed))
        mech = res.mechanism
        out.update(theta=res.theta, trace=res.trace, nll=res.nll)
    else:
        raise ValidationError(f"unknown estimator {kind!r}; choose from {', '.join(ESTIMATORS)}")
    raw = mech.raw if mech.raw is not None else mech.phi
    out["phi"] = mech.phi.tolist()
    out["phi_raw"] = raw.tolist()
    out["constraint_residual"] = constraint_residual(raw, dataset.labeled_counts(), n)
    return out


def train(
    cfg: Dict[str, Any],
    dataset: Dataset,
    seed: int,
    phi_input: Optional[Mechanism] = None,
    test: Optional[Dataset] = None,
    phi_star: Optional[np.ndarray] = None,
):
    tcfg = _train_config(cfg, seed)
    test_pair = None if test is None else (test.features, SealedLabels(test.labels))
    return train_debiased(dataset, _init_theta(cfg, dataset, seed), tcfg, phi_input,
                          _fit_rng(seed), test_pair, phi_star)


def test_mcar(
    cfg: Dict[str, Any], dataset: Dataset, seed: int, theta: Optional[ModelParams] = None
) -> TestReport:
    """LR test. Frozen-theta mode without a supplied theta first fits theta under MCAR."""
    lcfg = LrTestConfig.from_dict({k: v for k, v in cfg.items() if k in ("mle", "alpha")})
    if theta is None:
        theta = _init_theta(cfg, dataset, seed)
        if lcfg.mle.freeze_theta:
            warm = replace(lcfg.mle, freeze_theta=False, freeze_phi=True, phi_solver="sgd",
                           phi_init=tuple(mcar_phi(dataset)))
            theta = mle_fit(dataset, theta, warm, _fit_rng(seed)).theta
    return mcar_test(dataset, theta, lcfg, _fit_rng(seed))


# -- study ----------------------------------------------------------------------

def _replicate(args: Tuple[Dict[str, Any], int]) -> Dict[str, Any]:
    cfg, seed = args
    g = generate(cfg.get("generate", {}), seed)
    pipeline = cfg.get("pipeline", "estimate")
    phi_star = g.truth.phi_star
    row: Dict[str, Any] = {"seed": seed, "n": g.dataset.n, "n_labeled": g.dataset.n_labeled}
    if pipeline == "estimate":
        res = estimate(cfg.get("estimate", {}), g.dataset, seed)
        row.update({f"phi_{k + 1}": v for k, v in enumerate(res["phi"])})
        row["phi_mse"] = normalized_phi_mse(res["phi_raw"], phi_star)
    elif pipeline == "train":
        tcfg = cfg.get("train", {})
        # no phi file exists inside a study, so a fixed source means the generating phi
        source = tcfg.get("risk", {}).get("mechanism", "fixed")
        oracle = Mechanism.clamped(phi_star) if source == "fixed" and phi_star is not None else None
        _, mech, rep = train(tcfg, g.dataset, seed, oracle, g.test, phi_star)
        row["accuracy"] = rep.accuracy
        row["test_loss"] = rep.test_loss
        row.update({f"accuracy_{k + 1}": v for k, v in enumerate(rep.per_class_accuracy)})
        row.update({f"phi_{k + 1}": v for k, v in enumerate(mech.phi)})
        row["phi_mse"] = rep.phi_mse
    elif pipeline == "test-mcar":
        tcfg = cfg.get("test_mcar", {})
        theta = None
        if tcfg.get("theta", "fit") == "bayes":
            theta = bayes_params(g.mixture)
        rep = test_mcar({k: v for k, v in tcfg.items() if k != "theta"}, g.dataset, seed, theta)
        row.update(statistic=rep.statistic, p_value=rep.p_value, reject=float(rep.reject))
    else:
        raise ValidationError(f"unknown pipeline {pipeline!r}; choose from {', '.join(PIPELINES)}")
    return row


def study(cfg: Dict[str, Any], seed: int) -> Tuple[List[Dict[str, Any]], Dict[str, Dict[str, float]]]:
    """R replicates with seeds ``seed, seed + 1, ...``; mean and sd per metric.

    Replicate 0 therefore reproduces a single run made with ``--seed seed``.
    The fold over replicates runs in seed order whatever the worker count.
    """
    R = int(cfg.get("replicates", 10))
    workers = int(cfg.get("workers", 1))
    if R < 1 or workers < 1:
        raise ValidationError("replicates and workers must be >= 1")
    jobs = [(cfg, seed + i) for i in range(R)]
    if workers == 1:
        rows = [_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_replicate, jobs))
    summary: Dict[str, Dict[str, float]] = {}
    for key in rows[0]:
        if key == "seed":
            continue
        vals = np.array([r[key] for r in rows if r.get(key) is not None], dtype=np.float64)
        if vals.size == 0:
            continue
        sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        summary[key] = {"mean": float(vals.mean()), "sd": sd, "count": int(vals.size)}
    return rows, summary


# -- commands ---------------------------------------------------------------------

def _config(args) -> Dict[str, Any]:
    return io.read_json(args.config) if args.config else {}


def _seed(args, cfg: Dict[str, Any]) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ValidationError("seed must be a non-negative integer")
    return seed


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _phi_star(truth_path: Optional[str]) -> Optional[np.ndarray]:
    if truth_path is None:
        return None
    truth = io.read_truth(truth_path)
    if truth.phi_star is None:
        raise ValidationError(f"{truth_path} carries no mechanism")
    return truth.phi_star


def cmd_generate(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    g = generate(cfg, seed)
    out = _outdir(args.out)
    sealed = _outdir(out / "sealed")
    io.write_dataset(out / "dataset.csv", g.dataset)
    io.write_truth(sealed / "truth.json", g.truth)
    io.write_dataset(sealed / "test.csv", g.test)
    io.write_theta(sealed / "bayes_theta.json", bayes_params(g.mixture))
    io.write_json(out / "generate.json", {
        "seed": seed,
        "mixture": g.mixture.to_dict(),
        "scenario": {**cfg.get("scenario", {}), "seed": seed},
        "n": g.dataset.n,
        "n_labeled": g.dataset.n_labeled,
        "labeled_counts": g.dataset.labeled_counts().tolist(),
    })
    print(f"wrote {g.dataset.n} samples ({g.dataset.n_labeled} labeled) to {out}")


def cmd_estimate(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    dataset = io.read_dataset(args.data)
    phi_star = _phi_star(args.truth)
    res = estimate(cfg, dataset, seed)
    out = _outdir(args.out)
    theta, trace = res.pop("theta", None), res.pop("trace", None)
    io.write_json(out / "phi.json", {**res, "seed": seed})
    if theta is not None:
        io.write_theta(out / "theta.json", theta)
    if trace is not None:
        io.write_trace(out / "trace.tsv", trace)
    if phi_star is not None:
        io.write_json(out / "evaluation.json", {
            "phi_star": phi_star,
            "phi_mse": normalized_phi_mse(res["phi_raw"], phi_star),
        })
    print("phi = " + ", ".join(f"{v:.6f}" for v in res["phi"]))


def cmd_train(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    dataset = io.read_dataset(args.data)
    phi_input = None
    if args.phi:
        phi_input = Mechanism(np.asarray(io.read_json(args.phi)["phi"], dtype=np.float64))
    test = io.read_dataset(args.test) if args.test else None
    theta, mech, report = train(cfg, dataset, seed, phi_input, test, _phi_star(args.truth))
    out = _outdir(args.out)
    io.write_theta(out / "theta.json", theta)
    io.write_table(out / "curves.csv", report.curves)
    body = report.to_dict()
    body.pop("curves")
    io.write_json(out / "report.json", {**body, "seed": seed})
    acc = "n/a" if report.accuracy is None else f"{report.accuracy:.4f}"
    print(f"trained {len(report.curves)} epochs, test accuracy {acc}")


def cmd_test_mcar(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    dataset = io.read_dataset(args.data)
    theta = io.read_theta(args.theta) if args.theta else None
    report = test_mcar(cfg, dataset, seed, theta)
    out = _outdir(args.out)
    io.write_json(out / "test.json", {**report.to_dict(), "seed": seed})
    (out / "summary.txt").write_text(report.summary() + "\n")
    print(report.summary())


def cmd_study(args) -> None:
    cfg = _config(args)
    seed = _seed(args, cfg)
    rows, summary = study(cfg, seed)
    out = _outdir(args.out)
    io.write_table(out / "replicates.csv", rows)
    io.write_json(out / "summary.json", {"seed": seed, "replicates": len(rows), "metrics": summary})
    io.write_table(out / "summary.csv", [{"metric": k, **v} for k, v in summary.items()])
    for k, v in summary.items():
        print(f"{k}: {v['mean']:.6g} +- {v['sd']:.2g}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mnarssl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="base seed (overrides the config)")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset file")

    p = sub.add_parser("generate", help="sample and mask a synthetic dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("estimate", help="estimate the labeling mechanism")
    common(p)
    p.add_argument("--truth", help="sealed truth file; enables the phi MSE report")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("train", help="debiased semi-supervised training")
    common(p)
    p.add_argument("--phi", help="phi.json from 'estimate', used as a fixed mechanism")
    p.add_argument("--test", help="labeled test dataset for evaluation")
    p.add_argument("--truth", help="sealed truth file; enables the phi MSE report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("test-mcar", help="likelihood-ratio test of MCAR labels")
    common(p)
    p.add_argument("--theta", help="model checkpoint to hold fixed")
    p.set_defaults(func=cmd_test_mcar)

    p = sub.add_parser("study", help="replicate a pipeline over seeds")
    common(p, data=False)
    p.set_defaults(func=cmd_study)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("MNARSSL_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
