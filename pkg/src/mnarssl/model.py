"""Softmax classifiers p(y|x; theta) with hand-written backprop.

Two architectures are supported:

* ``linear``: logits = x W + b
* ``mlp``: logits = tanh(x W1 + b1) W2 + b2

Every loss routine works on a batch ``X`` of shape (m, d) and returns the
summed loss together with a gradient shaped like the parameters. A single
feature vector is accepted and treated as a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from numpy.typing import NDArray

from .core import EPS_PROB, ValidationError

ARCHS = ("linear", "mlp")


@dataclass(frozen=True)
class ModelParams:
    """Weights of a softmax classifier.

    ``arrays`` is ``(W, b)`` for ``linear`` and ``(W1, b1, W2, b2)`` for
    ``mlp``. Gradients are returned as ``ModelParams`` too.
    """

    arch: str
    arrays: Tuple[NDArray[np.float64], ...]

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ValidationError(f"unknown architecture {self.arch!r}")
        want = 2 if self.arch == "linear" else 4
        if len(self.arrays) != want:
            raise ValidationError(f"{self.arch} expects {want} arrays, got {len(self.arrays)}")
        arrs = []
        for a in self.arrays:
            a = np.array(a, dtype=np.float64, copy=True)
            a.setflags(write=False)
            arrs.append(a)
        object.__setattr__(self, "arrays", tuple(arrs))

    @property
    def input_dim(self) -> int:
        return self.arrays[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.arrays[-1].shape[0]

    @property
    def hidden(self) -> Optional[int]:
        return self.arrays[0].shape[1] if self.arch == "mlp" else None

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays)

    def flat(self) -> NDArray[np.float64]:
        return np.concatenate([a.ravel() for a in self.arrays])

    def with_flat(self, vec: NDArray) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        out, pos = [], 0
        for a in self.arrays:
            out.append(vec[pos:pos + a.size].reshape(a.shape))
            pos += a.size
        if pos != vec.size:
            raise ValidationError("flat vector has the wrong length")
        return ModelParams(self.arch, tuple(out))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.arch, tuple(np.zeros_like(a) for a in self.arrays))

    def axpy(self, alpha: float, other: "ModelParams") -> "ModelParams":
        """Return ``self + alpha * other``."""
        return ModelParams(self.arch, tuple(a + alpha * b for a, b in zip(self.arrays, other.arrays)))

    def scale(self, alpha: float) -> "ModelParams":
        return ModelParams(self.arch, tuple(alpha * a for a in self.arrays))

    def __add__(self, other: "ModelParams") -> "ModelParams":
        return self.axpy(1.0, other)


def init_params(
    arch: str,
    input_dim: int,
    n_classes: int,
    rng: Optional[np.random.Generator] = None,
    hidden: int = 16,
    scale: float = 0.1,
) -> ModelParams:
    """Small random weights, zero biases. ``rng=None`` gives all zeros."""
    def w(*shape):
        return np.zeros(shape) if rng is None else scale * rng.standard_normal(shape)

    if arch == "linear":
        return ModelParams("linear", (w(input_dim, n_classes), np.zeros(n_classes)))
    if arch == "mlp":
        return ModelParams(
            "mlp",
            (w(input_dim, hidden), np.zeros(hidden), w(hidden, n_classes), np.zeros(n_classes)),
        )
    raise ValidationError(f"unknown architecture {arch!r}")


def _as_batch(theta: ModelParams, x: NDArray) -> NDArray[np.float64]:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != theta.input_dim:
        raise ValidationError(f"feature dim {X.shape[1]} != model input dim {theta.input_dim}")
    return X


def logits(theta: ModelParams, x: NDArray) -> NDArray[np.float64]:
    X = _as_batch(theta, x)
    if theta.arch == "linear":
        W, b = theta.arrays
        return X @ W + b
    W1, b1, W2, b2 = theta.arrays
    return np.tanh(X @ W1 + b1) @ W2 + b2


def softmax(z: NDArray) -> NDArray[np.float64]:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(theta: ModelParams, x: NDArray) -> NDArray[np.float64]:
    """Class probabilities, shape (m, K) for a batch or (K,) for one sample."""
    X = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ValidationError("non-finite input to predict_proba")
    p = softmax(logits(theta, X))
    return p[0] if X.ndim == 1 else p


def argmax_label(probs: NDArray) -> NDArray[np.int64]:
    # np.argmax already returns the first (smallest) index on ties
    return np.argmax(probs, axis=-1)


def backward(theta: ModelParams, x: NDArray, dlogits: NDArray) -> ModelParams:
    """Pull a gradient w.r.t. the logits back to the parameters."""
    X = _as_batch(theta, x)
    G = np.asarray(dlogits, dtype=np.float64).reshape(X.shape[0], -1)
    if theta.arch == "linear":
        return ModelParams("linear", (X.T @ G, G.sum(axis=0)))
    W1, b1, W2, _ = theta.arrays
    H = np.tanh(X @ W1 + b1)
    dH = (G @ W2.T) * (1.0 - H * H)
    return ModelParams("mlp", (X.T @ dH, dH.sum(axis=0), H.T @ G, G.sum(axis=0)))


def _weights(weight, m: int) -> NDArray[np.float64]:
    w = np.asarray(weight, dtype=np.float64)
    return np.broadcast_to(w, (m,)) if w.ndim == 0 else w.reshape(m)


def supervised_loss_grad(
    theta: ModelParams, x: NDArray, y, weight: Union[float, NDArray] = 1.0
) -> Tuple[float, ModelParams]:
    """Weighted negative log-likelihood ``-sum_i w_i log p(y_i | x_i)``."""
    X = _as_batch(theta, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    w = _weights(weight, X.shape[0])
    P = softmax(logits(theta, X))
    rows = np.arange(X.shape[0])
    loss = -float(np.sum(w * np.log(np.maximum(P[rows, y], EPS_PROB))))
    G = P.copy()
    G[rows, y] -= 1.0
    G *= w[:, None]
    return loss, backward(theta, X, G)


def entropy_terms(P: NDArray) -> Tuple[NDArray, NDArray]:
    """Per-sample Shannon entropy and its gradient w.r.t. the logits."""
    logP = np.log(np.maximum(P, EPS_PROB))
    H = -np.sum(P * logP, axis=1)
    dz = -P * (logP + H[:, None])
    return H, dz


def pseudo_label_terms(P: NDArray, tau) -> Tuple[NDArray, NDArray]:
    """Per-sample pseudo-label loss and logit gradient.

    ``tau`` is a scalar or a per-class vector indexed by the predicted
    class. Samples whose confidence is below their threshold contribute
    nothing; the argmax target is treated as a constant.
    """
    m, K = P.shape
    yhat = argmax_label(P)
    rows = np.arange(m)
    conf = P[rows, yhat]
    thr = np.asarray(tau, dtype=np.float64)
    thr = thr[yhat] if thr.ndim else np.full(m, float(thr))
    keep = conf >= thr
    loss = np.where(keep, -np.log(np.maximum(conf, EPS_PROB)), 0.0)
    dz = P.copy()
    dz[rows, yhat] -= 1.0
    dz[~keep] = 0.0
    return loss, dz


def unlabeled_terms(P: NDArray, kind: str, tau=0.95) -> Tuple[NDArray, NDArray]:
    if kind == "entropy":
        return entropy_terms(P)
    if kind in ("pseudo-label", "pseudo_label", "pseudolabel"):
        return pseudo_label_terms(P, tau)
    raise ValidationError(f"unknown unlabeled loss {kind!r}")


def unsupervised_loss_grad(
    theta: ModelParams,
    x: NDArray,
    kind: str = "entropy",
    weight: Union[float, NDArray] = 1.0,
    tau=0.95,
) -> Tuple[float, ModelParams]:
    """Label-free loss: Shannon entropy or thresholded pseudo-label NLL.

    Weights may be negative (the debiased risk needs that).
    """
    X = _as_batch(theta, x)
    w = _weights(weight, X.shape[0])
    P = softmax(logits(theta, X))
    terms, dz = unlabeled_terms(P, kind, tau)
    return float(np.sum(w * terms)), backward(theta, X, dz * w[:, None])
