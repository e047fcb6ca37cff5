"""Classification heads for embedding training: softmax, angular (A-Softmax),
additive-margin (AM-Softmax) and logistic-margin cross-entropy.

Every loss returns the batch-mean value together with analytic gradients for the
embeddings and the head parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np


# --------------------------------------------------------------------------- configs


@dataclass(frozen=True)
class Softmax:
    name = "softmax"


@dataclass(frozen=True)
class ASoftmax:
    m: int = 4
    lambda_base: float = 1000.0
    lambda_min: float = 5.0
    gamma: float = 0.015
    name = "asoftmax"

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("A-Softmax margin m must be an integer >= 1")

    def lam(self, iteration: int) -> float:
        return max(self.lambda_min, self.lambda_base / (1.0 + self.gamma * iteration))


@dataclass(frozen=True)
class AMSoftmax:
    s: float = 50.0
    m: float = 0.4
    name = "amsoftmax"

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("AM-Softmax scale s must be positive")
        if self.m < 0:
            raise ValueError("AM-Softmax margin m must be >= 0")


@dataclass(frozen=True)
class LogisticMargin:
    alpha: float = 25.0
    # norm given to the class vectors when the head is created from another head
    init_scale: float = 50.0
    name = "logistic"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("logistic margin alpha must be >= 0")


LossConfig = Union[Softmax, ASoftmax, AMSoftmax, LogisticMargin]
LOSS_TYPES = {cls.name: cls for cls in (Softmax, ASoftmax, AMSoftmax, LogisticMargin)}


def has_bias(cfg: LossConfig) -> bool:
    return isinstance(cfg, (Softmax, LogisticMargin))


# --------------------------------------------------------------------------- head


@dataclass
class ClassificationHead:
    W: np.ndarray
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] < 2:
            raise ValueError("head needs a C x d weight matrix with C >= 2")
        if self.c is not None and self.c.shape != (self.W.shape[0],):
            raise ValueError("bias must have one entry per class")

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict:
        out = {"head.W": self.W}
        if self.c is not None:
            out["head.c"] = self.c
        return out

    @classmethod
    def from_params(cls, params: dict) -> "ClassificationHead":
        return cls(params["head.W"], params.get("head.c"))


def init_head(n_classes: int, dim: int, cfg: LossConfig, rng: np.random.Generator, dtype=np.float64) -> ClassificationHead:
    """Xavier-uniform class vectors, zero biases where the loss uses them."""
    bound = math.sqrt(6.0 / (n_classes + dim))
    W = rng.uniform(-bound, bound, size=(n_classes, dim)).astype(dtype)
    c = np.zeros(n_classes, dtype=dtype) if has_bias(cfg) else None
    return ClassificationHead(W, c)


@dataclass
class LossOutput:
    loss: float
    prob_true: np.ndarray
    grad_embedding: np.ndarray
    grad_W: np.ndarray
    grad_c: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None


# --------------------------------------------------------------------------- helpers


def _check_labels(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels


def _xent(z, labels):
    """Mean cross-entropy over rows of ``z``; returns (loss, p_true, dL/dz)."""
    B = z.shape[0]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp_true = z[np.arange(B), labels] - logsum
    p = np.exp(z - logsum[:, None])
    dz = p.copy()
    dz[np.arange(B), labels] -= 1.0
    loss = -logp_true.mean()
    # extended precision survives for grad_check; everything else gets a float
    return (loss if z.dtype == np.longdouble else float(loss)), np.exp(logp_true), dz / B


def _unit_rows(v, what):
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm {what}")
    return v / norms[:, None], norms


def _unit_rows_backward(du, u, norms):
    """Gradient through v -> v/|v| for each row."""
    return (du - u * np.sum(u * du, axis=1, keepdims=True)) / norms[:, None]


# --------------------------------------------------------------------------- losses


def softmax_ce(x, labels, head: ClassificationHead) -> LossOutput:
    labels = _check_labels(labels, head.n_classes)
    z = x @ head.W.T
    if head.c is not None:
        z = z + head.c
    loss, p_true, dz = _xent(z, labels)
    return LossOutput(
        loss, p_true, dz @ head.W, dz.T @ x,
        dz.sum(axis=0) if head.c is not None else None, z,
    )


def psi(theta, m: int):
    """Monotone angular-margin surrogate (-1)^k cos(m*theta) - 2k on [k*pi/m, (k+1)*pi/m]."""
    theta = np.asarray(theta, dtype=np.float64)
    k = _branch(theta, m)
    return (-1.0) ** k * np.cos(m * theta) - 2.0 * k


def _branch(theta, m):
    # boundary angles belong to the lower branch (left limit)
    k = np.ceil(m * theta / np.pi) - 1
    return np.clip(k, 0, m - 1)


def _chebyshev(c, m):
    """T_m(c) and dT_m/dc via the three-term recurrence."""
    t_prev, t = np.ones_like(c), c.copy()
    d_prev, d = np.zeros_like(c), np.ones_like(c)
    if m == 0:
        return t_prev, d_prev
    for _ in range(m - 1):
        t_prev, t = t, 2 * c * t - t_prev
        d_prev, d = d, 2 * t_prev + 2 * c * d - d_prev
    return t, d


def asoftmax(x, labels, head: ClassificationHead, cfg: ASoftmax, iteration: int = 0) -> LossOutput:
    labels = _check_labels(labels, head.n_classes)
    B = x.shape[0]
    rows = np.arange(B)
    W_hat, w_norms = _unit_rows(head.W, "weight row")
    x_hat, x_norms = _unit_rows(x, "embedding")
    cos = np.clip(x_hat @ W_hat.T, -1.0, 1.0)
    lam = cfg.lam(iteration)

    cos_y = cos[rows, labels]
    k = _branch(np.arccos(cos_y), cfg.m)
    sign = (-1.0) ** k
    cheb, dcheb = _chebyshev(cos_y, cfg.m)
    g_y = (lam * cos_y + sign * cheb - 2.0 * k) / (1.0 + lam)
    dg_y = (lam + sign * dcheb) / (1.0 + lam)

    z = x_norms[:, None] * cos
    z[rows, labels] = x_norms * g_y
    loss, p_true, dz = _xent(z, labels)

    # z_j = |x| cos_j off-target, z_y = |x| g(cos_y) on target
    dcos = dz * x_norms[:, None]
    dcos[rows, labels] = dz[rows, labels] * x_norms * dg_y
    dnorm = np.sum(dz * cos, axis=1)
    dnorm += dz[rows, labels] * (g_y - cos_y)
    dx_hat = dcos @ W_hat
    dx = _unit_rows_backward(dx_hat, x_hat, x_norms) + dnorm[:, None] * x_hat
    dW_hat = dcos.T @ x_hat
    dW = _unit_rows_backward(dW_hat, W_hat, w_norms)
    return LossOutput(loss, p_true, dx, dW, None, z)


def amsoftmax(x, labels, head: ClassificationHead, cfg: AMSoftmax) -> LossOutput:
    labels = _check_labels(labels, head.n_classes)
    rows = np.arange(x.shape[0])
    W_hat, w_norms = _unit_rows(head.W, "weight row")
    x_hat, x_norms = _unit_rows(x, "embedding")
    cos = x_hat @ W_hat.T
    z = cfg.s * cos
    z[rows, labels] -= cfg.s * cfg.m
    loss, p_true, dz = _xent(z, labels)
    dcos = cfg.s * dz
    dx = _unit_rows_backward(dcos @ W_hat, x_hat, x_norms)
    dW = _unit_rows_backward(dcos.T @ x_hat, W_hat, w_norms)
    return LossOutput(loss, p_true, dx, dW, None, z)


def logistic_margin(x, labels, head: ClassificationHead, cfg: LogisticMargin) -> LossOutput:
    labels = _check_labels(labels, head.n_classes)
    rows = np.arange(x.shape[0])
    x_hat, x_norms = _unit_rows(x, "embedding")
    S = x_hat @ head.W.T
    if head.c is not None:
        S = S + head.c
    z = S.copy()
    z[rows, labels] -= cfg.alpha
    loss, p_true, dz = _xent(z, labels)
    dx = _unit_rows_backward(dz @ head.W, x_hat, x_norms)
    return LossOutput(
        loss, p_true, dx, dz.T @ x_hat,
        dz.sum(axis=0) if head.c is not None else None, z,
    )


def compute_loss(cfg: LossConfig, x, labels, head: ClassificationHead, iteration: int = 0) -> LossOutput:
    if isinstance(cfg, Softmax):
        return softmax_ce(x, labels, head)
    if isinstance(cfg, ASoftmax):
        return asoftmax(x, labels, head, cfg, iteration)
    if isinstance(cfg, AMSoftmax):
        return amsoftmax(x, labels, head, cfg)
    if isinstance(cfg, LogisticMargin):
        return logistic_margin(x, labels, head, cfg)
    raise TypeError(f"unknown loss config {cfg!r}")


def class_scores(cfg: LossConfig, x, head: ClassificationHead) -> np.ndarray:
    """Margin-free per-class scores used for identification ranking."""
    x = np.atleast_2d(x)
    if isinstance(cfg, Softmax):
        z = x @ head.W.T
        return z + head.c if head.c is not None else z
    x_hat, _ = _unit_rows(x, "embedding")
    if isinstance(cfg, LogisticMargin):
        z = x_hat @ head.W.T
        return z + head.c if head.c is not None else z
    W_hat, _ = _unit_rows(head.W, "weight row")
    return x_hat @ W_hat.T


def convert_head(head: ClassificationHead, src: LossConfig, dst: LossConfig, rng: np.random.Generator) -> ClassificationHead:
    """Adapt a trained head to a new loss when fine-tuning.

    A-Softmax gets a fresh Xavier head. Logistic margin starting from a
    different loss takes unit class directions scaled to ``init_scale`` with
    zero bias. Otherwise the class vectors carry over; biases are added or
    dropped to suit the target loss.
    """
    dtype = head.W.dtype
    if isinstance(dst, ASoftmax):
        return init_head(head.n_classes, head.W.shape[1], dst, rng, dtype)
    if isinstance(dst, LogisticMargin) and not isinstance(src, LogisticMargin):
        W_hat, _ = _unit_rows(head.W, "weight row")
        return ClassificationHead((dst.init_scale * W_hat).astype(dtype), np.zeros(head.n_classes, dtype=dtype))
    W = head.W.copy()
    if has_bias(dst):
        c = head.c.copy() if head.c is not None else np.zeros(head.n_classes, dtype=dtype)
        return ClassificationHead(W, c)
    return ClassificationHead(W, None)


# --------------------------------------------------------------------------- gradient check


def grad_check(loss_op: Callable, instance: dict, h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference partials.

    ``instance`` holds ``x``, ``labels`` and ``head``; ``loss_op(x, labels, head)``
    must return a :class:`LossOutput`. Analytic gradients come from a float64
    call; the differences are taken in ``np.longdouble`` so their roundoff
    stays well below the comparison floor even for large losses. Relative
    error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    labels = instance["labels"]
    head = instance["head"]
    x = np.array(instance["x"], dtype=np.float64)
    W = np.array(head.W, dtype=np.float64)
    c = None if head.c is None else np.array(head.c, dtype=np.float64)
    out = loss_op(x, labels, ClassificationHead(W, c))

    ext = np.longdouble
    xl, Wl = x.astype(ext), W.astype(ext)
    cl = None if c is None else c.astype(ext)
    pairs = [(xl, out.grad_embedding), (Wl, out.grad_W)]
    if cl is not None:
        pairs.append((cl, out.grad_c))
    worst = 0.0
    for arr, analytic in pairs:
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = loss_op(xl, labels, ClassificationHead(Wl, cl)).loss
            arr[idx] = orig - h
            fm = loss_op(xl, labels, ClassificationHead(Wl, cl)).loss
            arr[idx] = orig
            numeric = float((fp - fm) / (2 * ext(h)))
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst
