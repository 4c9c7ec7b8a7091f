"""Loss terms and their analytic gradients.

Every function returns ``(value, gradient(s))``. The single-instance versions
here double as reference implementations for the batched objective in
:mod:`opal.objective`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatchError


@dataclass
class LossBreakdown:
    main: float
    orth: float
    unif: float
    unique: float
    total: float
    lambda_o: float
    lambda_f: float
    lambda_q: float
    stage: str


def scalar(x):
    """0-d result as a numpy scalar of the input precision (float64 is a ``float``)."""
    return np.asarray(x)[()]


def loss_orth(G: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over ordered pairs i != j of (g_i . g_j)^2; each unordered pair counts twice."""
    M = G @ G.T
    np.fill_diagonal(M, 0.0)
    return scalar((M * M).sum()), 4.0 * M @ G


def category_mass(a: np.ndarray) -> np.ndarray:
    """w_j: assignment probability mass per category, summed over every row."""
    return a.reshape(-1, a.shape[-1]).sum(axis=0)


def loss_unif_from_mass(w: np.ndarray) -> tuple[float, np.ndarray]:
    """Coefficient of variation sigma_w / mu_w (population std) and d/dw."""
    w = np.asarray(w)
    if w.dtype.kind != "f":
        w = w.astype(np.float64)
    k = w.shape[0]
    mu = w.mean()
    if mu <= 0:
        raise DegenerateBatchError("total assignment mass is zero")
    dev = w - mu
    sigma = np.sqrt((dev * dev).mean())
    if sigma == 0:
        # sigma is not differentiable here; take the zero subgradient
        return 0.0, np.zeros_like(w)
    grad = dev / (k * sigma * mu) - sigma / (k * mu * mu)
    return scalar(sigma / mu), grad


def loss_unif(a: np.ndarray) -> tuple[float, np.ndarray]:
    """Uniformity loss over stacked assignment rows (..., k); gradient has a's shape."""
    value, dw = loss_unif_from_mass(category_mass(a))
    return value, np.broadcast_to(dw, a.shape).copy()


def loss_unique(a: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of -ln(max_j a_lj / sum_j a_lj) for one sequence (n x k)."""
    n = a.shape[0]
    j = np.argmax(a, axis=1)
    rows = np.arange(n)
    m = a[rows, j]
    S = a.sum(axis=1)
    value = scalar(np.mean(-np.log(m / S)))
    grad = np.repeat((1.0 / S)[:, None], a.shape[1], axis=1)
    grad[rows, j] -= 1.0 / m
    return value, grad / n


def logsumexp(x: np.ndarray, axis=-1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def loss_main(
    u: np.ndarray, pos: np.ndarray, negs: np.ndarray, epsilon: float
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Sampled-softmax cross-entropy with max-over-interests scores.

    ``u`` is k x d, ``pos`` a d-vector, ``negs`` m x d (already masked). Returns
    the loss and gradients w.r.t. u, pos and negs. The max routes gradient to
    the lowest-index maximiser.
    """
    negs = np.asarray(negs).reshape(-1, u.shape[1])
    cand = np.vstack([pos[None, :], negs])
    if cand.shape[0] < 2:
        raise ValueError("candidate set needs the positive and at least one negative")
    raw = cand @ u.T / epsilon  # (m+1) x k
    win = np.argmax(raw, axis=1)
    scores = raw[np.arange(len(cand)), win]
    lse = logsumexp(scores)
    value = scalar(lse - scores[0])
    coef = np.exp(scores - lse)
    coef[0] -= 1.0
    du = np.zeros_like(u)
    np.add.at(du, win, coef[:, None] * cand / epsilon)
    dcand = coef[:, None] * u[win] / epsilon
    return value, du, dcand[0], dcand[1:]


def total_loss(
    main: float,
    orth: float,
    unif: float,
    unique: float,
    stage: str,
    lambda_o: float = 10.0,
    lambda_f: float = 1.0,
    lambda_q: float = 1.0,
) -> LossBreakdown:
    """Weighted sum; the unique term only counts in the fine-tune stage."""
    if stage not in ("pretrain", "finetune"):
        raise ValueError(f"unknown stage {stage!r}")
    lq = lambda_q if stage == "finetune" else 0.0
    total = main + lambda_o * orth + lambda_f * unif + lq * unique
    return LossBreakdown(main, orth, unif, unique, total, lambda_o, lambda_f, lambda_q, stage)
