"""Soft/hard interest extraction from a user's interaction sequence.

Per-sequence functions (``assign_soft`` ... ``fuse``, ``encode_user``) are the
reference path used for serving and testing. ``batch_forward`` /
``batch_backward`` compute the same quantities for a padded batch of histories
and propagate gradients back to the item table, hyper-categories and GRU.

Category labels are 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import EmbeddingStore, GruParams

STAGES = ("pretrain", "finetune")


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class AssignmentMatrix:
    a: np.ndarray  # n x k, rows sum to 1
    r: np.ndarray  # n x k cosine coordinates, clamped to [-1, 1]
    epsilon: float


@dataclass
class InterestSet:
    soft: np.ndarray  # k x d
    intensity: np.ndarray  # k
    hard: np.ndarray  # k x d, zero rows where invalid
    valid: np.ndarray  # k bool
    fused: np.ndarray  # k x d
    hard_labels: np.ndarray  # |s|
    subsequences: list[np.ndarray]
    assignment: AssignmentMatrix


def coordinates(G: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.clip(X @ G.T, -1.0, 1.0)


def assign_soft(store: EmbeddingStore, items: np.ndarray, epsilon: float) -> AssignmentMatrix:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    items = np.asarray(items)
    if items.size == 0:
        raise ValueError("empty sequence")
    r = coordinates(store.G, store.V[items])
    return AssignmentMatrix(softmax(r / epsilon), r, epsilon)


def soft_interests(assign: AssignmentMatrix, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """p_j = sum_l a_lj x_l and the per-category intensity sum_l a_lj."""
    if assign.a.shape[0] != X.shape[0]:
        raise ValueError("assignment rows and item embeddings disagree")
    return assign.a.T @ X, assign.a.sum(axis=0)


def assign_hard(assign: AssignmentMatrix) -> np.ndarray:
    # np.argmax returns the first maximiser, i.e. the lowest category index on ties
    return np.argmax(assign.a, axis=1)


def split_sequence(items: np.ndarray, labels: np.ndarray, k: int) -> list[np.ndarray]:
    items = np.asarray(items)
    labels = np.asarray(labels)
    if labels.shape != items.shape or (labels.size and (labels.min() < 0 or labels.max() >= k)):
        raise ValueError("labels must be in [0, k) and match the sequence")
    return [items[labels == j] for j in range(k)]


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


@dataclass
class _GruCache:
    X: np.ndarray
    mask: np.ndarray
    steps: list


def gru_forward(gru: GruParams, X: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, _GruCache]:
    """Run N padded sequences (N x T x d) through the GRU from h0 = 0.

    Positions with ``mask`` False leave the hidden state untouched, so the
    result is the final hidden state of each sequence's valid prefix.
    """
    N, T, d = X.shape
    h = np.zeros((N, gru.d), dtype=X.dtype)
    xz = X @ gru.W_z.T + gru.b_z
    xr = X @ gru.W_r.T + gru.b_r
    xh = X @ gru.W_h.T + gru.b_h
    steps = []
    for t in range(T):
        z = sigmoid(xz[:, t] + h @ gru.U_z.T)
        r = sigmoid(xr[:, t] + h @ gru.U_r.T)
        n = np.tanh(xh[:, t] + (r * h) @ gru.U_h.T)
        m = mask[:, t, None]
        steps.append((h, z, r, n, m))
        h = np.where(m, (1.0 - z) * n + z * h, h)
    return h, _GruCache(X, mask, steps)


def gru_backward(gru: GruParams, cache: _GruCache, dh: np.ndarray) -> tuple[np.ndarray, dict]:
    """Gradients of a loss w.r.t. the inputs and GRU parameters, given dL/dh_final."""
    X = cache.X
    dX = np.zeros_like(X)
    g = {name: np.zeros_like(arr) for name, arr in gru.arrays().items()}
    for t in range(len(cache.steps) - 1, -1, -1):
        h, z, r, n, m = cache.steps[t]
        x = X[:, t]
        dnew = np.where(m, dh, 0.0)
        dprev = np.where(m, 0.0, dh) + dnew * z
        da_h = dnew * (1.0 - z) * (1.0 - n * n)
        da_z = dnew * (h - n) * z * (1.0 - z)
        drh = da_h @ gru.U_h
        da_r = drh * h * r * (1.0 - r)
        dprev += drh * r + da_z @ gru.U_z + da_r @ gru.U_r

        dX[:, t] = da_z @ gru.W_z + da_r @ gru.W_r + da_h @ gru.W_h
        g["W_z"] += da_z.T @ x
        g["W_r"] += da_r.T @ x
        g["W_h"] += da_h.T @ x
        g["U_z"] += da_z.T @ h
        g["U_r"] += da_r.T @ h
        g["U_h"] += da_h.T @ (r * h)
        g["b_z"] += da_z.sum(axis=0)
        g["b_r"] += da_r.sum(axis=0)
        g["b_h"] += da_h.sum(axis=0)
        dh = dprev
    return dX, g


def hard_interests(
    store: EmbeddingStore, gru: GruParams, subsequences: list[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Final GRU state per non-empty subsequence; empty ones are marked invalid."""
    k, d = len(subsequences), store.d
    lengths = np.array([len(s) for s in subsequences])
    valid = lengths > 0
    q = np.zeros((k, d), dtype=store.V.dtype)
    if not valid.any():
        return q, valid
    T = lengths.max()
    X = np.zeros((k, T, d), dtype=store.V.dtype)
    mask = np.zeros((k, T), dtype=bool)
    for j, sub in enumerate(subsequences):
        X[j, :len(sub)] = store.V[sub]
        mask[j, :len(sub)] = True
    h, _ = gru_forward(gru, X, mask)
    q[valid] = h[valid]
    return q, valid


def fuse(p: np.ndarray, q: np.ndarray, valid: np.ndarray, stage: str) -> np.ndarray:
    if stage == "pretrain":
        return p.copy()
    if stage != "finetune":
        raise ValueError(f"unknown stage {stage!r}")
    return np.where(valid[..., None], 0.5 * (p + q), p)


def encode_user(
    store: EmbeddingStore, gru: GruParams, items: np.ndarray, epsilon: float, stage: str
) -> InterestSet:
    items = np.asarray(items)
    assign = assign_soft(store, items, epsilon)
    p, intensity = soft_interests(assign, store.V[items])
    labels = assign_hard(assign)
    subs = split_sequence(items, labels, store.k)
    if stage == "finetune":
        q, valid = hard_interests(store, gru, subs)
    else:
        q, valid = np.zeros_like(p), np.zeros(store.k, dtype=bool)
    return InterestSet(p, intensity, q, valid, fuse(p, q, valid, stage), labels, subs, assign)


# ---------------------------------------------------------------------------
# batched path (training / bulk evaluation)
# ---------------------------------------------------------------------------


def pad_histories(histories: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(h) for h in histories)
    idx = np.zeros((len(histories), T), dtype=np.int64)
    mask = np.zeros((len(histories), T), dtype=bool)
    for b, h in enumerate(histories):
        idx[b, :len(h)] = h
        mask[b, :len(h)] = True
    return idx, mask


@dataclass
class BatchCache:
    idx: np.ndarray
    mask: np.ndarray
    X: np.ndarray
    raw_r: np.ndarray
    s: np.ndarray  # unmasked softmax
    a: np.ndarray  # masked assignments, B x T x k
    p: np.ndarray
    epsilon: float
    stage: str
    valid: np.ndarray | None = None
    q: np.ndarray | None = None
    sub_pos: np.ndarray | None = None
    gru_cache: _GruCache | None = None


def soft_interest_batch(X: np.ndarray, G: np.ndarray, mask: np.ndarray, epsilon: float):
    """Soft assignment and soft interests of padded, already-gathered histories.

    X: B x T x d (zero rows at padding). Returns (raw coordinates, unmasked
    softmax, masked assignments, soft interests B x k x d). Cost O(B T k d).
    """
    raw_r = X @ G.T
    s = softmax(np.clip(raw_r, -1.0, 1.0) / epsilon)
    a = s * mask[..., None]
    p = np.einsum("btk,btd->bkd", a, X)
    return raw_r, s, a, p


def batch_forward(
    store: EmbeddingStore,
    gru: GruParams,
    idx: np.ndarray,
    mask: np.ndarray,
    epsilon: float,
    stage: str,
) -> tuple[np.ndarray, BatchCache]:
    """Fused interests U (B x k x d) for padded histories, plus a backward cache."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    X = store.V[idx] * mask[..., None].astype(store.V.dtype)
    raw_r, s, a, p = soft_interest_batch(X, store.G, mask, epsilon)
    cache = BatchCache(idx, mask, X, raw_r, s, a, p, epsilon, stage)
    if stage == "pretrain":
        return p, cache

    B, T, k = a.shape
    labels = np.argmax(a, axis=2)
    onehot = (labels[..., None] == np.arange(k)) & mask[..., None]
    counts = onehot.sum(axis=1)
    rank = np.cumsum(onehot, axis=1) - 1
    Ts = max(int(counts.max()), 1)
    sub_pos = np.full((B, k, Ts), -1, dtype=np.int64)
    bi, ti, ji = np.nonzero(onehot)
    sub_pos[bi, ji, rank[bi, ti, ji]] = ti
    sub_mask = sub_pos >= 0
    Xs = X[np.arange(B)[:, None, None], np.maximum(sub_pos, 0)] * sub_mask[..., None]
    h, gcache = gru_forward(gru, Xs.reshape(B * k, Ts, -1), sub_mask.reshape(B * k, Ts))
    valid = counts > 0
    q = h.reshape(B, k, -1) * valid[..., None]
    cache.valid, cache.q, cache.sub_pos, cache.gru_cache = valid, q, sub_pos, gcache
    return np.where(valid[..., None], 0.5 * (p + q), p), cache


def batch_backward(
    store: EmbeddingStore,
    gru: GruParams,
    cache: BatchCache,
    dU: np.ndarray,
    da_extra: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Backpropagate dL/dU (and extra dL/da from regularisers) to the parameters.

    Returns dense gradients for V and G, plus GRU parameters in the fine-tune
    stage. Hard labels are piecewise constant and carry no gradient.
    """
    X, a, s, mask = cache.X, cache.a, cache.s, cache.mask
    B, T, k = a.shape
    grads: dict[str, np.ndarray] = {}
    dX = np.zeros_like(X)
    if cache.stage == "finetune":
        vmask = cache.valid[..., None]
        dP = np.where(vmask, 0.5 * dU, dU)
        dQ = np.where(vmask, 0.5 * dU, 0.0)
        dXs, ggru = gru_backward(gru, cache.gru_cache, dQ.reshape(B * k, -1))
        dXs = dXs.reshape(B, k, -1, X.shape[2])
        bj = np.nonzero(cache.sub_pos >= 0)
        dX[bj[0], cache.sub_pos[bj]] += dXs[bj]
        grads.update(ggru)
    else:
        dP = dU

    dX += np.einsum("btk,bkd->btd", a, dP)
    da = np.einsum("btd,bkd->btk", X, dP)
    if da_extra is not None:
        da = da + da_extra
    da = da * mask[..., None]
    dz = s * (da - (da * s).sum(axis=2, keepdims=True))
    inside = (cache.raw_r >= -1.0) & (cache.raw_r <= 1.0)
    dr = dz * inside / cache.epsilon
    dX += dr @ store.G
    grads["G"] = np.einsum("btk,btd->kd", dr, X)

    dV = np.zeros_like(store.V)
    np.add.at(dV, cache.idx[mask], dX[mask])
    grads["V"] = dV
    return grads
