"""Batched training objective: forward pass, all loss terms, and gradients."""
from __future__ import annotations

import numpy as np

from .data import TrainBatch
from .embedding import EmbeddingStore, GruParams
from .interest import batch_backward, batch_forward, pad_histories
from .losses import LossBreakdown, logsumexp, loss_orth, loss_unif_from_mass, scalar, total_loss


def main_loss_batch(
    U: np.ndarray,
    P: np.ndarray,
    N: np.ndarray,
    neg_mask: np.ndarray,
    epsilon: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean sampled-softmax loss over a batch with shared negatives.

    U: B x k x d interests, P: B x d positives, N: n x d shared negatives,
    neg_mask: B x n, True where a negative is excluded for that instance.
    Returns (loss, dU, dP, dN).
    """
    B = U.shape[0]
    pos_all = np.einsum("bkd,bd->bk", U, P) / epsilon
    pos_win = np.argmax(pos_all, axis=1)
    pos_score = pos_all[np.arange(B), pos_win]
    neg_all = np.einsum("bkd,nd->bnk", U, N) / epsilon
    neg_win = np.argmax(neg_all, axis=2)
    neg_score = np.take_along_axis(neg_all, neg_win[..., None], axis=2)[..., 0]
    neg_score = np.where(neg_mask, -np.inf, neg_score)

    logits = np.concatenate([pos_score[:, None], neg_score], axis=1)
    lse = logsumexp(logits, axis=1)
    loss = scalar(np.mean(lse - pos_score))
    coef = np.exp(logits - lse[:, None]) / B
    coef[:, 0] -= 1.0 / B

    k = U.shape[1]
    c_pos = coef[:, 0]
    dU = np.zeros_like(U)
    dU[np.arange(B), pos_win] += c_pos[:, None] * P / epsilon
    dP = c_pos[:, None] * U[np.arange(B), pos_win] / epsilon
    W = coef[:, 1:, None] * (neg_win[..., None] == np.arange(k))  # B x n x k
    dU += np.einsum("bnk,nd->bkd", W, N) / epsilon
    dN = np.einsum("bnk,bkd->nd", W, U) / epsilon
    return loss, dU, dP, dN


def unique_loss_batch(a: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over instances of each sequence's unique loss; padded rows ignored."""
    B, T, k = a.shape
    j = np.argmax(a, axis=2)
    m = np.take_along_axis(a, j[..., None], axis=2)[..., 0]
    S = a.sum(axis=2)
    m_safe = np.where(mask, m, 1.0)
    S_safe = np.where(mask, S, 1.0)
    n = mask.sum(axis=1)
    per_row = np.where(mask, -np.log(m_safe / S_safe), 0.0)
    value = scalar(np.mean(per_row.sum(axis=1) / n))
    scale = (mask / (n[:, None] * B))[..., None]
    grad = np.broadcast_to(1.0 / S_safe[..., None], a.shape).copy()
    grad -= (j[..., None] == np.arange(k)) / m_safe[..., None]
    return value, grad * scale


def batch_objective(
    store: EmbeddingStore,
    gru: GruParams,
    batch: TrainBatch,
    stage: str,
    epsilon: float = 0.1,
    lambda_o: float = 10.0,
    lambda_f: float = 1.0,
    lambda_q: float = 1.0,
    temperature: float | None = None,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Total loss of one batch and gradients for V, G (and the GRU when fine-tuning).

    ``epsilon`` sharpens the hyper-category assignment; ``temperature`` divides
    the scores in the main loss and defaults to ``epsilon``.
    """
    if temperature is None:
        temperature = epsilon
    idx, mask = pad_histories([inst.history for inst in batch.instances])
    U, cache = batch_forward(store, gru, idx, mask, epsilon, stage)

    pos, negs = batch.positives, batch.negatives
    main, dU, dP, dN = main_loss_batch(U, store.V[pos], store.V[negs], batch.neg_mask, temperature)

    unif, dw = loss_unif_from_mass(cache.a.sum(axis=(0, 1)))
    da = lambda_f * np.broadcast_to(dw, cache.a.shape)
    if stage == "finetune":
        unique, du = unique_loss_batch(cache.a, mask)
        da = da + lambda_q * du
    else:
        unique = unique_loss_batch(cache.a, mask)[0]

    grads = batch_backward(store, gru, cache, dU, da)
    orth, dG = loss_orth(store.G)
    grads["G"] += lambda_o * dG
    np.add.at(grads["V"], pos, dP)
    np.add.at(grads["V"], negs, dN)
    parts = total_loss(main, orth, unif, unique, stage, lambda_o, lambda_f, lambda_q)
    return parts, grads
