"""Top-K candidate retrieval with multiple interest embeddings.

An item's serving score is its maximum inner product over the user's (valid)
interests. Ranking is by score descending, then item index ascending.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import EmbeddingStore


@dataclass
class RetrievalResult:
    items: np.ndarray
    scores: np.ndarray
    interests: np.ndarray  # argmax interest per returned item (index into u)
    per_interest_counts: np.ndarray
    truncated: bool = False  # fewer than K items were available

    def __len__(self) -> int:
        return len(self.items)


def top_k(scores: np.ndarray, K: int, candidates: np.ndarray | None = None) -> np.ndarray:
    """Indices of the K best entries of ``scores`` (ties -> lower index first).

    ``candidates`` restricts the ranking to these indices (sorted ascending);
    ``scores`` must then be aligned with ``candidates``.
    """
    ids = np.arange(len(scores)) if candidates is None else np.asarray(candidates)
    if len(scores) > K:
        thresh = np.partition(scores, len(scores) - K)[len(scores) - K]
        keep = np.flatnonzero(scores >= thresh)
    else:
        keep = np.arange(len(scores))
    order = np.lexsort((ids[keep], -scores[keep]))[:K]
    return keep[order]


def inner_products(V: np.ndarray, u: np.ndarray) -> np.ndarray:
    """n x k matrix of v . u_j, one matrix-vector product per interest.

    Both the direct scan and the index go through here so their scores agree
    bit for bit.
    """
    return np.stack([V @ vec for vec in np.atleast_2d(u)], axis=1)


def _finish(items, scores, winners, k, K) -> RetrievalResult:
    counts = np.bincount(winners, minlength=k)
    return RetrievalResult(items, scores, winners, counts, truncated=len(items) < K)


def retrieve(
    store: EmbeddingStore,
    u: np.ndarray,
    history=(),
    K: int = 200,
    valid: np.ndarray | None = None,
) -> RetrievalResult:
    """Exact scan of the whole catalog; history items are excluded.

    Returned ``interests`` index the rows of ``u``; invalid rows (``valid`` False)
    never score.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    u = np.atleast_2d(u)
    if valid is None:
        valid = np.ones(len(u), dtype=bool)
    if not valid.any():
        raise ValueError("no valid interest")
    raw = inner_products(store.V, u)
    raw[:, ~valid] = -np.inf
    winners = np.argmax(raw, axis=1)
    scores = raw[np.arange(len(raw)), winners]
    allowed = np.ones(store.catalog_size, dtype=bool)
    allowed[np.asarray(list(history), dtype=np.int64)] = False
    cand = np.flatnonzero(allowed)
    pick = top_k(scores[cand], K, cand)
    items = cand[pick]
    return _finish(items, scores[items], winners[items], len(u), K)


def retrieve_many(
    store: EmbeddingStore, U: np.ndarray, histories: list[np.ndarray], K: int,
    valid: np.ndarray | None = None,
) -> list[RetrievalResult]:
    """``retrieve`` for a batch of users (U: B x k x d), sharing one matmul."""
    raw = np.einsum("nd,bkd->bnk", store.V, U)
    if valid is not None:
        raw = np.where(valid[:, None, :], raw, -np.inf)
    winners = np.argmax(raw, axis=2)
    scores = np.take_along_axis(raw, winners[..., None], axis=2)[..., 0]
    out = []
    all_items = np.arange(store.catalog_size)
    for b, hist in enumerate(histories):
        s = scores[b].copy()
        s[np.asarray(hist, dtype=np.int64)] = -np.inf
        n_free = store.catalog_size - len(np.unique(hist))
        pick = top_k(s, min(K, n_free))
        items = all_items[pick]
        out.append(_finish(items, s[items], winners[b, items], U.shape[1], K))
    return out


class Index:
    """Per-interest candidate source. Implementations must return, for each
    interest vector, candidate items with their inner-product scores.

    Approximate subclasses must document their recall against :class:`ExactIndex`.
    """

    catalog_size: int

    def search(self, u: np.ndarray, K: int, exclude=()) -> list[tuple[np.ndarray, np.ndarray]]:
        raise NotImplementedError


@dataclass
class ExactIndex(Index):
    """Brute-force inner-product scan (recall 1 by construction)."""

    V: np.ndarray = field(repr=False)

    @property
    def catalog_size(self) -> int:
        return self.V.shape[0]

    def search(self, u, K, exclude=()):
        allowed = np.ones(self.catalog_size, dtype=bool)
        allowed[np.asarray(list(exclude), dtype=np.int64)] = False
        cand = np.flatnonzero(allowed)
        raw = inner_products(self.V, u)
        out = []
        for j in range(raw.shape[1]):
            s = raw[cand, j]
            pick = top_k(s, K, cand)
            out.append((cand[pick], s[pick]))
        return out


def build_index(store: EmbeddingStore) -> ExactIndex:
    return ExactIndex(store.V.copy())


def index_retrieve(
    index: Index,
    u: np.ndarray,
    K: int,
    history=(),
    per_interest: int | None = None,
    valid: np.ndarray | None = None,
    catalog_size: int | None = None,
) -> RetrievalResult:
    """Fetch ``per_interest`` (default K) candidates per interest, merge by max score, re-rank."""
    if catalog_size is not None and catalog_size != index.catalog_size:
        raise ValueError(
            f"index built for {index.catalog_size} items, catalog has {catalog_size}"
        )
    u = np.atleast_2d(u)
    if valid is None:
        valid = np.ones(len(u), dtype=bool)
    live = np.flatnonzero(valid)
    if len(live) == 0:
        raise ValueError("no valid interest")
    pools = index.search(u[live], per_interest or K, exclude=history)
    best: dict[int, tuple[float, int]] = {}
    for j, (items, scores) in zip(live, pools):
        for item, score in zip(items.tolist(), scores.tolist()):
            prev = best.get(item)
            if prev is None or score > prev[0]:  # strict: lowest interest index wins ties
                best[item] = (score, int(j))
    items = np.array(sorted(best), dtype=np.int64)
    scores = np.array([best[i][0] for i in items.tolist()], dtype=pools[0][1].dtype)
    winners = np.array([best[i][1] for i in items.tolist()], dtype=np.int64)
    pick = top_k(scores, K, items) if len(items) else np.array([], dtype=np.int64)
    return _finish(items[pick], scores[pick], winners[pick], len(u), K)
