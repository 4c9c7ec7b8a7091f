"""Recall/HitRate evaluation, SPPMI diversity analysis and planted-category recovery."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from sklearn.metrics import adjusted_mutual_info_score

from .data import EvalRecord
from .embedding import EmbeddingStore, GruParams
from .interest import batch_forward, pad_histories
from .retrieval import RetrievalResult, retrieve_many

KS = (50, 100, 200)


def recall_at_k(recommended, truth, K: int) -> float:
    """|top-K ∩ truth| / |truth|."""
    truth = set(np.asarray(truth).tolist())
    if not truth:
        raise ValueError("empty ground truth")
    top = set(np.asarray(recommended)[:K].tolist())
    return len(top & truth) / len(truth)


def hitrate_at_k(per_user) -> float:
    """Fraction of users with at least one hit; accepts recalls or hit counts."""
    per_user = np.asarray(per_user, dtype=float)
    if per_user.size == 0:
        raise ValueError("no users evaluated")
    return float(np.mean(per_user > 0))


@dataclass
class EvalReport:
    recall: dict[int, float]
    hitrate: dict[int, float]
    n_users: int
    # items contributed by each interest to the top-max(K) lists, summed over users
    attribution: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def rows(self) -> list[tuple[int, float, float, int]]:
        return [(K, self.recall[K], self.hitrate[K], self.n_users) for K in sorted(self.recall)]


def user_interests(
    store: EmbeddingStore,
    gru: GruParams,
    histories: list[np.ndarray],
    epsilon: float,
    stage: str,
    max_len: int = 200,
    chunk: int = 256,
) -> np.ndarray:
    """Fused interests (n_users x k x d), histories truncated to the last ``max_len`` items."""
    out = []
    for start in range(0, len(histories), chunk):
        part = [h[-max_len:] for h in histories[start:start + chunk]]
        idx, mask = pad_histories(part)
        U, _ = batch_forward(store, gru, idx, mask, epsilon, stage)
        out.append(U)
    return np.concatenate(out, axis=0)


def retrieve_for_records(
    store, gru, records: list[EvalRecord], epsilon: float, stage: str, K: int, max_len: int = 200
) -> list[RetrievalResult]:
    histories = [r.history for r in records]
    U = user_interests(store, gru, histories, epsilon, stage, max_len)
    return retrieve_many(store, U, histories, K)


def evaluate(
    store: EmbeddingStore,
    gru: GruParams,
    records: list[EvalRecord],
    epsilon: float,
    stage: str,
    Ks=KS,
    max_len: int = 200,
) -> EvalReport:
    """Macro-averaged Recall@K and HitRate@K; the full (untruncated) history is excluded."""
    Ks = tuple(sorted(Ks))
    if not records:
        raise ValueError("no evaluation records")
    results = retrieve_for_records(store, gru, records, epsilon, stage, max(Ks), max_len)
    recall = {K: [] for K in Ks}
    for rec, res in zip(records, results):
        for K in Ks:
            recall[K].append(recall_at_k(res.items, rec.truth, K))
    attribution = np.sum([res.per_interest_counts for res in results], axis=0)
    return EvalReport(
        recall={K: float(np.mean(v)) for K, v in recall.items()},
        hitrate={K: hitrate_at_k(v) for K, v in recall.items()},
        n_users=len(records),
        attribution=attribution,
    )


# ---------------------------------------------------------------------------
# SPPMI
# ---------------------------------------------------------------------------


@dataclass
class SppmiMatrix:
    values: np.ndarray  # M x M, symmetric, zero diagonal
    items: np.ndarray  # catalog indices labelling rows/cols
    shift: float = 1.0
    cooccurrence: str = "user"


def sppmi(train_sequences, items, shift: float = 1.0) -> SppmiMatrix:
    """Shifted positive PMI between ``items``, co-occurrence = same user's training sequence.

    PMI(i, j) = ln(c(i, j) * D / (c(i) c(j))) with D the number of users;
    pairs that never co-occur are 0, as is the diagonal.
    """
    if shift <= 0:
        raise ValueError("shift must be positive")
    items = np.asarray(items, dtype=np.int64)
    col = {int(it): c for c, it in enumerate(items)}
    rows, cols = [], []
    D = 0
    for seq in train_sequences:
        seq_items = getattr(seq, "items", seq)
        present = {col[i] for i in np.asarray(seq_items).tolist() if i in col}
        rows.extend([D] * len(present))
        cols.extend(present)
        D += 1
    M = len(items)
    inc = csr_matrix(
        (np.ones(len(rows), dtype=np.float64), (rows, cols)), shape=(max(D, 1), M)
    )
    co = (inc.T @ inc).toarray()
    count = np.diag(co).copy()
    # correctly rounded log (libm) on the few distinct ratios: vectorised np.log
    # can be one ulp off and differs across CPUs
    nz = co > 0
    ratio, inverse = np.unique(co[nz] * D / np.outer(count, count)[nz], return_inverse=True)
    logs = np.array([math.log(r) for r in ratio.tolist()], dtype=np.float64)
    val = np.zeros_like(co)
    val[nz] = np.maximum(logs[inverse.ravel()] - math.log(shift), 0.0)
    np.fill_diagonal(val, 0.0)
    return SppmiMatrix(val, items, shift)


@dataclass
class DiversitySummary:
    mean_within: float  # same-interest pairs (nan if none)
    mean_cross: float  # different-interest pairs (nan if none)
    mean_all: float
    n_within: int
    n_cross: int


def diversity_summary(matrix: SppmiMatrix, interests: np.ndarray) -> DiversitySummary:
    """Mean off-diagonal SPPMI within vs across the interest that recalled each item."""
    interests = np.asarray(interests)
    M = len(interests)
    off = ~np.eye(M, dtype=bool)
    same = (interests[:, None] == interests[None, :]) & off
    cross = (interests[:, None] != interests[None, :])
    v = matrix.values

    def mean(sel):
        return float(v[sel].mean()) if sel.any() else float("nan")

    return DiversitySummary(mean(same), mean(cross), mean(off), int(same.sum()), int(cross.sum()))


# ---------------------------------------------------------------------------
# planted-category recovery
# ---------------------------------------------------------------------------


def item_categories(store: EmbeddingStore, items=None) -> np.ndarray:
    """Hard hyper-category of each item (argmax coordinate; independent of epsilon)."""
    V = store.V if items is None else store.V[np.asarray(items)]
    return np.argmax(V @ store.G.T, axis=1)


def matching_accuracy(planted, learned) -> float:
    planted, learned = np.asarray(planted), np.asarray(learned)
    _, p = np.unique(planted, return_inverse=True)
    _, q = np.unique(learned, return_inverse=True)
    conf = np.zeros((p.max() + 1, q.max() + 1), dtype=np.int64)
    np.add.at(conf, (p, q), 1)
    r, c = linear_sum_assignment(conf, maximize=True)
    return float(conf[r, c].sum() / len(planted))


def category_recovery(planted, learned) -> dict[str, float]:
    """AMI and best one-to-one matching accuracy between two labelings."""
    return {
        "ami": float(adjusted_mutual_info_score(planted, learned)),
        "accuracy": matching_accuracy(planted, learned),
    }
