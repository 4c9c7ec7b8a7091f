"""Seeded synthetic reference runs and the measurements taken on them.

The reference setting is the one the acceptance suite and the scripts share:
four planted categories over 2,000 items, 500 users, d=32, k=4. The training
knobs that differ from the library defaults (small batches, a larger step,
a softer main-loss temperature) were chosen once so a run fits in well under
a minute on one core, then frozen here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetSplit, SyntheticSpec, build_split, generate_synthetic
from .embedding import EmbeddingStore, GruParams
from .evaluation import (
    EvalReport,
    SppmiMatrix,
    category_recovery,
    evaluate,
    item_categories,
    retrieve_for_records,
    sppmi,
)
from .interest import coordinates, softmax
from .losses import category_mass, loss_unif_from_mass
from .trainer import TrainConfig, TrainResult, train


def reference_spec(seed: int = 0) -> SyntheticSpec:
    # nearly single-category users and no mid-sequence drift
    return SyntheticSpec(
        n_users=500, n_items=2000, n_categories=4, dim=32,
        dirichlet_alpha=0.05, drift=False, seed=seed,
    )


def reference_config(seed: int = 0, k: int = 4) -> TrainConfig:
    return TrainConfig(
        d=32, k=k, batch_size=32, learning_rate=0.01, epsilon=0.1, temperature=0.5,
        patience=5, max_epochs=100, seed=seed,
    )


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    split: DatasetSplit
    labels: dict[str, int]

    @property
    def planted(self) -> np.ndarray:
        """Planted category of every catalog item, in catalog order."""
        return np.array([self.labels[i] for i in self.split.catalog])


def synthetic_data(spec: SyntheticSpec) -> SyntheticData:
    log, labels = generate_synthetic(spec)
    return SyntheticData(spec, build_split(log, day_length=spec.day_length), labels)


def run(data: SyntheticData, config: TrainConfig, **flags) -> TrainResult:
    """``train`` on the synthetic split; ``flags`` are passed through (skip_*, pretrained)."""
    return train(config, data.split, **flags)


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------


def max_offdiag(G: np.ndarray) -> float:
    M = np.abs(G.astype(np.float64) @ G.T.astype(np.float64))
    np.fill_diagonal(M, 0.0)
    return float(M.max()) if len(G) > 1 else 0.0


def assignment(store: EmbeddingStore, items: np.ndarray, epsilon: float) -> np.ndarray:
    return softmax(coordinates(store.G, store.V[np.asarray(items)]) / epsilon)


@dataclass
class Disentanglement:
    accuracy: float
    ami: float
    mean_max_assignment: float
    uniformity: float  # discrete coefficient over the whole training corpus


def disentanglement(store: EmbeddingStore, data: SyntheticData, epsilon: float) -> Disentanglement:
    catalog = np.arange(data.split.catalog_size)
    rec = category_recovery(data.planted, item_categories(store, catalog))
    a_items = assignment(store, catalog, epsilon)
    corpus = np.concatenate([s.items for s in data.split.train])
    unif, _ = loss_unif_from_mass(category_mass(assignment(store, corpus, epsilon)))
    return Disentanglement(rec["accuracy"], rec["ami"], float(a_items.max(axis=1).mean()), float(unif))


def heldout_report(result: TrainResult, data: SyntheticData, config: TrainConfig) -> EvalReport:
    return evaluate(result.store, result.gru, data.split.test, config.epsilon, result.stage,
                    max_len=config.max_len)


@dataclass
class PooledDiversity:
    within: float
    cross: float
    overall: float


def recalled_diversity(
    store: EmbeddingStore,
    gru: GruParams,
    stage: str,
    data: SyntheticData,
    epsilon: float,
    K: int = 50,
    matrix: SppmiMatrix | None = None,
) -> PooledDiversity:
    """Mean pairwise SPPMI among each test user's top-K, pooled over users.

    Pairs are split by whether the two items were recalled by the same interest.
    """
    if matrix is None:
        matrix = sppmi(data.split.train, np.arange(data.split.catalog_size))
    results = retrieve_for_records(store, gru, data.split.test, epsilon, stage, K)
    sums = np.zeros(2)
    counts = np.zeros(2)
    for res in results:
        sub = matrix.values[np.ix_(res.items, res.items)]
        same = res.interests[:, None] == res.interests[None, :]
        off = ~np.eye(len(res.items), dtype=bool)
        for slot, sel in enumerate((same & off, ~same)):
            sums[slot] += sub[sel].sum()
            counts[slot] += sel.sum()
    with np.errstate(invalid="ignore"):
        within, cross = sums / counts
    return PooledDiversity(float(within), float(cross), float(sums.sum() / counts.sum()))

