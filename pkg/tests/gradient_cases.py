"""Random small problems for finite-difference checks of the full objective.

Instances that sit within ``margin`` of a non-differentiable point (an argmax
tie in the hard labels or in the max over interests) are redrawn.
"""
import numpy as np

from conftest import central_diff, extended, rel_err, unit_rows
from opal.data import TrainBatch, TrainInstance
from opal.embedding import EmbeddingStore, GruParams, param_dict
from opal.interest import batch_forward, pad_histories
from opal.objective import batch_objective

EPS = 0.3
TEMPERATURE = 0.5


def _problem(rng, n_items=10, d=5, k=3, B=3, max_len=6):
    store = EmbeddingStore(unit_rows(rng, n_items, d), unit_rows(rng, k, d))
    mats = {n: rng.uniform(-0.6, 0.6, (d, d)) for n in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h")}
    vecs = {n: rng.uniform(-0.6, 0.6, d) for n in ("b_z", "b_r", "b_h")}
    gru = GruParams(**mats, **vecs)
    instances = []
    for b in range(B):
        hist = rng.choice(n_items, size=int(rng.integers(1, max_len + 1)), replace=False)
        pos = int(rng.choice(np.setdiff1d(np.arange(n_items), hist)))
        instances.append(TrainInstance(f"u{b}", hist, pos, np.sort(np.append(hist, pos))))
    negatives = rng.integers(0, n_items, B)
    positives = np.array([i.positive for i in instances])
    batch = TrainBatch(instances, negatives, negatives[None, :] == positives[:, None])
    return store, gru, batch


def _margins(store, gru, batch, stage):
    idx, mask = pad_histories([i.history for i in batch.instances])
    U, cache = batch_forward(store, gru, idx, mask, EPS, stage)
    top = np.sort(cache.a[mask], axis=1)
    label_gap = np.min(top[:, -1] - top[:, -2]) if top.shape[1] > 1 else np.inf
    cand = store.V[np.concatenate([batch.positives, batch.negatives])]
    raw = np.sort(np.einsum("bkd,nd->bnk", U, cand), axis=2)
    max_gap = np.min(raw[..., -1] - raw[..., -2]) if raw.shape[2] > 1 else np.inf
    return min(label_gap, max_gap)


def draw(seed: int, stage: str, margin: float = 1e-3, **sizes):
    rng = np.random.default_rng(seed)
    while True:
        problem = _problem(rng, **sizes)
        if _margins(*problem, stage) > margin:
            return problem


def max_rel_error(store, gru, batch, stage) -> dict[str, float]:
    """Per-parameter max relative error of analytic vs central-difference gradients."""
    _, grads = batch_objective(store, gru, batch, stage, EPS, temperature=TEMPERATURE)
    store_x = EmbeddingStore(*extended(store.V, store.G))
    gru_x = GruParams(**{n: extended(a) for n, a in gru.arrays().items()})
    params = param_dict(store_x, gru_x)
    f = lambda: batch_objective(store_x, gru_x, batch, stage, EPS, temperature=TEMPERATURE)[0].total  # noqa: E731
    out = {}
    for name, g in grads.items():
        out[name] = rel_err(g, central_diff(f, params[name]))
    return out
