import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import unit_rows
from opal.embedding import EmbeddingStore, GruParams
from opal.interest import (
    assign_hard,
    assign_soft,
    batch_forward,
    encode_user,
    fuse,
    gru_forward,
    hard_interests,
    pad_histories,
    sigmoid,
    soft_interests,
    split_sequence,
)


def _store(rng, n=12, d=6, k=3):
    return EmbeddingStore(unit_rows(rng, n, d), unit_rows(rng, k, d))


def _gru(rng, d, scale=0.5):
    mats = {n: rng.uniform(-scale, scale, (d, d)) for n in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h")}
    vecs = {n: rng.uniform(-scale, scale, d) for n in ("b_z", "b_r", "b_h")}
    return GruParams(**mats, **vecs)


# ---------------------------------------------------------------- soft assignment


def test_single_category_gets_everything(rng):
    st_ = _store(rng, k=1)
    assert np.all(assign_soft(st_, np.arange(5), 0.1).a == 1.0)


def test_sharpened_two_way_assignment_against_mpmath():
    # coordinates (0.5, -0.5) with epsilon 0.1
    store = EmbeddingStore(np.array([[0.5, -0.5, np.sqrt(0.5)]]), np.eye(3)[:2])
    a = assign_soft(store, np.array([0]), 0.1).a[0]
    e1, e2 = mpmath.exp(mpmath.mpf(5)), mpmath.exp(mpmath.mpf(-5))
    oracle = [e1 / (e1 + e2), e2 / (e1 + e2)]
    assert a == pytest.approx([float(x) for x in oracle], rel=1e-12)
    assert a == pytest.approx([0.9999546, 4.54e-5], rel=1e-3)


def test_equal_coordinates_give_uniform():
    store = EmbeddingStore(np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]))
    assert assign_soft(store, np.array([0]), 0.1).a[0] == pytest.approx(np.full(3, 1 / 3))


def test_epsilon_must_be_positive(rng):
    with pytest.raises(ValueError):
        assign_soft(_store(rng), np.arange(2), 0.0)


def test_empty_sequence_rejected(rng):
    with pytest.raises(ValueError):
        assign_soft(_store(rng), np.array([], dtype=int), 0.1)


@given(st.integers(0, 2**31), st.floats(0.01, 5.0))
def test_assignment_rows_are_distributions(seed, eps):
    r = np.random.default_rng(seed)
    a = assign_soft(_store(r), r.integers(0, 12, 7), eps).a
    assert np.all(a >= 0)
    assert np.allclose(a.sum(axis=1), 1.0)


# ---------------------------------------------------------------- soft interests


def test_single_item_single_category(rng):
    store = _store(rng, k=1)
    p, w = soft_interests(assign_soft(store, np.array([4]), 0.1), store.V[[4]])
    assert np.allclose(p[0], store.V[4])
    assert w[0] == pytest.approx(1.0)


def test_soft_interests_match_double_loop(rng):
    store = _store(rng, n=20, d=5, k=4)
    items = rng.integers(0, 20, 9)
    assign = assign_soft(store, items, 0.3)
    p, w = soft_interests(assign, store.V[items])
    for j in range(4):
        oracle = np.zeros(5)
        for l, it in enumerate(items):
            oracle += assign.a[l, j] * store.V[it]
        assert np.allclose(p[j], oracle, atol=1e-6)
        assert w[j] == pytest.approx(sum(assign.a[:, j]))


def test_one_hot_assignment_sums_categories():
    from opal.interest import AssignmentMatrix
    X = np.arange(12.0).reshape(4, 3)
    a = np.eye(2)[[0, 1, 0, 0]]
    p, _ = soft_interests(AssignmentMatrix(a, a, 0.1), X)
    assert np.array_equal(p[0], X[0] + X[2] + X[3])
    assert np.array_equal(p[1], X[1])


# ---------------------------------------------------------------- hard assignment and split


def test_hard_labels_and_ties():
    from opal.interest import AssignmentMatrix
    a = np.array([[0.7, 0.3], [0.5, 0.5]])
    assert assign_hard(AssignmentMatrix(a, a, 0.1)).tolist() == [0, 0]


@given(st.integers(0, 2**32 - 1), st.floats(0.5, 4.0))
def test_labels_from_coordinates_and_probabilities_agree(seed, c):
    # softmax is monotone, so positive rescaling of the coordinates keeps the argmax
    from opal.interest import AssignmentMatrix, softmax
    r = np.random.default_rng(seed).uniform(-1, 1, (6, 3))
    a = softmax(c * r / 0.1)
    labels = assign_hard(AssignmentMatrix(a, r, 0.1))
    assert labels.tolist() == [int(np.argmax(row)) for row in r]


def test_split_all_same_label():
    subs = split_sequence(np.array([5, 6, 7]), np.array([1, 1, 1]), 3)
    assert [s.tolist() for s in subs] == [[], [5, 6, 7], []]


def test_split_alternating():
    subs = split_sequence(np.array([1, 2, 3, 4]), np.array([0, 1, 0, 1]), 2)
    assert [s.tolist() for s in subs] == [[1, 3], [2, 4]]


@given(st.lists(st.integers(0, 3), min_size=1, max_size=30))
def test_split_is_an_ordered_partition(labels):
    items = np.arange(100, 100 + len(labels))
    subs = split_sequence(items, np.array(labels), 4)
    assert sorted(np.concatenate(subs).tolist()) == items.tolist()
    for j, s in enumerate(subs):
        assert s.tolist() == [it for it, lab in zip(items, labels) if lab == j]


def test_split_rejects_bad_labels():
    with pytest.raises(ValueError):
        split_sequence(np.arange(3), np.array([0, 3, 1]), 3)


# ---------------------------------------------------------------- GRU


def _gru_cell(g, x, h):
    z = 1 / (1 + np.exp(-(g.W_z @ x + g.U_z @ h + g.b_z)))
    r = 1 / (1 + np.exp(-(g.W_r @ x + g.U_r @ h + g.b_r)))
    n = np.tanh(g.W_h @ x + g.U_h @ (r * h) + g.b_h)
    return (1 - z) * n + z * h


def test_zero_gru_gives_zero_state(rng):
    store = _store(rng)
    q, valid = hard_interests(store, GruParams.zeros(6), [np.array([1, 2, 3]), np.array([], dtype=int), np.array([4])])
    assert np.all(q == 0)
    assert valid.tolist() == [True, False, True]


def test_single_item_is_one_cell_step(rng):
    store, g = _store(rng), _gru(rng, 6)
    q, _ = hard_interests(store, g, [np.array([3]), np.array([], dtype=int), np.array([], dtype=int)])
    assert np.allclose(q[0], _gru_cell(g, store.V[3], np.zeros(6)), atol=1e-12)


def test_gru_matches_step_loop_with_padding(rng):
    g = _gru(rng, 4)
    X = rng.normal(size=(3, 5, 4))
    lengths = [5, 2, 3]
    mask = np.arange(5)[None, :] < np.array(lengths)[:, None]
    h, _ = gru_forward(g, X, mask)
    for n, L in enumerate(lengths):
        ref = np.zeros(4)
        for t in range(L):
            ref = _gru_cell(g, X[n, t], ref)
        assert np.allclose(h[n], ref, atol=1e-12)


def test_sigmoid_is_stable():
    assert sigmoid(np.array([-800.0, 0.0, 800.0])).tolist() == [0.0, 0.5, 1.0]


# ---------------------------------------------------------------- fusion


def test_fuse_rules():
    p = np.array([[1.0, 0.0], [2.0, 2.0]])
    q = np.array([[0.0, 1.0], [9.0, 9.0]])
    valid = np.array([True, False])
    assert np.array_equal(fuse(p, q, valid, "pretrain"), p)
    assert fuse(p, q, valid, "finetune").tolist() == [[0.5, 0.5], [2.0, 2.0]]
    assert np.array_equal(fuse(p, p, np.array([True, True]), "finetune"), p)
    with pytest.raises(ValueError):
        fuse(p, q, valid, "other")


def test_pretrain_ignores_gru(rng):
    store = _store(rng)
    items = np.array([0, 5, 7, 2])
    a = encode_user(store, GruParams.zeros(6), items, 0.1, "pretrain").fused
    b = encode_user(store, _gru(rng, 6), items, 0.1, "pretrain").fused
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- batched path


@pytest.mark.parametrize("stage", ["pretrain", "finetune"])
def test_batch_forward_matches_per_sequence(rng, stage):
    store, g = _store(rng, n=30, d=5, k=3), _gru(rng, 5)
    histories = [rng.integers(0, 30, L) for L in (1, 4, 9, 6)]
    idx, mask = pad_histories(histories)
    U, cache = batch_forward(store, g, idx, mask, 0.2, stage)
    for b, h in enumerate(histories):
        ref = encode_user(store, g, h, 0.2, stage)
        assert np.allclose(U[b], ref.fused, atol=1e-10)
        if stage == "finetune":
            assert cache.valid[b].tolist() == ref.valid.tolist()
