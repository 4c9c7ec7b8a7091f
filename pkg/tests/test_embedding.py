import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opal.embedding import (
    Checkpoint,
    EmbeddingStore,
    GruParams,
    init_params,
    load_checkpoint,
    param_dict,
    renormalize,
    save_checkpoint,
)
from opal.errors import CheckpointError, DivergenceError, UnsupportedVersionError


def test_init_ranges_and_norms():
    store, gru = init_params(50, 8, 4, np.random.default_rng(0))
    assert np.allclose(np.linalg.norm(store.V, axis=1), 1, atol=1e-6)
    assert np.allclose(np.linalg.norm(store.G, axis=1), 1, atol=1e-6)
    bound = 1 / np.sqrt(8)
    for arr in gru.arrays().values():
        assert np.all(np.abs(arr) <= bound)
    assert store.V.dtype == np.float32


def test_init_is_seeded():
    a, _ = init_params(10, 4, 2, np.random.default_rng(3))
    b, _ = init_params(10, 4, 2, np.random.default_rng(3))
    assert np.array_equal(a.V, b.V) and np.array_equal(a.G, b.G)


def test_init_rejects_empty_shapes():
    with pytest.raises(ValueError):
        init_params(0, 4, 2, np.random.default_rng(0))


def test_renormalize_rows():
    store = EmbeddingStore(np.array([[3.0, 4.0], [0.0, 2.0]]), np.array([[5.0, 0.0]]))
    renormalize(store)
    assert store.V.tolist() == [[0.6, 0.8], [0.0, 1.0]]
    assert store.G.tolist() == [[1.0, 0.0]]


def test_renormalize_touched_rows_only():
    store = EmbeddingStore(np.array([[3.0, 4.0], [0.0, 2.0]]), np.array([[1.0, 0.0]]))
    renormalize(store, touched_rows=np.array([1]))
    assert store.V.tolist() == [[3.0, 4.0], [0.0, 1.0]]


@pytest.mark.parametrize("bad", [0.0, np.nan])
def test_renormalize_degenerate_row(bad):
    store = EmbeddingStore(np.array([[1.0, 0.0], [bad, bad]]), np.eye(2))
    with pytest.raises(DivergenceError):
        renormalize(store)


def _checkpoint(seed=0, n=7, d=3, k=2, with_opt=True):
    rng = np.random.default_rng(seed)
    store, gru = init_params(n, d, k, rng)
    m = v = {}
    if with_opt:
        m = {name: rng.normal(size=a.shape).astype(np.float32) for name, a in param_dict(store, gru).items()}
        v = {name: np.abs(a) for name, a in m.items()}
    return Checkpoint(store, gru, "finetune", m, v, 17 if with_opt else 0)


def _same(a: Checkpoint, b: Checkpoint):
    for name, arr in param_dict(a.store, a.gru).items():
        assert np.array_equal(arr, param_dict(b.store, b.gru)[name])
    assert a.stage == b.stage and a.adam_step == b.adam_step
    assert a.adam_m.keys() == b.adam_m.keys()
    for name in a.adam_m:
        assert np.array_equal(a.adam_m[name], b.adam_m[name])
        assert np.array_equal(a.adam_v[name], b.adam_v[name])


@pytest.mark.parametrize("with_opt", [True, False])
def test_checkpoint_round_trip(tmp_path, with_opt):
    ckpt = _checkpoint(with_opt=with_opt)
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    _same(ckpt, load_checkpoint(tmp_path / "m.ckpt"))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(1, 6), st.integers(1, 4), st.integers(0, 1000))
def test_checkpoint_round_trip_any_shape(tmp_path_factory, n, d, k, seed):
    path = tmp_path_factory.mktemp("ck") / "m.ckpt"
    ckpt = _checkpoint(seed, n, d, k)
    save_checkpoint(ckpt, path)
    _same(ckpt, load_checkpoint(path))


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(_checkpoint(), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(_checkpoint(), p)
    p.write_bytes(b"NOPE" + p.read_bytes()[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_future_version(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(_checkpoint(), p)
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    p.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersionError):
        load_checkpoint(p)


def test_gru_zeros_shapes():
    g = GruParams.zeros(5)
    assert g.W_z.shape == (5, 5) and g.b_h.shape == (5,)
    assert g.d == 5
