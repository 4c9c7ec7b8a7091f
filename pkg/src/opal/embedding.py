"""Learnable parameters: unit-norm item / hyper-category tables and GRU weights.

Checkpoint layout (little-endian)::

    b"OPAL"  u32 version
    u64 d, k, catalog_size, stage (0 pretrain / 1 finetune), has_optimizer, adam_step
    f32 V, G, W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h     (row-major)
    f32 Adam first moments, then second moments, same order  (if has_optimizer)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DivergenceError, UnsupportedVersionError

MAGIC = b"OPAL"
FORMAT_VERSION = 1
STAGES = ("pretrain", "finetune")
_HEADER = struct.Struct("<4sI6Q")


@dataclass
class EmbeddingStore:
    V: np.ndarray  # catalog_size x d, unit rows
    G: np.ndarray  # k x d, unit rows

    @property
    def d(self) -> int:
        return self.V.shape[1]

    @property
    def k(self) -> int:
        return self.G.shape[0]

    @property
    def catalog_size(self) -> int:
        return self.V.shape[0]

    def copy(self) -> "EmbeddingStore":
        return EmbeddingStore(self.V.copy(), self.G.copy())


@dataclass
class GruParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    @property
    def d(self) -> int:
        return self.W_z.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "GruParams":
        return GruParams(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def zeros(cls, d: int, dtype=np.float64) -> "GruParams":
        mats = {n: np.zeros((d, d), dtype) for n in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h")}
        vecs = {n: np.zeros(d, dtype) for n in ("b_z", "b_r", "b_h")}
        return cls(**mats, **vecs)


PARAM_ORDER = ("V", "G") + tuple(f.name for f in fields(GruParams))


def param_dict(store: EmbeddingStore, gru: GruParams) -> dict[str, np.ndarray]:
    """Views (not copies) of every trainable array, in checkpoint order."""
    return {"V": store.V, "G": store.G, **gru.arrays()}


def init_params(
    catalog_size: int, d: int, k: int, rng: np.random.Generator, dtype=np.float32
) -> tuple[EmbeddingStore, GruParams]:
    """U(-1/sqrt(d), 1/sqrt(d)) for everything; V and G rows then projected to unit norm."""
    if min(catalog_size, d, k) < 1:
        raise ValueError("catalog_size, d and k must be >= 1")
    bound = 1.0 / np.sqrt(d)

    def draw(*shape):
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    store = EmbeddingStore(draw(catalog_size, d), draw(k, d))
    gru = GruParams(
        W_z=draw(d, d), W_r=draw(d, d), W_h=draw(d, d),
        U_z=draw(d, d), U_r=draw(d, d), U_h=draw(d, d),
        b_z=draw(d), b_r=draw(d), b_h=draw(d),
    )
    renormalize(store)
    return store, gru


def _normalize_rows(M: np.ndarray, rows=None) -> None:
    sub = M if rows is None else M[rows]
    norms = np.linalg.norm(sub.astype(np.float64), axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0):
        raise DivergenceError("zero-norm or non-finite embedding row")
    out = (sub / norms).astype(M.dtype)
    if rows is None:
        M[...] = out
    else:
        M[rows] = out


def renormalize(store: EmbeddingStore, touched_rows=None, normalize_g: bool = True) -> None:
    """Project rows back onto the unit sphere in place.

    ``touched_rows`` restricts the V projection (None = all rows). G is small and
    always fully projected unless ``normalize_g`` is False.
    """
    _normalize_rows(store.V, touched_rows)
    if normalize_g:
        _normalize_rows(store.G)


@dataclass
class Checkpoint:
    store: EmbeddingStore
    gru: GruParams
    stage: str = "pretrain"
    # Adam moments keyed like PARAM_ORDER; empty when not saved
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    format_version: int = FORMAT_VERSION

    @property
    def d(self) -> int:
        return self.store.d

    @property
    def k(self) -> int:
        return self.store.k

    @property
    def catalog_size(self) -> int:
        return self.store.catalog_size


def _shapes(d: int, k: int, n: int) -> dict[str, tuple[int, ...]]:
    shapes = {"V": (n, d), "G": (k, d)}
    for name in PARAM_ORDER[2:]:
        shapes[name] = (d,) if name.startswith("b_") else (d, d)
    return shapes


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    if ckpt.stage not in STAGES:
        raise ValueError(f"unknown stage {ckpt.stage!r}")
    has_opt = bool(ckpt.adam_m)
    params = param_dict(ckpt.store, ckpt.gru)
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, ckpt.d, ckpt.k, ckpt.catalog_size,
        STAGES.index(ckpt.stage), int(has_opt), ckpt.adam_step,
    )
    with open(path, "wb") as f:
        f.write(header)
        blocks = [params]
        if has_opt:
            blocks += [ckpt.adam_m, ckpt.adam_v]
        for block in blocks:
            for name in PARAM_ORDER:
                f.write(np.ascontiguousarray(block[name], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, d, k, n, stage, has_opt, step = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: format version {version} (supported: {FORMAT_VERSION})")
    if min(d, k, n) < 1 or stage >= len(STAGES) or has_opt > 1:
        raise CheckpointError(f"{path}: invalid header fields")
    shapes = _shapes(d, k, n)
    per_block = sum(int(np.prod(s)) for s in shapes.values())
    n_blocks = 3 if has_opt else 1
    expected = _HEADER.size + 4 * per_block * n_blocks
    if len(raw) != expected:
        raise CheckpointError(f"{path}: size {len(raw)} bytes, expected {expected} (truncated?)")

    offset = _HEADER.size
    blocks = []
    for _ in range(n_blocks):
        block = {}
        for name in PARAM_ORDER:
            count = int(np.prod(shapes[name]))
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            block[name] = arr.reshape(shapes[name]).astype(np.float32)
            offset += 4 * count
        blocks.append(block)
    params = blocks[0]
    store = EmbeddingStore(params.pop("V"), params.pop("G"))
    gru = GruParams(**params)
    adam_m, adam_v = (blocks[1], blocks[2]) if has_opt else ({}, {})
    return Checkpoint(store, gru, STAGES[stage], adam_m, adam_v, step, version)
