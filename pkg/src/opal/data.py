"""Interaction logs, temporal splits, training-instance sampling and synthetic data.

Item and user ids are opaque strings on the way in; everything downstream of
:func:`build_split` works with contiguous integer item indices into the catalog.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence as Seq

import numpy as np

from .errors import (
    MalformedRowError,
    SamplingError,
    SchemaError,
    SequenceTooShortError,
    SplitError,
)

REQUIRED_COLUMNS = ("user_id", "item_id", "timestamp")
DAY = 86400


@dataclass(frozen=True, slots=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class Sequence:
    """Chronological positive interactions of one user (item indices)."""

    user_id: str
    items: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class EvalRecord:
    user_id: str
    history: np.ndarray
    history_timestamps: np.ndarray
    truth: np.ndarray
    truth_timestamps: np.ndarray


@dataclass
class DatasetSplit:
    train: list[Sequence]
    val: list[EvalRecord]
    test: list[EvalRecord]
    catalog: list[str]

    @property
    def catalog_size(self) -> int:
        return len(self.catalog)

    def item_index(self) -> dict[str, int]:
        return {item: i for i, item in enumerate(self.catalog)}


@dataclass
class TrainInstance:
    user_id: str
    history: np.ndarray
    positive: int
    # all items of the user's training sequence, sorted; negatives avoid these
    interacted: np.ndarray = field(repr=False)


@dataclass
class TrainBatch:
    instances: list[TrainInstance]
    negatives: np.ndarray
    # neg_mask[b, n] is True when negatives[n] must not count against instance b
    neg_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def positives(self) -> np.ndarray:
        return np.array([inst.positive for inst in self.instances], dtype=np.int64)

    def candidate_counts(self) -> np.ndarray:
        """Number of softmax terms per instance (positive + unmasked negatives)."""
        return 1 + (~self.neg_mask).sum(axis=1)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _parse_row(row: dict, line: int) -> Interaction:
    user, item, ts = row.get("user_id"), row.get("item_id"), row.get("timestamp")
    if user is None or item is None or ts is None:
        raise MalformedRowError(line, "missing field")
    user, item = str(user).strip(), str(item).strip()
    if not user or not item:
        raise MalformedRowError(line, "empty user_id or item_id")
    if isinstance(ts, bool):
        raise MalformedRowError(line, f"bad timestamp {ts!r}")
    try:
        ts = int(str(ts).strip()) if not isinstance(ts, int) else ts
    except ValueError:
        raise MalformedRowError(line, f"bad timestamp {ts!r}") from None
    return Interaction(user, item, ts)


def deduplicate(interactions: Iterable[Interaction]) -> list[Interaction]:
    """Keep only the earliest interaction per (user, item), preserving input order."""
    earliest: dict[tuple[str, str], Interaction] = {}
    order: list[tuple[str, str]] = []
    for it in interactions:
        key = (it.user_id, it.item_id)
        prev = earliest.get(key)
        if prev is None:
            order.append(key)
            earliest[key] = it
        elif it.timestamp < prev.timestamp:
            earliest[key] = it
    return [earliest[key] for key in order]


def ingest(log_file: str | Path, format: str | None = None) -> list[Interaction]:
    """Read a CSV or JSONL interaction log.

    ``format`` defaults to the file extension. Rows are validated; a bad row
    raises :class:`MalformedRowError` carrying its 1-based line number.
    """
    path = Path(log_file)
    if format is None:
        format = "jsonl" if path.suffix in (".jsonl", ".json") else "csv"
    rows: list[Interaction] = []
    with open(path, newline="", encoding="utf-8") as f:
        if format == "csv":
            reader = csv.DictReader(f)
            missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
            for row in reader:
                if None in row or any(row.get(c) is None for c in REQUIRED_COLUMNS):
                    raise MalformedRowError(reader.line_num, "wrong number of fields")
                rows.append(_parse_row(row, reader.line_num))
        elif format == "jsonl":
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise MalformedRowError(lineno, f"invalid json ({e.msg})") from None
                if not isinstance(row, dict):
                    raise MalformedRowError(lineno, "expected an object")
                missing = [c for c in REQUIRED_COLUMNS if c not in row]
                if missing:
                    raise SchemaError(f"{path} line {lineno}: missing key(s) {', '.join(missing)}")
                rows.append(_parse_row(row, lineno))
        else:
            raise ValueError(f"unknown log format {format!r}")
    return deduplicate(rows)


def write_interactions(interactions: Iterable[Interaction], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS)
        for it in interactions:
            w.writerow((it.user_id, it.item_id, it.timestamp))


# ---------------------------------------------------------------------------
# temporal split
# ---------------------------------------------------------------------------


def build_split(
    interactions: Seq[Interaction],
    day_length: int = DAY,
    catalog: Seq[str] | None = None,
) -> DatasetSplit:
    """Split by the last two windows of ``day_length`` ending at the latest timestamp.

    The last window is the test ground truth, the one before it the validation
    ground truth, everything earlier is training data. Validation histories are
    the user's training interactions; test histories are training + validation.
    Users with an empty history or empty truth are dropped from that split.

    ``catalog`` fixes the item-index mapping (e.g. one saved next to a
    checkpoint); by default it is the sorted set of item ids in the log.
    """
    if day_length <= 0:
        raise ValueError("day_length must be positive")
    interactions = deduplicate(interactions)
    if not interactions:
        raise SplitError("no interactions")
    t_max = max(it.timestamp for it in interactions)
    t_min = min(it.timestamp for it in interactions)
    test_start = t_max - day_length  # test: (test_start, t_max]
    val_start = t_max - 2 * day_length  # val: (val_start, test_start]
    if t_min > val_start:
        raise SplitError(
            f"interactions span {t_max - t_min}s, need at least three windows of {day_length}s"
        )

    if catalog is None:
        catalog = sorted({it.item_id for it in interactions})
    catalog = list(catalog)
    index = {item: i for i, item in enumerate(catalog)}
    unknown = {it.item_id for it in interactions if it.item_id not in index}
    if unknown:
        raise SplitError(f"{len(unknown)} item id(s) not in catalog, e.g. {sorted(unknown)[0]!r}")

    per_user: dict[str, list[tuple[int, int]]] = defaultdict(list)
    for it in interactions:
        per_user[it.user_id].append((it.timestamp, index[it.item_id]))

    train, val, test = [], [], []
    for user in sorted(per_user):
        events = sorted(per_user[user])  # (timestamp, item): stable, deterministic
        ts = np.array([e[0] for e in events], dtype=np.int64)
        items = np.array([e[1] for e in events], dtype=np.int64)
        tr = ts <= val_start
        va = (ts > val_start) & (ts <= test_start)
        te = ts > test_start
        if tr.any():
            train.append(Sequence(user, items[tr], ts[tr]))
        if tr.any() and va.any():
            val.append(EvalRecord(user, items[tr], ts[tr], items[va], ts[va]))
        hist = tr | va
        if hist.any() and te.any():
            test.append(EvalRecord(user, items[hist], ts[hist], items[te], ts[te]))
    return DatasetSplit(train=train, val=val, test=test, catalog=catalog)


# ---------------------------------------------------------------------------
# training instances and batches
# ---------------------------------------------------------------------------


def sample_instance(
    seq: Sequence,
    rng: np.random.Generator,
    min_history: int = 1,
    future_window: int | None = None,
    max_len: int = 200,
    t: int | None = None,
) -> TrainInstance:
    """Sample a future-item prediction instance from one training sequence.

    The split point ``t`` (history length) is uniform on ``[min_history, n-1]``;
    the positive is uniform over the next ``future_window`` items (all remaining
    items when None). The history keeps the most recent ``max_len`` items.
    """
    n = len(seq)
    if n < min_history + 1:
        raise SequenceTooShortError(f"user {seq.user_id}: length {n} < {min_history + 1}")
    if t is None:
        t = int(rng.integers(min_history, n))
    elif not min_history <= t <= n - 1:
        raise ValueError(f"split point {t} outside [{min_history}, {n - 1}]")
    end = n if future_window is None else min(t + future_window, n)
    pos = int(seq.items[rng.integers(t, end)])
    history = seq.items[max(0, t - max_len):t]
    return TrainInstance(seq.user_id, history, pos, np.unique(seq.items))


def sample_negative(
    interacted: np.ndarray, catalog_size: int, rng: np.random.Generator, retries: int = 64
) -> int:
    """Uniform draw from items not in the sorted array ``interacted``."""
    for _ in range(retries):
        cand = int(rng.integers(catalog_size))
        pos = np.searchsorted(interacted, cand)
        if pos == len(interacted) or interacted[pos] != cand:
            return cand
    # rejection kept failing: sample the complement explicitly (still uniform)
    free = np.setdiff1d(np.arange(catalog_size), interacted, assume_unique=True)
    if len(free) == 0:
        raise SamplingError(f"no non-interacted items left in a catalog of {catalog_size}")
    return int(free[rng.integers(len(free))])


def make_batch(
    instances: list[TrainInstance], catalog_size: int, rng: np.random.Generator
) -> TrainBatch:
    if not instances:
        raise ValueError("empty batch")
    negatives = np.array(
        [sample_negative(inst.interacted, catalog_size, rng) for inst in instances],
        dtype=np.int64,
    )
    positives = np.array([inst.positive for inst in instances], dtype=np.int64)
    neg_mask = negatives[None, :] == positives[:, None]
    return TrainBatch(instances, negatives, neg_mask)


def iter_epoch(
    train: list[Sequence],
    rng: np.random.Generator,
    batch_size: int,
    catalog_size: int,
    min_history: int = 1,
    future_window: int | None = None,
    max_len: int = 200,
):
    """One instance per eligible training sequence, shuffled, in batches."""
    eligible = [s for s in train if len(s) >= min_history + 1]
    order = rng.permutation(len(eligible))
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        instances = [
            sample_instance(eligible[i], rng, min_history, future_window, max_len) for i in chunk
        ]
        yield make_batch(instances, catalog_size, rng)


# ---------------------------------------------------------------------------
# synthetic planted-category data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    n_users: int = 500
    n_items: int = 2000
    n_categories: int = 4
    dim: int = 32  # embedding size the data is meant for; not used by the generator
    dirichlet_alpha: float = 0.3
    # None -> split n_items as evenly as possible
    category_sizes: tuple[int, ...] | None = None
    min_length: int = 30
    max_length: int = 80
    drift: bool = True
    n_days: int = 14
    day_length: int = DAY
    seed: int = 0

    def validate(self) -> None:
        if self.n_categories < 1:
            raise ValueError("n_categories must be >= 1")
        if self.n_users < 1 or self.n_items < self.n_categories:
            raise ValueError("need n_users >= 1 and n_items >= n_categories")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if self.n_days < 3 or self.day_length < 1:
            raise ValueError("need n_days >= 3 and day_length >= 1")
        sizes = self.sizes()
        if len(sizes) != self.n_categories or sum(sizes) != self.n_items or min(sizes) < 1:
            raise ValueError("category_sizes must be positive and sum to n_items")

    def sizes(self) -> tuple[int, ...]:
        if self.category_sizes is not None:
            return tuple(self.category_sizes)
        base, extra = divmod(self.n_items, self.n_categories)
        return tuple(base + (c < extra) for c in range(self.n_categories))


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Interaction], dict[str, int]]:
    """Draw users with Dirichlet category mixtures and emit their interactions.

    Each step samples a category from the user's mixture, then an item uniformly
    among that category's items the user has not consumed yet (so the log has
    no duplicate (user, item) pairs). With ``drift`` the mixture is redrawn at
    the sequence midpoint. Timestamps are sorted uniform draws over ``n_days``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.n_categories
    width = len(str(spec.n_items - 1))
    item_ids = [f"v{i:0{width}d}" for i in range(spec.n_items)]
    # shuffle so item index carries no category information
    labels_arr = rng.permutation(np.repeat(np.arange(k), spec.sizes()))
    members = [np.flatnonzero(labels_arr == c) for c in range(k)]

    uwidth = len(str(spec.n_users - 1))
    horizon = spec.n_days * spec.day_length
    out: list[Interaction] = []
    for u in range(spec.n_users):
        user = f"u{u:0{uwidth}d}"
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        mix = rng.dirichlet(np.full(k, spec.dirichlet_alpha))
        seen: set[int] = set()
        items = []
        for step in range(length):
            if spec.drift and step == length // 2 and step > 0:
                mix = rng.dirichlet(np.full(k, spec.dirichlet_alpha))
            c = int(rng.choice(k, p=mix))
            pool = members[c]
            item = int(pool[rng.integers(len(pool))])
            if item in seen:
                free = [i for i in pool if i not in seen]
                if free:
                    item = int(free[rng.integers(len(free))])
            seen.add(item)
            items.append(item)
        stamps = np.sort(rng.integers(0, horizon, size=length))
        out.extend(
            Interaction(user, item_ids[i], int(t)) for i, t in zip(items, stamps)
        )
    labels = {item_ids[i]: int(labels_arr[i]) for i in range(spec.n_items)}
    return out, labels


def write_labels(labels: dict[str, int], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("item_id", "category"))
        for item in sorted(labels):
            w.writerow((item, labels[item]))


def read_labels(path: str | Path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as f:
        return {row["item_id"]: int(row["category"]) for row in csv.DictReader(f)}
