"""Dataset provisioning: synthetic clusters, on-disk stores, session
splits, and seeded mini-batches.

Store format (binary, all little-endian), chosen by file suffix; any
path ending in ``.csv`` uses the text variant instead:

    bytes 7   magic b"FACLDS1"
    int64     sample count n
    int64     class count
    int64     input_dim d
    float64   n * d feature values, row-major
    int64     n labels
    uint8     n split flags (0 train, 1 test)

CSV variant: header ``label,split,v0,...,v{d-1}``, one sample per line.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .seeds import derive_rng

STORE_MAGIC = b"FACLDS1"


class StoreFormatError(ValueError):
    """Store bytes or rows do not follow the declared format."""


class SessionError(ValueError):
    """Session structure violates the incremental protocol."""


@dataclass(frozen=True)
class DatasetSpec:
    """Incremental benchmark schema.

    ``sessions`` counts the incremental sessions only; the base session
    is session 0 on top of these. Every class keeps ``train_per_class``
    train rows in the store; incremental sessions sample ``shots`` of
    them per class.
    """

    base_classes: int
    incremental_classes: int
    sessions: int
    ways: int
    shots: int
    input_dim: int
    train_per_class: int = 200
    test_per_class: int = 50

    def __post_init__(self) -> None:
        for name in ("base_classes", "sessions", "ways", "shots", "input_dim", "train_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.incremental_classes < 0:
            raise ValueError(f"incremental_classes must be >= 0, got {self.incremental_classes}")
        if self.ways * self.sessions != self.incremental_classes:
            raise ValueError(
                f"ways * sessions must equal incremental_classes, got {self.ways} * {self.sessions} != {self.incremental_classes}"
            )
        if self.shots > self.train_per_class:
            raise ValueError(f"shots {self.shots} exceed train_per_class {self.train_per_class}")

    @property
    def total_classes(self) -> int:
        return self.base_classes + self.incremental_classes

    def session_classes(self, s: int) -> np.ndarray:
        """Class ids introduced by session ``s`` (0 is the base session)."""
        if not 0 <= s <= self.sessions:
            raise SessionError(f"session index {s} out of range [0, {self.sessions}]")
        if s == 0:
            return np.arange(self.base_classes)
        start = self.base_classes + (s - 1) * self.ways
        return np.arange(start, start + self.ways)


@dataclass
class SampleStore:
    """Feature rows with integer labels and a train/test split flag."""

    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    n_classes: int

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.uint8)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise StoreFormatError(f"features must be 2-d, got shape {self.features.shape}")
        if self.labels.shape != (n,) or self.split.shape != (n,):
            raise StoreFormatError("labels and split flags must align with feature rows")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise StoreFormatError(f"label out of range [0, {self.n_classes})")
        if np.any(self.split > 1):
            raise StoreFormatError("split flags must be 0 (train) or 1 (test)")
        for cls in range(self.n_classes):
            if not np.any((self.labels == cls) & (self.split == 1)):
                raise StoreFormatError(f"class {cls} has no test rows")

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def rows(self, cls: int | None = None, split: int | None = None) -> np.ndarray:
        mask = np.ones(self.labels.shape[0], dtype=bool)
        if cls is not None:
            mask &= self.labels == cls
        if split is not None:
            mask &= self.split == split
        return np.flatnonzero(mask)


def gen_synthetic(spec: DatasetSpec, seed: int, separation: float = 2.0) -> SampleStore:
    """Isotropic Gaussian clusters with seeded unit-direction means.

    Each class mean sits at ``separation`` times a random unit vector;
    samples add standard normal noise per coordinate. Rows are laid out
    class by class, train block first, then test block.
    """
    if separation < 0.0:
        raise ValueError(f"separation must be non-negative, got {separation}")
    rng = derive_rng(seed, "synthetic")
    feats, labels, split = [], [], []
    for cls in range(spec.total_classes):
        direction = rng.standard_normal(spec.input_dim)
        direction /= np.linalg.norm(direction)
        mean = separation * direction
        n = spec.train_per_class + spec.test_per_class
        feats.append(mean + rng.standard_normal((n, spec.input_dim)))
        labels.append(np.full(n, cls))
        split.append(np.concatenate([np.zeros(spec.train_per_class), np.ones(spec.test_per_class)]))
    return SampleStore(
        features=np.vstack(feats),
        labels=np.concatenate(labels),
        split=np.concatenate(split),
        n_classes=spec.total_classes,
    )


def save_store(store: SampleStore, path) -> None:
    path = str(path)
    if path.endswith(".csv"):
        _save_store_csv(store, path)
        return
    n = store.features.shape[0]
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<3q", n, store.n_classes, store.input_dim))
        fh.write(np.ascontiguousarray(store.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(store.labels, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(store.split, dtype=np.uint8).tobytes())


def load_store(path) -> SampleStore:
    path = str(path)
    if path.endswith(".csv"):
        return _load_store_csv(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    offset = 0

    def take(count: int, what: str) -> bytes:
        nonlocal offset
        if offset + count > len(blob):
            raise StoreFormatError(f"truncated store: needed {count} bytes for {what} at offset {offset}")
        chunk = blob[offset : offset + count]
        offset += count
        return chunk

    if take(len(STORE_MAGIC), "magic") != STORE_MAGIC:
        raise StoreFormatError("bad magic: not a sample store")
    n, n_classes, dim = struct.unpack("<3q", take(24, "header counts"))
    if n < 0 or n_classes < 1 or dim < 1:
        raise StoreFormatError(f"implausible header: n={n} classes={n_classes} dim={dim}")
    features = np.frombuffer(take(8 * n * dim, "feature rows"), dtype="<f8").astype(np.float64).reshape(n, dim)
    labels = np.frombuffer(take(8 * n, "labels"), dtype="<i8").astype(np.int64)
    split = np.frombuffer(take(n, "split flags"), dtype=np.uint8).copy()
    if offset != len(blob):
        raise StoreFormatError(f"trailing bytes after store payload at offset {offset}")
    return SampleStore(features=features, labels=labels, split=split, n_classes=n_classes)


def _save_store_csv(store: SampleStore, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "split"] + [f"v{i}" for i in range(store.input_dim)])
        for i in range(store.features.shape[0]):
            row = [int(store.labels[i]), int(store.split[i])]
            row += [repr(float(v)) for v in store.features[i]]
            writer.writerow(row)


def _load_store_csv(path: str) -> SampleStore:
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StoreFormatError("empty store file") from None
        if header[:2] != ["label", "split"] or any(h != f"v{i}" for i, h in enumerate(header[2:])):
            raise StoreFormatError("bad csv header, expected label,split,v0,...")
        dim = len(header) - 2
        if dim < 1:
            raise StoreFormatError("csv store has no feature columns")
        labels, split, feats = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != dim + 2:
                raise StoreFormatError(f"line {line_no}: expected {dim + 2} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                split.append(int(row[1]))
                feats.append([float(v) for v in row[2:]])
            except ValueError as e:
                raise StoreFormatError(f"line {line_no}: {e}") from None
    if not labels:
        raise StoreFormatError("csv store has no sample rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    return SampleStore(
        features=np.asarray(feats, dtype=np.float64),
        labels=labels_arr,
        split=np.asarray(split, dtype=np.uint8),
        n_classes=int(labels_arr.max()) + 1,
    )


@dataclass
class Session:
    """Train rows introduced by one session plus the cumulative test pool."""

    index: int
    classes: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def split_sessions(store: SampleStore, spec: DatasetSpec, seed: int = 0) -> list[Session]:
    """Carve the store into the base session and few-shot increments.

    The base session keeps every train row of the base classes; each
    incremental session keeps ``shots`` train rows per class, picked by
    a seeded class-local shuffle. Test pools accumulate, so session s is
    evaluated on all classes seen so far.
    """
    if store.n_classes != spec.total_classes:
        raise SessionError(f"store has {store.n_classes} classes, schema expects {spec.total_classes}")
    if store.input_dim != spec.input_dim:
        raise SessionError(f"store width {store.input_dim} does not match schema input_dim {spec.input_dim}")
    sessions: list[Session] = []
    for s in range(spec.sessions + 1):
        classes = spec.session_classes(s)
        train_idx: list[np.ndarray] = []
        for cls in classes:
            idx = store.rows(cls=int(cls), split=0)
            if s == 0:
                if idx.size == 0:
                    raise SessionError(f"base class {cls} has no train rows")
                train_idx.append(idx)
            else:
                if idx.size < spec.shots:
                    raise SessionError(f"class {cls} has {idx.size} train rows, needs {spec.shots} shots")
                order = derive_rng(seed, "shots", int(cls)).permutation(idx.size)
                train_idx.append(idx[order[: spec.shots]])
        train = np.concatenate(train_idx)
        seen = spec.base_classes + s * spec.ways
        test = np.flatnonzero((store.split == 1) & (store.labels < seen))
        sessions.append(
            Session(
                index=s,
                classes=classes,
                train_x=store.features[train],
                train_y=store.labels[train],
                test_x=store.features[test],
                test_y=store.labels[test],
            )
        )
    return sessions


def make_batches(
    x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle into batches; a trailing single row is merged into
    the previous batch so every batch has at least 2 rows."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if n < 2:
        raise SessionError(f"need at least 2 samples to batch, got {n}")
    order = rng.permutation(n)
    bounds = list(range(0, n, batch_size)) + [n]
    chunks = [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    if len(chunks) > 1 and chunks[-1].size == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return [(x[c], y[c]) for c in chunks]
