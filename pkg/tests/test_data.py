"""Synthetic data generation, the sample store formats, and session
splitting arithmetic."""

from __future__ import annotations

import numpy as np
import pytest

from mixcil.data import (
    DatasetSpec,
    SampleStore,
    SessionError,
    StoreFormatError,
    gen_synthetic,
    load_store,
    make_batches,
    save_store,
    split_sessions,
)


SMALL = DatasetSpec(
    base_classes=4,
    incremental_classes=4,
    sessions=2,
    ways=2,
    shots=3,
    input_dim=5,
    train_per_class=12,
    test_per_class=4,
)


def test_schema_arithmetic_small_grid():
    assert SMALL.total_classes == 8
    assert np.array_equal(SMALL.session_classes(0), [0, 1, 2, 3])
    assert np.array_equal(SMALL.session_classes(1), [4, 5])
    assert np.array_equal(SMALL.session_classes(2), [6, 7])
    with pytest.raises(SessionError):
        SMALL.session_classes(3)


def test_schema_arithmetic_benchmark_shapes():
    # 60 base classes + 8 five-way increments, and 100 + 10 one-way-ish grids
    a = DatasetSpec(60, 40, 8, 5, 5, input_dim=3)
    assert a.total_classes == 100
    assert np.array_equal(a.session_classes(1), np.arange(60, 65))
    assert np.array_equal(a.session_classes(8), np.arange(95, 100))
    b = DatasetSpec(100, 100, 10, 10, 5, input_dim=3)
    assert b.total_classes == 200
    assert np.array_equal(b.session_classes(10), np.arange(190, 200))


def test_schema_rejects_inconsistent_counts():
    with pytest.raises(ValueError, match="ways"):
        DatasetSpec(4, 5, 2, 2, 3, input_dim=5)
    with pytest.raises(ValueError, match="shots"):
        DatasetSpec(4, 4, 2, 2, 30, input_dim=5, train_per_class=10)
    with pytest.raises(ValueError):
        DatasetSpec(0, 4, 2, 2, 3, input_dim=5)


def test_synthetic_generation_is_seed_deterministic():
    a = gen_synthetic(SMALL, seed=1)
    b = gen_synthetic(SMALL, seed=1)
    c = gen_synthetic(SMALL, seed=2)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.features.tobytes() != c.features.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_synthetic_layout_is_class_major_train_then_test():
    store = gen_synthetic(SMALL, seed=0)
    per = SMALL.train_per_class + SMALL.test_per_class
    assert store.features.shape == (SMALL.total_classes * per, SMALL.input_dim)
    for cls in range(SMALL.total_classes):
        block = slice(cls * per, (cls + 1) * per)
        assert np.all(store.labels[block] == cls)
        assert np.all(store.split[block][: SMALL.train_per_class] == 0)
        assert np.all(store.split[block][SMALL.train_per_class :] == 1)


def test_synthetic_separation_moves_class_means():
    near = gen_synthetic(SMALL, seed=3, separation=0.0)
    far = gen_synthetic(SMALL, seed=3, separation=10.0)
    means_near = [near.features[near.labels == c].mean(axis=0) for c in range(4)]
    means_far = [far.features[far.labels == c].mean(axis=0) for c in range(4)]
    assert np.mean([np.linalg.norm(m) for m in means_far]) > np.mean(
        [np.linalg.norm(m) for m in means_near]
    )


def test_store_binary_round_trip_is_exact(tmp_path):
    store = gen_synthetic(SMALL, seed=4)
    path = tmp_path / "store.bin"
    save_store(store, path)
    back = load_store(path)
    assert back.features.tobytes() == store.features.tobytes()
    assert np.array_equal(back.labels, store.labels)
    assert np.array_equal(back.split, store.split)
    assert back.n_classes == store.n_classes


def test_store_csv_round_trip_is_exact(tmp_path):
    store = gen_synthetic(SMALL, seed=5)
    path = tmp_path / "store.csv"
    save_store(store, path)
    header = path.read_text().splitlines()[0]
    assert header == "label,split," + ",".join(f"v{i}" for i in range(SMALL.input_dim))
    back = load_store(path)
    # repr round-trips every float exactly
    assert back.features.tobytes() == store.features.tobytes()
    assert np.array_equal(back.labels, store.labels)
    assert np.array_equal(back.split, store.split)


def test_store_truncation_reports_offset(tmp_path):
    store = gen_synthetic(SMALL, seed=6)
    path = tmp_path / "store.bin"
    save_store(store, path)
    blob = path.read_bytes()
    for cut, field in ((4, "magic"), (20, "header counts"), (len(blob) // 2, "at offset")):
        short = tmp_path / f"cut{cut}.bin"
        short.write_bytes(blob[:cut])
        with pytest.raises(StoreFormatError, match=field):
            load_store(short)
    fat = tmp_path / "fat.bin"
    fat.write_bytes(blob + b"\x01")
    with pytest.raises(StoreFormatError, match="trailing"):
        load_store(fat)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(StoreFormatError, match="magic"):
        load_store(bad)


def test_store_csv_rejects_malformed_rows(tmp_path):
    good = tmp_path / "good.csv"
    save_store(gen_synthetic(SMALL, seed=7), good)
    lines = good.read_text().splitlines()

    bad_header = tmp_path / "h.csv"
    bad_header.write_text("\n".join(["label,flag"] + lines[1:]) + "\n")
    with pytest.raises(StoreFormatError, match="header"):
        load_store(bad_header)

    ragged = tmp_path / "r.csv"
    ragged.write_text("\n".join(lines[:3] + [lines[3] + ",0.5"] + lines[4:]) + "\n")
    with pytest.raises(StoreFormatError, match="line 4"):
        load_store(ragged)

    empty = tmp_path / "e.csv"
    empty.write_text("")
    with pytest.raises(StoreFormatError, match="empty"):
        load_store(empty)


def test_store_validates_labels_and_split_flags():
    with pytest.raises(StoreFormatError, match="label"):
        SampleStore(features=np.ones((2, 3)), labels=[0, 5], split=[0, 1], n_classes=2)
    with pytest.raises(StoreFormatError, match="split"):
        SampleStore(features=np.ones((2, 3)), labels=[0, 0], split=[0, 2], n_classes=1)
    with pytest.raises(StoreFormatError, match="no test rows"):
        SampleStore(features=np.ones((2, 3)), labels=[0, 0], split=[0, 0], n_classes=1)


def test_split_sessions_counts_and_cumulative_pools():
    store = gen_synthetic(SMALL, seed=8)
    sessions = split_sessions(store, SMALL, seed=0)
    assert len(sessions) == SMALL.sessions + 1

    base = sessions[0]
    assert base.train_x.shape[0] == SMALL.base_classes * SMALL.train_per_class
    assert set(np.unique(base.train_y)) == {0, 1, 2, 3}
    assert base.test_x.shape[0] == SMALL.base_classes * SMALL.test_per_class

    for s in (1, 2):
        inc = sessions[s]
        assert inc.train_x.shape[0] == SMALL.ways * SMALL.shots
        assert np.array_equal(np.unique(inc.train_y), SMALL.session_classes(s))
        seen = SMALL.base_classes + s * SMALL.ways
        assert inc.test_x.shape[0] == seen * SMALL.test_per_class
        assert set(np.unique(inc.test_y)) == set(range(seen))


def test_split_sessions_shot_choice_is_seeded_and_from_train_rows():
    store = gen_synthetic(SMALL, seed=9)
    a = split_sessions(store, SMALL, seed=1)
    b = split_sessions(store, SMALL, seed=1)
    c = split_sessions(store, SMALL, seed=2)
    assert np.array_equal(a[1].train_x, b[1].train_x)
    assert not np.array_equal(a[1].train_x, c[1].train_x)
    # every few-shot row must exist verbatim among that class's train rows
    for cls in SMALL.session_classes(1):
        pool = store.features[store.rows(cls=int(cls), split=0)]
        chosen = a[1].train_x[a[1].train_y == cls]
        for row in chosen:
            assert any(np.array_equal(row, p) for p in pool)


def test_split_sessions_rejects_mismatched_store():
    store = gen_synthetic(SMALL, seed=10)
    wrong_classes = DatasetSpec(5, 4, 2, 2, 3, input_dim=5, train_per_class=12, test_per_class=4)
    with pytest.raises(SessionError, match="classes"):
        split_sessions(store, wrong_classes)
    wrong_dim = DatasetSpec(4, 4, 2, 2, 3, input_dim=6, train_per_class=12, test_per_class=4)
    with pytest.raises(SessionError, match="width"):
        split_sessions(store, wrong_dim)


def test_batches_partition_all_rows_exactly_once():
    rng = np.random.default_rng(30)
    x = np.arange(22, dtype=float).reshape(11, 2)
    y = np.arange(11)
    batches = make_batches(x, y, batch_size=4, rng=rng)
    seen = np.concatenate([by for _, by in batches])
    assert sorted(seen.tolist()) == list(range(11))
    assert all(bx.shape[0] >= 2 for bx, _ in batches)
    for bx, by in batches:
        assert np.array_equal(bx[:, 0] // 2, by)  # rows stay aligned with labels


def test_trailing_singleton_merges_into_previous_batch():
    x = np.zeros((7, 2))
    y = np.arange(7)
    batches = make_batches(x, y, batch_size=3, rng=np.random.default_rng(0))
    assert [b[0].shape[0] for b in batches] == [3, 4]


def test_batches_validate_sizes():
    with pytest.raises(ValueError):
        make_batches(np.zeros((4, 2)), np.zeros(4), batch_size=1, rng=np.random.default_rng(0))
    with pytest.raises(SessionError):
        make_batches(np.zeros((1, 2)), np.zeros(1), batch_size=4, rng=np.random.default_rng(0))
