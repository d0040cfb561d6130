import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladder.data import (
    BatchSampler,
    Dataset,
    IdxError,
    LabeledSplit,
    balanced_subset,
    batches,
    idx_to_matrix,
    load_csv_dataset,
    load_idx_dataset,
    make_split,
    parse_idx,
    save_csv_dataset,
    serialize_idx,
    synth_mixture,
)
from ladder.numerics import make_rng


def test_label_file_header_bytes():
    raw = bytes.fromhex("00000801" "0000000a") + bytes(range(10))
    dims, values = parse_idx(raw)
    assert dims == (10,) and list(values) == list(range(10))
    assert serialize_idx(values) == raw


def test_image_file_flattens():
    imgs = make_rng(0).integers(0, 256, (5, 28, 28), dtype=np.uint8)
    raw = serialize_idx(imgs)
    assert raw[:4] == bytes.fromhex("00000803")
    dims, values = parse_idx(raw)
    m = idx_to_matrix(values)
    assert dims == (5, 28, 28) and m.shape == (5, 784)
    assert m.min() >= 0 and m.max() <= 1 and np.array_equal(m * 255, imgs.reshape(5, -1))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=3), st.integers(0, 1000))
def test_idx_round_trip(shape, seed):
    values = make_rng(seed).integers(0, 256, shape, dtype=np.uint8)
    dims, back = parse_idx(serialize_idx(values))
    assert dims == tuple(shape) and np.array_equal(back, values)


@pytest.mark.parametrize(
    "raw,message",
    [
        (b"\x00\x00", "truncated IDX header"),
        (bytes.fromhex("01000801") + b"\x00" * 4, "bad IDX magic"),
        (bytes.fromhex("00000d01") + struct.pack(">I", 1) + b"\x00" * 4, "unsupported IDX element type"),
        (bytes.fromhex("00000801") + struct.pack(">I", 10) + b"\x00" * 9, "truncated IDX payload"),
        (bytes.fromhex("00000802") + struct.pack(">I", 3), "truncated IDX header"),
        (bytes.fromhex("00000801") + struct.pack(">I", 2) + b"\x00" * 3, "trailing"),
    ],
)
def test_idx_errors_are_distinct(raw, message):
    with pytest.raises(IdxError, match=message):
        parse_idx(raw)


def test_load_idx_dataset(tmp_path):
    imgs = make_rng(1).integers(0, 256, (6, 3, 3), dtype=np.uint8)
    labels = np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8)
    (tmp_path / "i").write_bytes(serialize_idx(imgs))
    (tmp_path / "l").write_bytes(serialize_idx(labels))
    ds = load_idx_dataset(tmp_path / "i", tmp_path / "l", 3)
    assert ds.inputs.shape == (6, 9) and list(ds.labels) == list(labels)
    (tmp_path / "l").write_bytes(serialize_idx(labels[:5]))
    with pytest.raises(IdxError):
        load_idx_dataset(tmp_path / "i", tmp_path / "l", 3)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.array([0]), 1)
    with pytest.raises(ValueError):
        Dataset(np.ones((2, 2)), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        Dataset(np.ones((2, 0)), None, 1)


def test_csv_round_trip(tmp_path):
    ds = synth_mixture(3, 4, 2, [[0, 0], [1, 1], [2, 2]], 0.5, make_rng(0))
    save_csv_dataset(tmp_path / "d.csv", ds)
    back = load_csv_dataset(tmp_path / "d.csv")
    assert back.num_classes == 3 and np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.labels, ds.labels)


def test_balanced_subset_examples():
    labels = np.repeat(np.arange(10), 30)
    idx = balanced_subset(labels, 100, 10, make_rng(0))
    assert Counter(labels[idx]) == {k: 10 for k in range(10)}
    assert len(set(idx)) == 100
    assert Counter(labels[balanced_subset(labels, 10, 10, make_rng(0))]) == {k: 1 for k in range(10)}
    a, b = balanced_subset(labels, 50, 10, make_rng(1)), balanced_subset(labels, 50, 10, make_rng(2))
    assert set(a) != set(b) and Counter(labels[a]) == Counter(labels[b])
    with pytest.raises(ValueError):
        balanced_subset(labels, 15, 10, make_rng(0))
    with pytest.raises(ValueError):
        balanced_subset(labels, 400, 10, make_rng(0))


def fake_mnist_labels(n=60000):
    return Dataset(np.zeros((n, 1)), np.arange(n) % 10, 10)


def test_make_split_mnist_sizes():
    s = make_split(fake_mnist_labels(), 10000, 100, make_rng(0))
    assert (s.labeled_idx.size, s.unlabeled_idx.size, s.validation_idx.size) == (100, 49900, 10000)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 50), st.sampled_from([0, 10, 30]))
def test_make_split_disjoint(seed, val, n_lab):
    ds = Dataset(np.zeros((120, 1)), np.arange(120) % 5, 5)
    s = make_split(ds, val, n_lab, make_rng(seed))
    sets = [set(s.labeled_idx), set(s.unlabeled_idx), set(s.validation_idx)]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert sum(map(len, sets)) == 120
    if n_lab:
        assert set(Counter(ds.labels[s.labeled_idx]).values()) == {n_lab // 5}


def test_make_split_full_labels_and_overflow():
    ds = Dataset(np.zeros((20, 1)), np.arange(20) % 4, 4)
    s = make_split(ds, 0, 20, make_rng(0))
    assert s.unlabeled_idx.size == 0
    with pytest.raises(ValueError):
        make_split(ds, 10, 12, make_rng(0))


def test_synth_mixture_examples():
    ds = synth_mixture(3, 7, 2, [[0, 0], [1, 2], [3, 1]], 0.0, make_rng(0))
    assert np.array_equal(ds.inputs, np.array([[0, 0], [1, 2], [3, 1]], dtype=float)[ds.labels])
    assert Counter(ds.labels) == {0: 7, 1: 7, 2: 7}
    ds = synth_mixture(2, 5, 2, [[0, 0], [1, 1]], [0.0, 1.0], make_rng(0))
    assert np.array_equal(ds.inputs[:, 0], ds.labels.astype(float))


def test_synth_two_blobs_linearly_separable():
    ds = synth_mixture(2, 5000, 2, [[-3, 0], [3, 0]], 0.5, make_rng(4))
    err = np.mean((ds.inputs[:, 0] > 0).astype(int) != ds.labels)
    assert err < 0.01


def split_of(n_unlab, n_lab, n=2000):
    idx = np.arange(n)
    return LabeledSplit(idx[:n_lab], idx[n_lab : n_lab + n_unlab], np.empty(0, dtype=np.int64))


def test_batches_unsupervised_and_counting():
    ds = Dataset(np.zeros((1000, 1)), np.zeros(1000, dtype=int), 1)
    out = batches(split_of(1000, 0, 1000), ds, 0, 100, make_rng(0))
    assert len(out) == 10 and all(not m.any() for _, _, m in out)


def test_batches_cover_unlabeled_once():
    ds = Dataset(np.arange(300, dtype=float)[:, None], np.arange(300) % 3, 3)
    split = split_of(250, 30, 300)
    sampler = BatchSampler(split, ds, 6, 40, make_rng(1), include_labeled=False)
    seen = np.concatenate([u for _, u in sampler.epoch_indices()])
    assert sorted(seen) == sorted(split.unlabeled_idx)
    for x, t, m in sampler.epoch():
        assert m[:6].all() and not m[6:].any() and np.all(t[6:] == -1)
        assert np.array_equal(t[:6], ds.labels[x[:6, 0].astype(int)])


def test_labeled_rows_cycle_with_reshuffle():
    ds = Dataset(np.arange(100, dtype=float)[:, None], np.arange(100) % 2, 2)
    sampler = BatchSampler(split_of(80, 10, 100), ds, 4, 20, make_rng(2))
    drawn = np.concatenate([lab for lab, _ in sampler.epoch_indices() + sampler.epoch_indices()])
    assert Counter(drawn[:10].tolist()) == Counter(range(10))
    assert Counter(drawn[10:20].tolist()) == Counter(range(10))


def test_batch_size_validation():
    ds = Dataset(np.zeros((10, 1)), np.zeros(10, dtype=int), 1)
    with pytest.raises(ValueError):
        BatchSampler(split_of(5, 3, 10), ds, 4, 5, make_rng(0))
