import csv
import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from workbench.data import (Dataset, IdxFormatError, NoiseSpec, epoch_batches, export_csv, gen_two_moons,
                            inject_noise, load_idx, write_idx)


def _idx_images(images):
    n, r, c = images.shape
    return struct.pack(">IIII", 2051, n, r, c) + images.astype(np.uint8).tobytes()


def _idx_labels(labels):
    return struct.pack(">II", 2049, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()


@pytest.fixture
def tiny_idx(tmp_path):
    imgs = np.array([[[0, 255], [128, 1]], [[255, 255], [0, 0]]], dtype=np.uint8)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    ip.write_bytes(_idx_images(imgs))
    lp.write_bytes(_idx_labels([3, 7]))
    return ip, lp, imgs


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def test_load_idx_tiny(tiny_idx):
    ip, lp, imgs = tiny_idx
    ds = load_idx(ip, lp, n_classes=10)
    assert ds.n == 2 and ds.dim == 4 and ds.n_classes == 10
    assert load_idx(ip, lp).n_classes == 8  # inferred from the largest label
    assert ds.features[0, 1] == 1.0 and ds.features[0, 0] == 0.0
    assert np.allclose(ds.features, imgs.reshape(2, 4) / 255.0)
    assert list(ds.given_labels) == [3, 7] and list(ds.true_labels) == [3, 7]


def test_load_idx_gzip(tmp_path, tiny_idx):
    ip, lp, _ = tiny_idx
    gi, gl = tmp_path / "img.gz", tmp_path / "lab.gz"
    gi.write_bytes(gzip.compress(ip.read_bytes()))
    gl.write_bytes(gzip.compress(lp.read_bytes()))
    assert np.array_equal(load_idx(gi, gl).features, load_idx(ip, lp).features)


def test_load_idx_count_mismatch(tmp_path, tiny_idx):
    ip, _, _ = tiny_idx
    lp = tmp_path / "lab3"
    lp.write_bytes(_idx_labels([1, 2, 3]))
    with pytest.raises(IdxFormatError):
        load_idx(ip, lp)


def test_load_idx_bad_magic(tmp_path, tiny_idx):
    _, lp, _ = tiny_idx
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">IIII", 2049, 2, 2, 2) + bytes(8))
    with pytest.raises(IdxFormatError, match="offset 0"):
        load_idx(bad, lp)


def test_load_idx_truncated(tmp_path, tiny_idx):
    ip, lp, _ = tiny_idx
    short = tmp_path / "short"
    short.write_bytes(ip.read_bytes()[:-3])
    with pytest.raises(IdxFormatError, match="offset"):
        load_idx(short, lp)


def test_write_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    labs = rng.integers(0, 10, size=5)
    write_idx(imgs, labs, tmp_path / "i", tmp_path / "l")
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert np.array_equal(np.rint(ds.features * 255).astype(np.uint8), imgs.reshape(5, 12))
    assert np.array_equal(ds.given_labels, labs)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]), np.array([0]), np.array([0]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0]), np.array([0, 1]), 2)


def test_true_labels_read_only():
    ds = gen_two_moons(10, 0.0)
    with pytest.raises(ValueError):
        ds.true_labels[0] = 1


# ---------------------------------------------------------------------------
# two moons
# ---------------------------------------------------------------------------

def test_two_moons_noise_free_geometry():
    ds = gen_two_moons(4, 0.0)
    assert list(ds.true_labels) == [0, 0, 1, 1]
    upper, lower = ds.features[:2], ds.features[2:]
    assert np.allclose(np.hypot(upper[:, 0], upper[:, 1]), 1.0)
    assert np.allclose(np.hypot(lower[:, 0] - 1.0, lower[:, 1] - 0.5), 1.0)


def test_two_moons_deterministic():
    a, b = gen_two_moons(1000, 0.1, seed=5), gen_two_moons(1000, 0.1, seed=5)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.true_labels, b.true_labels)


def test_two_moons_odd_n():
    with pytest.raises(ValueError):
        gen_two_moons(5)


def _nearest_centroid_acc(x, y, per_moon):
    cents, labs = [], []
    for k in (0, 1):
        xk = x[y == k]
        for part in np.array_split(xk[np.argsort(xk[:, 0])], per_moon):
            cents.append(part.mean(axis=0))
            labs.append(k)
    d = ((x[:, None, :] - np.array(cents)[None]) ** 2).sum(-1)
    return (np.array(labs)[d.argmin(1)] == y).mean()


def test_two_moons_nearest_centroid_oracle():
    for seed in range(3):
        ds = gen_two_moons(1000, 0.1, seed=seed)
        assert _nearest_centroid_acc(ds.features, ds.true_labels, per_moon=2) > 0.85
        # a single centroid per class is only a linear cut through the tips
        assert 0.7 < _nearest_centroid_acc(ds.features, ds.true_labels, per_moon=1) < 0.85


def test_export_csv(tmp_path):
    ds = inject_noise(gen_two_moons(6, 0.05, seed=1), NoiseSpec("symmetric", 0.5, seed=2))
    path = tmp_path / "m.csv"
    export_csv(ds, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["x0", "x1", "given", "true"]
    assert len(rows) == 7
    assert [int(r[2]) for r in rows[1:]] == list(ds.given_labels)
    assert [int(r[3]) for r in rows[1:]] == list(ds.true_labels)
    assert np.allclose([[float(v) for v in r[:2]] for r in rows[1:]], ds.features, rtol=0, atol=1e-6)


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

def _labels_dataset(n, c, seed=0):
    y = np.random.default_rng(seed).integers(0, c, size=n)
    return Dataset(np.zeros((n, 1)), y, y.copy(), c)


def test_noise_ratio_zero_is_identity():
    ds = _labels_dataset(500, 10)
    out = inject_noise(ds, NoiseSpec("symmetric", 0.0, seed=3))
    assert np.array_equal(out.given_labels, ds.true_labels)


def test_noise_ratio_one_binary_flips_everything():
    ds = _labels_dataset(200, 2)
    out = inject_noise(ds, NoiseSpec("symmetric", 1.0, seed=3))
    assert (out.given_labels != out.true_labels).all()


def test_symmetric_transition_matrix():
    ds = _labels_dataset(10000, 10, seed=1)
    out = inject_noise(ds, NoiseSpec("symmetric", 0.4, seed=7))
    flipped = out.given_labels != out.true_labels
    assert abs(flipped.mean() - 0.4) <= 0.02
    # each of the 9 wrong targets gets 1/9 of every class's flips
    for k in range(10):
        src = (out.true_labels == k) & flipped
        shares = np.bincount(out.given_labels[src], minlength=10) / src.sum()
        others = np.delete(shares, k)
        assert np.all(np.abs(others - 1 / 9) <= 0.02 + 0.03)  # ~1000 rows per class
    dests = np.bincount((out.given_labels - out.true_labels)[flipped] % 10, minlength=10)[1:] / flipped.sum()
    assert np.all(np.abs(dests - 1 / 9) <= 0.02)


def test_symmetric_inclusive_variant_allows_self():
    ds = _labels_dataset(4000, 2)
    out = inject_noise(ds, NoiseSpec("symmetric", 1.0, seed=1, include_self=True))
    assert abs((out.given_labels != out.true_labels).mean() - 0.5) < 0.05


def test_asymmetric_only_along_edges():
    ds = _labels_dataset(5000, 10, seed=2)
    out = inject_noise(ds, NoiseSpec("asymmetric", 0.4, seed=1))
    edges = {(2, 7), (3, 8), (5, 6), (7, 1)}
    moved = out.given_labels != out.true_labels
    assert set(zip(out.true_labels[moved].tolist(), out.given_labels[moved].tolist())) <= edges
    for src in (2, 3, 5, 7):
        sel = out.true_labels == src
        assert abs(moved[sel].mean() - 0.4) < 0.06


def test_noise_spec_errors():
    ds = _labels_dataset(10, 3)
    with pytest.raises(ValueError):
        inject_noise(ds, NoiseSpec("symmetric", 1.5))
    with pytest.raises(ValueError):
        inject_noise(ds, NoiseSpec("asymmetric", 0.2))
    with pytest.raises(ValueError):
        inject_noise(ds, NoiseSpec("asymmetric", 0.2, class_map={1: 1}))


@settings(max_examples=25, deadline=None)
@given(ratio=st.floats(0, 1), seed=st.integers(0, 2 ** 32 - 1), c=st.integers(2, 10))
def test_noise_preserves_features_and_truth(ratio, seed, c):
    ds = _labels_dataset(1000, c, seed=seed % 97)
    before_f, before_t = ds.features.copy(), ds.true_labels.copy()
    out = inject_noise(ds, NoiseSpec("symmetric", ratio, seed=seed))
    assert np.array_equal(out.features, before_f) and np.array_equal(out.true_labels, before_t)
    assert np.array_equal(ds.given_labels, before_t)
    rate = (out.given_labels != out.true_labels).mean()
    sd = np.sqrt(ratio * (1 - ratio) / 1000)
    assert abs(rate - ratio) <= 3 * sd + 1e-9
    again = inject_noise(ds, NoiseSpec("symmetric", ratio, seed=seed))
    assert np.array_equal(out.given_labels, again.given_labels)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def test_epoch_batches_remainder():
    assert [len(b) for b in epoch_batches(_labels_dataset(5, 2), 2, 0)] == [2, 2, 1]


def test_epoch_batches_deterministic_and_fresh():
    ds = _labels_dataset(50, 2)
    a = [b.indices.tolist() for b in epoch_batches(ds, 8, 3)]
    b = [b.indices.tolist() for b in epoch_batches(ds, 8, 3)]
    c = [b.indices.tolist() for b in epoch_batches(ds, 8, 4)]
    assert a == b and a != c


def test_epoch_batches_carry_rows():
    ds = inject_noise(gen_two_moons(40, 0.1), NoiseSpec("symmetric", 0.3, seed=0))
    for mb in epoch_batches(ds, 7, 1):
        assert np.array_equal(mb.features, ds.features[mb.indices])
        assert np.array_equal(mb.given_labels, ds.given_labels[mb.indices])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3000), bs=st.integers(1, 300), seed=st.integers(0, 10 ** 6))
def test_epoch_batches_partition(n, bs, seed):
    batches = epoch_batches(_labels_dataset(n, 2), bs, seed)
    allidx = np.concatenate([b.indices for b in batches])
    assert len(batches) == -(-n // bs)
    assert np.array_equal(np.sort(allidx), np.arange(n))


def test_epoch_batches_bad_size():
    with pytest.raises(ValueError):
        epoch_batches(_labels_dataset(3, 2), 0, 0)
