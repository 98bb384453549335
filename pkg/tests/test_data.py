import gzip
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acpc_ota.data import (ClientPartition, Dataset, IdxCountMismatchError, IdxMagicError,
                           IdxTruncatedError, PartitionError, PartitionSpec, load_idx, load_mnist,
                           logistic_problem, partition_label_based, synth_quadratic)
from acpc_ota.objectives import quadratic_optimum


def write_idx(path, magic, dims, payload: bytes):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{len(dims)}I", *dims))
        fh.write(payload)


@pytest.fixture
def idx_pair(tmp_path):
    r = np.random.default_rng(0)
    pixels = r.integers(0, 256, (5, 3, 3), dtype=np.uint8)
    labels = np.array([0, 9, 3, 3, 1], dtype=np.uint8)
    img, lab = tmp_path / "img", tmp_path / "lab"
    write_idx(img, 0x803, (5, 3, 3), pixels.tobytes())
    write_idx(lab, 0x801, (5,), labels.tobytes())
    return img, lab, pixels, labels


def synthetic_dataset(n_per_class=30, classes=10, seed=0):
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per_class)
    r.shuffle(labels)
    return Dataset(features=r.random((len(labels), 4)).astype(np.float32), labels=labels,
                   num_classes=classes)


def test_load_idx_roundtrip(idx_pair):
    img, lab, pixels, labels = idx_pair
    ds = load_idx(img, lab)
    assert ds.features.shape == (5, 9)
    np.testing.assert_array_equal(ds.labels, labels)
    np.testing.assert_allclose(ds.features, pixels.reshape(5, 9) / 255.0, rtol=1e-6)
    assert ds.features.min() >= 0 and ds.features.max() <= 1


def test_load_idx_gzip(tmp_path, idx_pair):
    img, lab, _, labels = idx_pair
    for p in (img, lab):
        with open(p, "rb") as src, gzip.open(str(p) + ".gz", "wb") as dst:
            dst.write(src.read())
    ds = load_idx(str(img) + ".gz", str(lab) + ".gz")
    np.testing.assert_array_equal(ds.labels, labels)


def test_truncated_images(tmp_path, idx_pair):
    img, lab, pixels, _ = idx_pair
    write_idx(img, 0x803, (5, 3, 3), pixels.tobytes()[:-1])
    with pytest.raises(IdxTruncatedError):
        load_idx(img, lab)


def test_truncated_header(tmp_path, idx_pair):
    _, lab, _, _ = idx_pair
    short = tmp_path / "short"
    short.write_bytes(b"\x00\x00\x08\x03\x00\x00")
    with pytest.raises(IdxTruncatedError):
        load_idx(short, lab)


def test_labels_with_image_magic(tmp_path, idx_pair):
    img, lab, _, labels = idx_pair
    write_idx(lab, 0x803, (5,), labels.tobytes())
    with pytest.raises(IdxMagicError):
        load_idx(img, lab)


def test_count_mismatch(tmp_path, idx_pair):
    img, lab, _, labels = idx_pair
    write_idx(lab, 0x801, (4,), labels[:4].tobytes())
    with pytest.raises(IdxCountMismatchError):
        load_idx(img, lab)


def test_dataset_label_range():
    with pytest.raises(ValueError):
        Dataset(features=np.zeros((2, 1), np.float32), labels=np.array([0, 10]))


def test_iid_split_is_balanced():
    ds = synthetic_dataset(n_per_class=100)
    part = partition_label_based(ds, PartitionSpec(m=10, p=10, seed=1))
    assert np.all(np.abs(part.alpha - 0.1) <= 1 / len(ds))
    for ix in part.indices:
        assert len(set(ds.labels[ix])) == 10


@pytest.mark.parametrize("p", [1, 2, 3, 5])
def test_each_client_sees_exactly_p_labels(p):
    ds = synthetic_dataset()
    part = partition_label_based(ds, PartitionSpec(m=10, p=p, seed=3))
    for ix in part.indices:
        assert len(set(ds.labels[ix])) == p


def test_partition_errors():
    ds = synthetic_dataset(n_per_class=2)
    with pytest.raises(PartitionError):
        partition_label_based(ds, PartitionSpec(m=10, p=11))
    with pytest.raises(PartitionError):
        partition_label_based(ds, PartitionSpec(m=30, p=1))


def test_partition_deterministic():
    ds = synthetic_dataset()
    a = partition_label_based(ds, PartitionSpec(m=7, p=3, seed=9))
    b = partition_label_based(ds, PartitionSpec(m=7, p=3, seed=9))
    for x, y in zip(a.indices, b.indices):
        np.testing.assert_array_equal(x, y)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 12), p=st.integers(1, 10), seed=st.integers(0, 2**32 - 1),
       dirichlet=st.booleans())
def test_partition_invariants(m, p, seed, dirichlet):
    ds = synthetic_dataset(n_per_class=40)
    spec = PartitionSpec(m=m, p=p, balance="dirichlet" if dirichlet else "equal", gamma=0.5,
                         seed=seed)
    part = partition_label_based(ds, spec)
    flat = np.concatenate(part.indices)
    # disjoint, no duplication
    assert len(flat) == len(set(flat.tolist()))
    if p == 10 or m * p >= 10:
        # every label group has an owner, so the union is the whole dataset
        assert sorted(flat.tolist()) == list(range(len(ds)))
    assert all(len(ix) >= 1 for ix in part.indices)
    np.testing.assert_array_equal(part.alpha, ClientPartition.weights(part.indices))
    assert abs(part.alpha.sum() - 1.0) <= 1e-12


def test_dirichlet_gives_unequal_weights():
    ds = synthetic_dataset(n_per_class=50)
    part = partition_label_based(ds, PartitionSpec(m=5, p=10, balance="dirichlet", gamma=1.0, seed=2))
    assert np.ptp(part.alpha) > 1e-6


def test_logistic_problem_uses_partition_weights():
    ds = synthetic_dataset()
    part = partition_label_based(ds, PartitionSpec(m=4, p=10, balance="dirichlet", seed=5))
    prob = logistic_problem(ds, part, lam=0.1)
    np.testing.assert_allclose(prob.alpha, part.alpha, rtol=0, atol=1e-15)
    X0, y0 = prob.client_data(0)
    np.testing.assert_array_equal(y0, ds.labels[part.indices[0]])


def test_synth_homogeneous_optimum_matches_local():
    q = synth_quadratic(3, 4, 0.0, seed=1)
    x_star = quadratic_optimum(q)
    for c in q.local_optima:
        np.testing.assert_allclose(x_star, c, atol=1e-12)


def test_synth_is_spd_for_many_seeds():
    for seed in range(100):
        q = synth_quadratic(2, 3, 1.0, seed=seed)
        for H in q.H:
            np.linalg.cholesky(H)
            np.testing.assert_array_equal(H, H.T)


def test_synth_reproducible():
    a, b = synth_quadratic(2, 2, 1.0, seed=3), synth_quadratic(2, 2, 1.0, seed=3)
    np.testing.assert_array_equal(a.H, b.H)
    np.testing.assert_array_equal(a.e, b.e)


def test_synth_eigenvalue_range():
    q = synth_quadratic(4, 5, 0.5, seed=0, spread=4.0)
    eig = np.concatenate([np.linalg.eigvalsh(H) for H in q.H])
    assert eig.min() >= 1 - 1e-12 and eig.max() <= 3 + 1e-12


def test_real_mnist_headers(mnist_dir):
    train, test = load_mnist(mnist_dir, "train"), load_mnist(mnist_dir, "test")
    assert train.features.shape == (60000, 784)
    assert test.features.shape == (10000, 784)
    assert train.features.max() <= 1.0 and train.features.min() >= 0.0


def test_real_mnist_pathological_split(mnist_dir):
    train = load_mnist(mnist_dir, "train")
    part = partition_label_based(train, PartitionSpec(m=10, p=1, seed=0))
    owners = Counter(int(train.labels[ix][0]) for ix in part.indices)
    assert sorted(owners) == list(range(10))
    for ix in part.indices:
        assert len(np.unique(train.labels[ix])) == 1
