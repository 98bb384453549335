"""MNIST ingestion, label-skewed client partitions and synthetic quadratics."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import streams
from .objectives import LogisticProblem, QuadraticProblem

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Samples with features scaled to ``[0, 1]`` (float32) and integer labels."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        if len(self.labels) < 1 or len(self.features) != len(self.labels):
            raise ValueError("dataset needs N >= 1 samples with matching labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)


def _read(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse(raw: bytes, magic: int, path) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than its header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: file shorter than its header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header < expected:
        raise IdxTruncatedError(f"{path}: {len(raw) - header} data bytes, header promises {expected}")
    return dims, raw[header:header + expected]


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped)."""
    dims, pixels = _parse(_read(images_path), IMAGES_MAGIC, images_path)
    (n_labels,), label_bytes = _parse(_read(labels_path), LABELS_MAGIC, labels_path)
    if dims[0] != n_labels:
        raise IdxCountMismatchError(f"{dims[0]} images but {n_labels} labels")
    features = np.frombuffer(pixels, dtype=np.uint8).reshape(dims[0], -1)
    features = features.astype(np.float32) / np.float32(255.0)
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    return Dataset(features=features, labels=labels, num_classes=10)


def load_mnist(data_dir, split: str = "train") -> Dataset:
    prefix = {"train": "train", "test": "t10k"}[split]
    data_dir = Path(data_dir)
    for suffix in ("", ".gz"):
        images = data_dir / f"{prefix}-images-idx3-ubyte{suffix}"
        labels = data_dir / f"{prefix}-labels-idx1-ubyte{suffix}"
        if images.exists() and labels.exists():
            return load_idx(images, labels)
    raise FileNotFoundError(f"no MNIST {split} files in {data_dir}")


@dataclass(frozen=True)
class PartitionSpec:
    """``m`` clients, ``p`` labels per client; ``balance`` is ``"equal"`` or ``"dirichlet"``."""

    m: int
    p: int
    balance: str = "equal"
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise PartitionError("need at least one client")
        if self.p < 1:
            raise PartitionError("p must be >= 1")
        if self.balance not in ("equal", "dirichlet"):
            raise PartitionError(f"unknown balance mode {self.balance!r}")
        if self.balance == "dirichlet" and self.gamma <= 0:
            raise PartitionError("dirichlet gamma must be positive")


@dataclass(frozen=True)
class ClientPartition:
    indices: tuple[np.ndarray, ...]
    alpha: np.ndarray

    @property
    def m(self) -> int:
        return len(self.indices)

    @staticmethod
    def weights(indices) -> np.ndarray:
        sizes = np.array([len(ix) for ix in indices], dtype=float)
        return sizes / sizes.sum()


def _split_sizes(n: int, weights: np.ndarray) -> np.ndarray:
    """Integer sizes summing to ``n``, each >= 1, proportional to ``weights``."""
    k = len(weights)
    if n < k:
        raise PartitionError(f"cannot split {n} samples into {k} non-empty shards")
    w = weights / weights.sum()
    sizes = np.ones(k, dtype=np.int64)
    extra = (n - k) * w
    base = np.floor(extra).astype(np.int64)
    sizes += base
    remainder = n - sizes.sum()
    # largest remainders, ties broken by index
    order = np.argsort(-(extra - base), kind="stable")
    sizes[order[:remainder]] += 1
    return sizes


def partition_label_based(ds: Dataset, spec: PartitionSpec) -> ClientPartition:
    """Split ``ds`` so that each client sees exactly ``p`` distinct labels.

    Client ``i`` takes labels ``perm[(i*p + j) % C]`` for ``j < p`` under a
    seeded label permutation, and each label group is cut into one shard
    per client holding it.  ``p == C`` is a uniform random split.
    """
    C = ds.num_classes
    if spec.p > C:
        raise PartitionError(f"p={spec.p} exceeds the {C} available labels")
    rng = streams.stream(spec.seed, streams.PARTITION)
    m = spec.m
    if spec.balance == "dirichlet":
        client_w = rng.dirichlet(np.full(m, spec.gamma))
        client_w = np.maximum(client_w, 1e-12)
    else:
        client_w = np.ones(m)

    if spec.p == C:
        order = rng.permutation(len(ds))
        cuts = np.cumsum(_split_sizes(len(ds), client_w))[:-1]
        indices = tuple(np.sort(part) for part in np.split(order, cuts))
    else:
        perm = rng.permutation(C)
        owners = [[] for _ in range(C)]
        for i in range(m):
            for j in range(spec.p):
                owners[perm[(i * spec.p + j) % C]].append(i)
        chunks = [[] for _ in range(m)]
        for label in range(C):
            holders = owners[label]
            if not holders:
                continue
            group = rng.permutation(np.flatnonzero(ds.labels == label))
            if len(group) < len(holders):
                raise PartitionError(
                    f"label {label} has {len(group)} samples for {len(holders)} clients")
            cuts = np.cumsum(_split_sizes(len(group), client_w[holders]))[:-1]
            for owner, shard in zip(holders, np.split(group, cuts)):
                chunks[owner].append(shard)
        indices = tuple(np.sort(np.concatenate(c)) for c in chunks)

    return ClientPartition(indices=indices, alpha=ClientPartition.weights(indices))


def logistic_problem(ds: Dataset, partition: ClientPartition, lam: float = 0.0) -> LogisticProblem:
    order = np.concatenate(partition.indices)
    sizes = [len(ix) for ix in partition.indices]
    return LogisticProblem(
        features=np.ascontiguousarray(ds.features[order]),
        labels=ds.labels[order],
        offsets=np.concatenate([[0], np.cumsum(sizes)]),
        num_classes=ds.num_classes,
        lam=lam,
    )


def synth_quadratic(m: int, d: int, heterogeneity: float, seed: int, *,
                    spread: float = 9.0, sigma: float = 0.0, alpha=None) -> QuadraticProblem:
    """Random SPD quadratics with eigenvalues in ``[1, 1 + heterogeneity*spread]``.

    ``heterogeneity = 0`` gives identical clients (``H_i = I`` and equal
    ``e_i``).
    """
    if d < 1 or m < 1:
        raise ValueError("need m >= 1 and d >= 1")
    rng = streams.stream(seed, streams.INIT, m, d)
    e_common = rng.standard_normal(d)
    H = np.empty((m, d, d))
    e = np.empty((m, d))
    for i in range(m):
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eig = 1.0 + heterogeneity * spread * rng.uniform(size=d)
        Hi = (Q * eig) @ Q.T
        H[i] = 0.5 * (Hi + Hi.T)
        e[i] = e_common + heterogeneity * rng.standard_normal(d)
    alpha = np.full(m, 1.0 / m) if alpha is None else np.asarray(alpha, dtype=float)
    q = QuadraticProblem(H=H, e=e, alpha=alpha, sigma=sigma)
    log.debug("synth_quadratic: max condition number %.3g",
              max(np.linalg.cond(h) for h in H))
    return q
