"""Federated datasets: synthetic non-IID regression, label sharding, IDX ingestion.

Dataset file layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"FEDDSET\\0"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header: kind, dim, node_sizes, test_size, target_dtype, meta
    20+H    ...   for each node: features float64 (n_i x dim, row-major), then targets
                  (float64 for regression, int64 for classification);
                  finally the test features and targets in the same encoding
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from localsgda.core import make_rng

DATASET_MAGIC = b"FEDDSET\x00"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SyntheticSpec:
    alpha: float
    n_nodes: int = 100
    dim: int = 60
    samples_per_node: tuple[int, int] = (400, 500)
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.samples_per_node
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if lo < 1 or hi < lo:
            raise ValueError(f"empty sample-count range [{lo}, {hi}]")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")


@dataclass
class FederatedDataset:
    kind: str  # "regression" or "classification"
    features: list[np.ndarray]
    targets: list[np.ndarray]
    test_features: np.ndarray | None = None
    test_targets: np.ndarray | None = None
    indices: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features[0].shape[1]

    def node_sizes(self) -> list[int]:
        return [len(t) for t in self.targets]


def generate_synthetic(spec: SyntheticSpec) -> FederatedDataset:
    """Non-IID linear-regression data.

    For each node: M_i ~ N(0, alpha) (alpha is a variance), a scalar mean
    mu_i ~ N(M_i, 1) shared by all coordinates, features
    x ~ N(mu_i 1, diag(k^-1.2)), a node model W_i ~ N(0, I), b_i ~ N(0, 1) and
    noiseless targets W_i'x + b_i. The last round(test_fraction * n_i) samples
    of every node go to the pooled test set.
    """
    spec.validate()
    rng = make_rng(spec.seed)
    m = spec.dim
    sd = np.arange(1, m + 1, dtype=np.float64) ** -0.6  # sqrt(k^-1.2)
    lo, hi = spec.samples_per_node
    feats, targs, test_f, test_t = [], [], [], []
    means = []
    for _ in range(spec.n_nodes):
        M_i = rng.normal(0.0, np.sqrt(spec.alpha))
        mu_i = rng.normal(M_i, 1.0)
        W = rng.standard_normal(m)
        b = rng.standard_normal()
        n_i = int(rng.integers(lo, hi + 1))
        X = mu_i + rng.standard_normal((n_i, m)) * sd
        y = X @ W + b
        n_test = min(int(round(spec.test_fraction * n_i)), n_i - 1)
        n_train = n_i - n_test
        feats.append(X[:n_train])
        targs.append(y[:n_train])
        test_f.append(X[n_train:])
        test_t.append(y[n_train:])
        means.append(mu_i)
    return FederatedDataset(
        kind="regression",
        features=feats,
        targets=targs,
        test_features=np.concatenate(test_f),
        test_targets=np.concatenate(test_t),
        meta={"generator": "synthetic", "alpha": spec.alpha, "seed": spec.seed, "node_means": means},
    )


def partition_by_label(features, labels, n_nodes: int, classes_per_node: int, seed: int,
                       test_features=None, test_labels=None) -> FederatedDataset:
    """Sort by label, cut into n_nodes * classes_per_node contiguous shards, deal shards out at random."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if n_nodes < 1 or classes_per_node < 1:
        raise ValueError("n_nodes and classes_per_node must be >= 1")
    if len(np.unique(labels)) < classes_per_node:
        raise ValueError("fewer distinct labels than classes_per_node")
    n_shards = n_nodes * classes_per_node
    if len(labels) < n_shards:
        raise ValueError(f"{len(labels)} samples cannot fill {n_shards} shards")
    order = np.argsort(labels, kind="stable")
    shards = np.array_split(order, n_shards)
    perm = make_rng(seed).permutation(n_shards)
    idx = [
        np.sort(np.concatenate([shards[s] for s in perm[k * classes_per_node:(k + 1) * classes_per_node]]))
        for k in range(n_nodes)
    ]
    return FederatedDataset(
        kind="classification",
        features=[features[i] for i in idx],
        targets=[labels[i].astype(np.int64) for i in idx],
        test_features=None if test_features is None else np.asarray(test_features, dtype=np.float64),
        test_targets=None if test_labels is None else np.asarray(test_labels).astype(np.int64),
        indices=idx,
        meta={"generator": "label_shards", "classes_per_node": classes_per_node, "seed": seed},
    )


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------

class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{what}: file shorter than the magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{what}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    count = int(np.prod(dims))
    if len(raw) < head + count:
        raise IdxTruncatedError(f"{what}: expected {count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair (optionally gzipped); pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return feats, labels.astype(np.int64)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array as IDX (used for fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * array.ndim, *array.shape))
        fh.write(array.tobytes())


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_dataset(ds: FederatedDataset, path) -> None:
    cls = ds.kind == "classification"
    tdtype = "<i8" if cls else "<f8"
    test_n = 0 if ds.test_features is None else len(ds.test_features)
    header = {
        "kind": ds.kind,
        "dim": ds.dim,
        "node_sizes": ds.node_sizes(),
        "test_size": test_n,
        "target_dtype": tdtype,
        "meta": _json_safe(ds.meta),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IQ", DATASET_VERSION, len(hbytes)))
        fh.write(hbytes)
        for X, y in zip(ds.features, ds.targets):
            fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(y, dtype=tdtype).tobytes())
        if test_n:
            fh.write(np.ascontiguousarray(ds.test_features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.test_targets, dtype=tdtype).tobytes())


def load_dataset(path) -> FederatedDataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    pos = 20 + hlen
    dim, tdtype = header["dim"], header["target_dtype"]

    def take(n, dtype, shape):
        nonlocal pos
        nbytes = n * np.dtype(dtype).itemsize
        if pos + nbytes > len(raw):
            raise ValueError(f"{path}: truncated dataset file")
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos).reshape(shape)
        pos += nbytes
        return arr.astype(np.dtype(dtype).newbyteorder("="))

    feats, targs = [], []
    for n in header["node_sizes"]:
        feats.append(take(n * dim, "<f8", (n, dim)))
        targs.append(take(n, tdtype, (n,)))
    tn = header["test_size"]
    tf = take(tn * dim, "<f8", (tn, dim)) if tn else None
    tt = take(tn, tdtype, (tn,)) if tn else None
    return FederatedDataset(header["kind"], feats, targs, tf, tt, meta=header.get("meta", {}))
