"""Nearest-neighbor caption memory.

An immutable datastore of decoder latents paired with the token that
followed them in the training captions.  Queries run an exact full-scan
squared-Euclidean search (ties broken by lower entry index); the retrieved
values are folded into a distribution over the vocabulary and linearly
interpolated with the model's own next-token distribution.

On disk: magic ``NNDS``, u32 version, u32 key width, u64 entry count, then
keys as float32 row-major and values as u32, all little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .params import FormatError

DATASTORE_MAGIC = b"NNDS"
DATASTORE_VERSION = 1


@dataclass
class Datastore:
    keys: np.ndarray    # (count, d_model) float32
    values: np.ndarray  # (count,) uint32 token ids

    def __post_init__(self):
        if self.keys.ndim != 2:
            raise ValueError(f"datastore keys must be 2-d, got {self.keys.shape}")
        if len(self.keys) != len(self.values):
            raise ValueError(
                f"{len(self.keys)} keys vs {len(self.values)} values")

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def d_model(self) -> int:
        return self.keys.shape[1]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(DATASTORE_MAGIC)
            fh.write(struct.pack("<I", DATASTORE_VERSION))
            fh.write(struct.pack("<I", self.d_model))
            fh.write(struct.pack("<Q", self.count))
            fh.write(np.ascontiguousarray(self.keys, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Datastore":
        blob = Path(path).read_bytes()
        if blob[:4] != DATASTORE_MAGIC:
            raise FormatError(
                f"{path}: bad magic {blob[:4]!r}, expected {DATASTORE_MAGIC!r}")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != DATASTORE_VERSION:
            raise FormatError(f"{path}: unsupported datastore version {version}")
        (d_model,) = struct.unpack_from("<I", blob, 8)
        (count,) = struct.unpack_from("<Q", blob, 12)
        expected = 20 + 4 * count * d_model + 4 * count
        if len(blob) != expected:
            raise FormatError(
                f"{path}: size {len(blob)} does not match header "
                f"(count={count}, d={d_model})")
        keys = np.frombuffer(blob, dtype="<f4", count=count * d_model,
                             offset=20).reshape(count, d_model).copy()
        values = np.frombuffer(blob, dtype="<u4", count=count,
                               offset=20 + 4 * count * d_model).copy()
        return cls(keys=keys, values=values)


@dataclass
class NeighborSet:
    indices: np.ndarray    # (k,) entry indices into the datastore
    keys: np.ndarray       # (k, d_model)
    values: np.ndarray     # (k,) token ids
    distances: np.ndarray  # (k,) squared distances, ascending


def knn_query(ds: Datastore, z: np.ndarray, n_neighbors: int) -> NeighborSet:
    """Exact nearest neighbors of ``z`` by squared Euclidean distance.

    Returns min(n_neighbors, count) entries sorted by (distance, index),
    so ties always resolve to the lower entry index.
    """
    if n_neighbors < 1:
        raise ValueError(f"n_neighbors must be >= 1, got {n_neighbors}")
    if ds.count == 0:
        raise ValueError("knn_query: datastore is empty")
    q = np.asarray(z, dtype=ds.keys.dtype).reshape(-1)
    if q.shape[0] != ds.d_model:
        raise ValueError(f"query width {q.shape[0]} vs datastore {ds.d_model}")
    diff = ds.keys - q
    dist = np.einsum("ij,ij->i", diff, diff)
    k = min(n_neighbors, ds.count)
    # Stable sort keeps equal distances in index order, which is the
    # tie-break contract (argpartition would not honor it at the boundary).
    order = np.argsort(dist, kind="stable")[:k]
    return NeighborSet(indices=order, keys=ds.keys[order],
                       values=ds.values[order], distances=dist[order])


def aggregate(ns: NeighborSet, vocab_size: int) -> np.ndarray:
    """Fold a neighbor set into a vocabulary distribution.

    Weights are softmax over negated distances (nearer neighbors weigh
    more); each neighbor's weight lands on its stored token id and the
    total is renormalized to sum to one.
    """
    if len(ns.values) == 0:
        raise ValueError("aggregate: empty neighbor set")
    neg = -ns.distances.astype(np.float64)
    neg -= neg.max()
    w = np.exp(neg)
    w /= w.sum()
    p = np.zeros(vocab_size, dtype=np.float64)
    np.add.at(p, ns.values.astype(np.int64), w)
    return p / p.sum()


def interpolate(p_knn: np.ndarray, p_model: np.ndarray,
                knn_weight: float) -> np.ndarray:
    """Convex combination of the retrieval and model distributions."""
    if not 0.0 <= knn_weight <= 1.0:
        raise ValueError(f"knn_weight must lie in [0, 1], got {knn_weight}")
    if p_knn.shape != p_model.shape:
        raise ValueError(f"shape mismatch {p_knn.shape} vs {p_model.shape}")
    return knn_weight * p_knn + (1.0 - knn_weight) * p_model
