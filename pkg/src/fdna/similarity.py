"""Cosine geometry over item embeddings and exact nearest-neighbor search.

Embedding store file layout (all integers little-endian)::

    offset  size            content
    0       8               magic b"FDNAEMB\\x01"
    8       8               uint64 count
    16      8               uint64 dim
    24      8*count*dim     float64 vectors, row-major
    ...     per item        uint32 byte length + UTF-8 item id, in row order

The vector block starts at byte 24 and can be memory-mapped directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_MAGIC = b"FDNAEMB\x01"
_HEADER = struct.Struct("<8sQQ")


class SimilarityError(ValueError):
    pass


def cosine_distance(f, g) -> float:
    """1 - cos(angle(f, g)); lies in [0, 1] for non-negative vectors."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape:
        raise SimilarityError("vectors differ in length")
    sf = np.max(np.abs(f), initial=0.0)
    sg = np.max(np.abs(g), initial=0.0)
    if sf == 0 or sg == 0:
        raise SimilarityError("cosine distance is undefined for a zero vector")
    # rescale so squared norms cannot under- or overflow
    f, g = f / sf, g / sg
    nf = float(np.dot(f, f))
    ng = float(np.dot(g, g))
    d = 1.0 - float(np.dot(f, g)) / np.sqrt(nf * ng)
    return min(max(d, 0.0), 2.0)


@dataclass
class EmbeddingStore:
    item_ids: list
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.item_ids):
            raise SimilarityError("one vector row per item id required")
        self._pos = {i: n for n, i in enumerate(self.item_ids)}
        if len(self._pos) != len(self.item_ids):
            raise SimilarityError("duplicate item ids in store")

    def __len__(self):
        return len(self.item_ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index(self, item_id) -> int:
        try:
            return self._pos[item_id]
        except KeyError:
            raise SimilarityError(f"item {item_id!r} not in store") from None

    def vector(self, item_id) -> np.ndarray:
        return self.vectors[self.index(item_id)]

    def subset(self, item_ids) -> "EmbeddingStore":
        return EmbeddingStore(list(item_ids), self.vectors[[self.index(i) for i in item_ids]])


def save_store(path, store: EmbeddingStore) -> None:
    n, d = store.vectors.shape
    parts = [_HEADER.pack(_MAGIC, n, d), np.ascontiguousarray(store.vectors, dtype="<f8").tobytes()]
    for item_id in store.item_ids:
        raw = item_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    Path(path).write_bytes(b"".join(parts))


def load_store(path, mmap: bool = False) -> EmbeddingStore:
    data = Path(path).read_bytes()
    magic, n, d = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise SimilarityError(f"{path} is not an embedding store")
    start = _HEADER.size
    if mmap:
        vectors = np.memmap(path, dtype="<f8", mode="r", offset=start, shape=(n, d))
    else:
        vectors = np.frombuffer(data, dtype="<f8", count=n * d, offset=start).reshape(n, d).astype(np.float64)
    pos = start + 8 * n * d
    ids = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids.append(data[pos:pos + length].decode("utf-8"))
        pos += length
    if pos != len(data):
        raise SimilarityError(f"{path}: trailing bytes after id table")
    return EmbeddingStore(ids, vectors)


@dataclass
class NeighborResult:
    query: str
    neighbors: list  # (item id, distance), nearest first


def distances_to(query_vec, vectors, block_size: int = 65536) -> np.ndarray:
    """Cosine distances from one vector to every row, scanned in blocks."""
    q = np.asarray(query_vec, dtype=np.float64)
    nq = float(np.dot(q, q))
    if nq == 0:
        raise SimilarityError("query vector is zero")
    out = np.empty(vectors.shape[0])
    for start in range(0, vectors.shape[0], block_size):
        block = np.asarray(vectors[start:start + block_size], dtype=np.float64)
        dots = np.einsum("ij,j->i", block, q)  # per-row reduction, independent of block shape
        norms = np.einsum("ij,ij->i", block, block)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = 1.0 - dots / np.sqrt(norms * nq)
        d[norms == 0] = np.nan
        out[start:start + block_size] = np.clip(d, 0.0, 2.0)
    return out


def nearest_neighbors(query_id, store: EmbeddingStore, k: int) -> NeighborResult:
    """Exact k nearest items by cosine distance; ties go to the smaller id.

    Items with a zero embedding have no direction and are never returned.
    """
    if k < 1 or k >= len(store):
        raise SimilarityError(f"k must lie in [1, {len(store) - 1}]")
    qi = store.index(query_id)
    d = distances_to(store.vectors[qi], store.vectors)
    valid = ~np.isnan(d)
    valid[qi] = False
    cand = np.flatnonzero(valid)
    ids = np.array(store.item_ids, dtype=object)[cand].astype(str)
    order = np.lexsort((ids, d[cand]))[:k]
    return NeighborResult(query_id, [(str(ids[o]), float(d[cand[o]])) for o in order])


def format_neighbors(results) -> str:
    lines = ["query_id\trank\tneighbor_id\tdistance"]
    for res in results:
        for rank, (nid, dist) in enumerate(res.neighbors, 1):
            lines.append(f"{res.query}\t{rank}\t{nid}\t{dist!r}")
    return "\n".join(lines) + "\n"
