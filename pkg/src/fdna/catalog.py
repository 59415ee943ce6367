"""Item catalog: ingestion, derived price/fabric labels and one-hot encoding.

Six tag families are encoded, always in this order::

    brand, commodity_group, main_color, pattern, price_cluster, fabric_cluster

Each family contributes a one-hot block; a missing tag leaves its block zero.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .artifacts import sha256_bytes

log = logging.getLogger(__name__)

FAMILY_ORDER = (
    "brand",
    "commodity_group",
    "main_color",
    "pattern",
    "price_cluster",
    "fabric_cluster",
)

# catalog record field -> tag family
_RECORD_FIELDS = {
    "brand": "brand",
    "commodity_group": "commodity_group",
    "color": "main_color",
    "pattern": "pattern",
}

DEFAULT_MIN_CLASS_SUPPORT = 50
DEFAULT_PRICE_CLUSTERS = 28
DEFAULT_FABRIC_CLUSTERS = 80


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class TagFamily:
    name: str
    labels: tuple
    offset: int

    def __post_init__(self):
        if len(self.labels) < 1:
            raise CatalogError(f"tag family {self.name!r} has no classes")
        if self.offset < 0:
            raise CatalogError("negative offset")

    @property
    def class_count(self) -> int:
        return len(self.labels)

    def index_of(self, label) -> int | None:
        try:
            return self._lookup[label]
        except KeyError:
            return None

    @property
    def _lookup(self) -> dict:
        # frozen dataclass: cache on the instance dict
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {lab: i for i, lab in enumerate(self.labels)}
            object.__setattr__(self, "_cache", cache)
        return cache


@dataclass
class Item:
    """One catalog article.

    ``tags`` maps a family name to either a label (str) or a class index (int).
    Labels absent from the vocabulary encode as zeros; integer indices are
    range-checked.
    """

    item_id: str
    tags: dict = field(default_factory=dict)
    raw_price: float | None = None
    fiber_composition: dict | None = None

    def __post_init__(self):
        if self.fiber_composition:
            values = np.array(list(self.fiber_composition.values()), dtype=float)
            if np.any(values < 0) or np.any(values > 1):
                raise CatalogError(f"item {self.item_id}: fiber fractions must lie in [0, 1]")
            if abs(values.sum() - 1.0) > 1e-9:
                raise CatalogError(f"item {self.item_id}: fiber fractions sum to {values.sum()!r}")


@dataclass(frozen=True)
class AttributeVocabulary:
    families: tuple
    min_class_support: int = DEFAULT_MIN_CLASS_SUPPORT

    @property
    def length(self) -> int:
        return sum(f.class_count for f in self.families)

    def family(self, name: str) -> TagFamily:
        for fam in self.families:
            if fam.name == name:
                return fam
        raise KeyError(name)

    @classmethod
    def from_counts(cls, counts: Mapping[str, int] | Sequence[int], min_class_support: int = 1):
        """Vocabulary with anonymous labels ``0..n-1`` per family."""
        if not isinstance(counts, Mapping):
            counts = dict(zip(FAMILY_ORDER, counts))
        families = []
        offset = 0
        for name, n in counts.items():
            if n < 1:
                raise CatalogError(f"family {name!r} needs at least one class")
            families.append(TagFamily(name, tuple(str(i) for i in range(n)), offset))
            offset += n
        return cls(tuple(families), min_class_support)

    def to_text(self) -> str:
        lines = ["family\tlabel\tclass_index\toffset"]
        for fam in self.families:
            for i, label in enumerate(fam.labels):
                lines.append(f"{fam.name}\t{label}\t{i}\t{fam.offset}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, min_class_support: int = DEFAULT_MIN_CLASS_SUPPORT):
        rows = [ln.split("\t") for ln in text.splitlines()[1:] if ln]
        grouped: dict[str, list] = {}
        offsets: dict[str, int] = {}
        for name, label, index, offset in rows:
            grouped.setdefault(name, []).append((int(index), label))
            offsets[name] = int(offset)
        families = []
        for name, entries in grouped.items():
            entries.sort()
            families.append(TagFamily(name, tuple(lab for _, lab in entries), offsets[name]))
        return cls(tuple(families), min_class_support)

    def checksum(self) -> str:
        return sha256_bytes(self.to_text().encode("utf-8"))


def build_vocabulary(items: Iterable[Item], min_class_support: int = DEFAULT_MIN_CLASS_SUPPORT,
                     families: Sequence[str] = FAMILY_ORDER) -> AttributeVocabulary:
    """Collect tag classes with at least ``min_class_support`` items.

    Within a family, classes are indexed by descending frequency, then by
    label. Families with no surviving class are omitted from the layout.
    """
    items = list(items)
    if not items:
        raise CatalogError("cannot build a vocabulary from an empty catalog")
    if min_class_support < 1:
        raise CatalogError("min_class_support must be positive")
    counters = {name: Counter() for name in families}
    for item in items:
        for name, label in item.tags.items():
            if name in counters and label is not None:
                counters[name][str(label)] += 1
    result = []
    offset = 0
    for name in families:
        kept = [(lab, n) for lab, n in counters[name].items() if n >= min_class_support]
        dropped = len(counters[name]) - len(kept)
        if dropped:
            log.info("family %s: dropped %d classes below support %d", name, dropped, min_class_support)
        if not kept:
            continue
        kept.sort(key=lambda t: (-t[1], t[0]))
        labels = tuple(lab for lab, _ in kept)
        result.append(TagFamily(name, labels, offset))
        offset += len(labels)
    if not result:
        raise CatalogError("no tag class reaches the minimum support")
    return AttributeVocabulary(tuple(result), min_class_support)


def encode_indices(item: Item, vocab: AttributeVocabulary) -> list[int]:
    """Column positions of the non-zeros of ``item``'s one-hot encoding."""
    cols = []
    for fam in vocab.families:
        tag = item.tags.get(fam.name)
        if tag is None:
            continue
        if isinstance(tag, (int, np.integer)) and not isinstance(tag, bool):
            if not 0 <= tag < fam.class_count:
                raise CatalogError(
                    f"item {item.item_id}: {fam.name} index {tag} outside [0, {fam.class_count})")
            cols.append(fam.offset + int(tag))
        else:
            idx = fam.index_of(str(tag))
            if idx is not None:
                cols.append(fam.offset + idx)
    return cols


def encode_item(item: Item, vocab: AttributeVocabulary) -> sp.csr_matrix:
    """One-hot row vector of width ``vocab.length`` (1 x length CSR)."""
    cols = encode_indices(item, vocab)
    data = np.ones(len(cols))
    return sp.csr_matrix((data, (np.zeros(len(cols), dtype=int), cols)), shape=(1, vocab.length))


def encode_items(items: Sequence[Item], vocab: AttributeVocabulary) -> sp.csr_matrix:
    rows, cols = [], []
    for r, item in enumerate(items):
        c = encode_indices(item, vocab)
        rows.extend([r] * len(c))
        cols.extend(c)
    data = np.ones(len(cols))
    return sp.csr_matrix((data, (rows, cols)), shape=(len(items), vocab.length))


# -- k-means -----------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list
    n_iter: int
    converged: bool

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(X, C):
    # (n, k) squared euclidean distances, fixed reduction order
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def nearest_centroid(X, C) -> np.ndarray:
    """Index of the closest centroid per row; ties go to the lowest index."""
    return np.argmin(_sq_dists(X, C), axis=1)


def _kmeanspp_init(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # remaining points coincide with chosen centers; pick an unused distinct one
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest / total), rng.random(), side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        closest = np.minimum(closest, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers, dtype=float)


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments repeat or after ``max_iter`` iterations. Ties in
    the nearest-centroid step go to the lowest cluster index; an empty
    cluster keeps its previous centroid.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if k < 1:
        raise CatalogError("k must be positive")
    n_distinct = len(np.unique(X, axis=0))
    if k > n_distinct:
        raise CatalogError(f"k={k} exceeds the {n_distinct} distinct points")
    rng = np.random.default_rng(seed)
    C = _kmeanspp_init(X, k, rng)
    labels = nearest_centroid(X, C)
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            members = X[labels == j]
            if len(members):
                C[j] = members.mean(axis=0)
        d = _sq_dists(X, C)
        history.append(float(d[np.arange(len(X)), labels].sum()))
        new_labels = np.argmin(d, axis=1)
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
    return KMeansResult(C, labels, history, it, converged)


def cluster_prices(items: Iterable[Item], k: int = DEFAULT_PRICE_CLUSTERS, seed: int = 0):
    """k-means over log prices.

    Returns ``(assignment, excluded)``: item_id -> cluster index, and the ids
    of items without a positive price.
    """
    ids, logs, excluded = [], [], []
    for item in items:
        if item.raw_price is not None and item.raw_price > 0:
            ids.append(item.item_id)
            logs.append(np.log(item.raw_price))
        else:
            excluded.append(item.item_id)
    if not ids:
        raise CatalogError("no item carries a positive price")
    if excluded:
        log.info("price clustering: %d items without positive price excluded", len(excluded))
    res = kmeans(np.array(logs), k, seed=seed)
    return dict(zip(ids, res.labels.tolist())), excluded


def fiber_space(items: Iterable[Item]) -> list[str]:
    names = set()
    for item in items:
        if item.fiber_composition:
            names.update(item.fiber_composition)
    return sorted(names)


def cluster_fabrics(items: Iterable[Item], k: int = DEFAULT_FABRIC_CLUSTERS, seed: int = 0) -> dict:
    """k-means over fiber-composition vectors; items without one get no label."""
    items = list(items)
    fibers = fiber_space(items)
    col = {name: i for i, name in enumerate(fibers)}
    ids, rows = [], []
    for item in items:
        if not item.fiber_composition:
            continue
        v = np.zeros(len(fibers))
        for name, frac in item.fiber_composition.items():
            v[col[name]] = frac
        ids.append(item.item_id)
        rows.append(v)
    if not ids:
        raise CatalogError("no item carries a fiber composition")
    res = kmeans(np.array(rows), k, seed=seed)
    return dict(zip(ids, res.labels.tolist()))


def assign_derived_labels(items: Sequence[Item], price_k: int, fabric_k: int, seed: int = 0) -> None:
    """Attach price_cluster / fabric_cluster tags in place (labels like ``p07``)."""
    has_price = [it for it in items if it.raw_price is not None and it.raw_price > 0]
    if has_price:
        k = min(price_k, len({it.raw_price for it in has_price}))
        prices, _ = cluster_prices(has_price, k, seed)
        for it in items:
            if it.item_id in prices:
                it.tags["price_cluster"] = f"p{prices[it.item_id]:02d}"
    has_fabric = [it for it in items if it.fiber_composition]
    if has_fabric:
        distinct = len({tuple(sorted(it.fiber_composition.items())) for it in has_fabric})
        fabrics = cluster_fabrics(has_fabric, min(fabric_k, distinct), seed)
        for it in items:
            if it.item_id in fabrics:
                it.tags["fabric_cluster"] = f"f{fabrics[it.item_id]:02d}"


def split_items(items: Sequence, validation_fraction: float = 0.1, seed: int = 0):
    """Uniform random split into (training, validation) lists, order preserved."""
    items = list(items)
    if len(items) < 2:
        raise CatalogError("need at least two items to split")
    if not 0 < validation_fraction < 1:
        raise CatalogError("validation_fraction must lie in (0, 1)")
    n_val = int(round(len(items) * validation_fraction))
    n_val = min(max(n_val, 1), len(items) - 1)
    rng = np.random.default_rng(seed)
    val_pos = set(rng.permutation(len(items))[:n_val].tolist())
    train = [it for i, it in enumerate(items) if i not in val_pos]
    val = [it for i, it in enumerate(items) if i in val_pos]
    return train, val


# -- ingestion ---------------------------------------------------------------

def item_from_record(record: dict) -> Item:
    if "item_id" not in record:
        raise CatalogError(f"record without item_id: {record!r}")
    tags = {}
    for key, family in _RECORD_FIELDS.items():
        value = record.get(key)
        if value is not None and value != "":
            tags[family] = str(value)
    price = record.get("price")
    return Item(
        item_id=str(record["item_id"]),
        tags=tags,
        raw_price=float(price) if price is not None else None,
        fiber_composition=dict(record["fibers"]) if record.get("fibers") else None,
    )


def read_catalog(path) -> list[Item]:
    items = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"{path}:{lineno}: {exc}") from None
            item = item_from_record(record)
            if item.item_id in seen:
                raise CatalogError(f"{path}:{lineno}: duplicate item_id {item.item_id}")
            seen.add(item.item_id)
            items.append(item)
    return items


def item_to_record(item: Item) -> dict:
    record = {"item_id": item.item_id}
    for key, family in _RECORD_FIELDS.items():
        if family in item.tags:
            record[key] = item.tags[family]
    if item.raw_price is not None:
        record["price"] = item.raw_price
    if item.fiber_composition:
        record["fibers"] = item.fiber_composition
    return record


def write_catalog(path, items: Iterable[Item]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item_to_record(item), sort_keys=True) + "\n")


def write_vocabulary(path, vocab: AttributeVocabulary) -> None:
    Path(path).write_text(vocab.to_text(), encoding="utf-8")


def read_vocabulary(path) -> AttributeVocabulary:
    return AttributeVocabulary.from_text(Path(path).read_text(encoding="utf-8"))
