"""Boolean item x customer purchase matrix and its train/validation quadrants."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

QUADRANTS = ("tt", "vt", "tv", "vv")


class PurchaseError(ValueError):
    pass


@dataclass
class PurchaseMatrix:
    """Rows are items, columns customers; stored item-major (CSR)."""

    items: list
    customers: list
    matrix: sp.csr_matrix
    load_stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix, dtype=np.float64)
        self.matrix.sum_duplicates()
        self.matrix.data[:] = 1.0
        self.matrix.eliminate_zeros()
        if self.matrix.shape != (len(self.items), len(self.customers)):
            raise PurchaseError("matrix shape does not match id lists")

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    @property
    def shape(self):
        return self.matrix.shape

    def density(self) -> float:
        n, k = self.shape
        return self.nnz / (n * k) if n and k else 0.0

    def customer_counts(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=0)).ravel().astype(np.int64)

    def item_counts(self) -> np.ndarray:
        return np.diff(self.matrix.indptr).astype(np.int64)

    def entries(self) -> set:
        coo = self.matrix.tocoo()
        return set(zip(coo.row.tolist(), coo.col.tolist()))


def load_purchases(records: Iterable[Sequence], item_order: Sequence, customer_order: Sequence) -> PurchaseMatrix:
    """Build the matrix from ``(customer_id, item_id)`` records.

    Repeated pairs collapse to one entry; ``load_stats`` reports record,
    entry and duplicate counts.
    """
    item_pos = {str(i): n for n, i in enumerate(item_order)}
    cust_pos = {str(c): n for n, c in enumerate(customer_order)}
    if len(item_pos) != len(item_order) or len(cust_pos) != len(customer_order):
        raise PurchaseError("duplicate ids in item or customer order")
    rows, cols = [], []
    n_records = 0
    for rec in records:
        n_records += 1
        cust, item = str(rec[0]), str(rec[1])
        if cust not in cust_pos:
            raise PurchaseError(f"record {n_records} ({cust},{item}): unknown customer {cust!r}")
        if item not in item_pos:
            raise PurchaseError(f"record {n_records} ({cust},{item}): unknown item {item!r}")
        rows.append(item_pos[item])
        cols.append(cust_pos[cust])
    mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(item_pos), len(cust_pos)))
    pm = PurchaseMatrix(list(map(str, item_order)), list(map(str, customer_order)), mat)
    pm.load_stats = {"records": n_records, "entries": pm.nnz, "duplicates": n_records - pm.nnz}
    if pm.load_stats["duplicates"]:
        log.info("collapsed %d repeated purchases", pm.load_stats["duplicates"])
    return pm


def read_purchase_records(path):
    """Yield ``(customer_id, item_id)`` from a ``customer_id,item_id`` file."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise PurchaseError(f"{path}:{lineno}: expected 'customer_id,item_id'")
            yield parts[0].strip(), parts[1].strip()


def write_purchases(path, matrix: PurchaseMatrix) -> None:
    coo = matrix.matrix.tocoo()
    order = np.lexsort((coo.row, coo.col))
    with open(path, "w", encoding="utf-8") as fh:
        for k in order:
            fh.write(f"{matrix.customers[coo.col[k]]},{matrix.items[coo.row[k]]}\n")


def customers_in(path) -> list:
    """Customer ids in order of first appearance in a purchases file."""
    seen = {}
    for cust, _ in read_purchase_records(path):
        seen.setdefault(cust, None)
    return list(seen)


@dataclass
class QuadrantSplit:
    item_train: np.ndarray
    item_val: np.ndarray
    customer_train: np.ndarray
    customer_val: np.ndarray

    def items_of(self, side: str) -> np.ndarray:
        return {"t": self.item_train, "v": self.item_val}[side]

    def customers_of(self, side: str) -> np.ndarray:
        return {"t": self.customer_train, "v": self.customer_val}[side]


@dataclass
class Quadrant:
    name: str
    items: np.ndarray
    customers: np.ndarray
    matrix: sp.csr_matrix

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    def density(self) -> float:
        n, k = self.matrix.shape
        return self.nnz / (n * k) if n and k else 0.0


def item_split_from_ids(matrix: PurchaseMatrix, train_ids, val_ids):
    pos = {i: n for n, i in enumerate(matrix.items)}
    return (np.sort([pos[i] for i in train_ids]).astype(np.int64),
            np.sort([pos[i] for i in val_ids]).astype(np.int64))


def _balance_swaps(counts, strata, in_val, n_val, max_swaps):
    """Greedy within-stratum swaps pulling the validation mean onto the overall mean."""
    target = n_val * counts.mean()
    excess = counts[in_val].sum() - target
    for _ in range(max_swaps):
        best = (abs(excess), None)
        for stratum in strata:
            v = stratum[in_val[stratum]]
            t = stratum[~in_val[stratum]]
            if not len(v) or not len(t):
                continue
            # swapping v out and t in changes the validation sum by c_t - c_v
            gain = counts[t][None, :] - counts[v][:, None]
            after = np.abs(excess + gain)
            k = int(np.argmin(after))
            if after.flat[k] < best[0]:
                best = (after.flat[k], (v[k // len(t)], t[k % len(t)]))
        if best[1] is None:
            break
        out, into = best[1]
        in_val[out], in_val[into] = False, True
        excess += counts[into] - counts[out]
        if excess == 0:
            break
    return in_val


def stratified_customer_split(counts: np.ndarray, validation_fraction: float, seed: int,
                              balance: bool = True):
    """Pick validation customers so both sets share the count distribution.

    Customers are sorted by purchase count (random tie order) and cut into
    consecutive strata; every stratum contributes its cumulative share of
    validation customers, chosen uniformly inside the stratum. With
    ``balance``, greedy swaps inside strata then move the validation mean
    onto the overall mean, which matters for heavy-tailed counts.
    """
    counts = np.asarray(counts)
    n = len(counts)
    rng = np.random.default_rng(seed)
    order = np.lexsort((rng.permutation(n), counts))
    frac = validation_fraction
    size = max(10, math.ceil(1 / min(frac, 1 - frac)))
    n_val_total = min(max(int(round(frac * n)), 1), n - 1)
    chosen = []
    strata = []
    taken = 0
    for start in range(0, n, size):
        stratum = order[start:start + size]
        strata.append(stratum)
        end = start + len(stratum)
        target = int(round(n_val_total * end / n))
        m = min(target - taken, len(stratum))
        if m > 0:
            chosen.extend(rng.choice(stratum, size=m, replace=False).tolist())
            taken += m
    in_val = np.zeros(n, dtype=bool)
    in_val[chosen] = True
    if balance:
        in_val = _balance_swaps(counts.astype(np.float64), strata, in_val, n_val_total, n_val_total)
    val = np.flatnonzero(in_val).astype(np.int64)
    train = np.flatnonzero(~in_val).astype(np.int64)
    return train, val


def split_customers(matrix: PurchaseMatrix, validation_fraction: float = 0.1, seed: int = 0,
                    item_train=None, item_val=None) -> QuadrantSplit:
    """Customer split aligned on purchase frequency.

    Item sets default to "all items are training items" when not given.
    """
    if not 0 < validation_fraction < 1:
        raise PurchaseError("validation_fraction must lie in (0, 1)")
    n_cust = matrix.shape[1]
    if n_cust < 2:
        raise PurchaseError("need at least two customers to split")
    train, val = stratified_customer_split(matrix.customer_counts(), validation_fraction, seed)
    if item_train is None:
        item_train = np.arange(matrix.shape[0])
        item_val = np.array([], dtype=np.int64)
    return QuadrantSplit(np.asarray(item_train, dtype=np.int64), np.asarray(item_val, dtype=np.int64),
                         train, val)


def quadrant(matrix: PurchaseMatrix, split: QuadrantSplit, which: str) -> Quadrant:
    """Restrict the matrix to one block; ``which`` is items-side then customers-side."""
    if which not in QUADRANTS:
        raise PurchaseError(f"unknown quadrant {which!r}")
    rows = split.items_of(which[0])
    cols = split.customers_of(which[1])
    sub = matrix.matrix[rows][:, cols].tocsr()
    return Quadrant(which, rows, cols, sub)


# -- split manifest ----------------------------------------------------------

_SECTIONS = ("item_train", "item_val", "customer_train", "customer_val")


def write_split_manifest(path, matrix: PurchaseMatrix, split: QuadrantSplit, params: dict) -> None:
    lines = ["# fdna split manifest"]
    for key in sorted(params):
        lines.append(f"{key} {params[key]}")
    ids = {
        "item_train": [matrix.items[i] for i in split.item_train],
        "item_val": [matrix.items[i] for i in split.item_val],
        "customer_train": [matrix.customers[j] for j in split.customer_train],
        "customer_val": [matrix.customers[j] for j in split.customer_val],
    }
    for name in _SECTIONS:
        lines.append(f"[{name}] {len(ids[name])}")
        lines.extend(ids[name])
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split_manifest(path, matrix: PurchaseMatrix):
    params: dict[str, str] = {}
    ids: dict[str, list] = {name: [] for name in _SECTIONS}
    current = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            current = line[1:line.index("]")]
            continue
        if current is None:
            key, _, value = line.partition(" ")
            params[key] = value
        else:
            ids[current].append(line)
    ipos = {i: n for n, i in enumerate(matrix.items)}
    cpos = {c: n for n, c in enumerate(matrix.customers)}
    try:
        split = QuadrantSplit(
            np.array(sorted(ipos[i] for i in ids["item_train"]), dtype=np.int64),
            np.array(sorted(ipos[i] for i in ids["item_val"]), dtype=np.int64),
            np.array(sorted(cpos[c] for c in ids["customer_train"]), dtype=np.int64),
            np.array(sorted(cpos[c] for c in ids["customer_val"]), dtype=np.int64),
        )
    except KeyError as exc:
        raise PurchaseError(f"split manifest names unknown id {exc.args[0]!r}") from None
    return split, params
