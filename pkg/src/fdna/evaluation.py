"""Calibration, ROC/AUC and per-customer ranking quality.

Scores passed to the ranking functions may be probabilities or logits; AUC
only depends on their order, and logits avoid spurious ties where
probabilities saturate in floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .purchases import PurchaseMatrix, QuadrantSplit, quadrant


class EvaluationError(ValueError):
    pass


@dataclass
class CalibrationBin:
    mean_predicted: float
    empirical_rate: float
    count: int


@dataclass
class CalibrationReport:
    bins: list
    sample_size: int
    bin_count: int

    def as_arrays(self):
        mp = np.array([b.mean_predicted for b in self.bins])
        er = np.array([b.empirical_rate for b in self.bins])
        n = np.array([b.count for b in self.bins])
        return mp, er, n


def calibrate(probabilities, labels, bin_count: int = 200) -> CalibrationReport:
    """Equal-count binning of (prediction, outcome) pairs sorted by prediction.

    Bin sizes differ by at most one.
    """
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise EvaluationError("no scored pairs")
    if p.shape != y.shape:
        raise EvaluationError("probabilities and labels differ in length")
    if bin_count < 1 or bin_count > p.size:
        raise EvaluationError(f"bin_count {bin_count} must lie in [1, {p.size}]")
    if np.any(p < 0) or np.any(p > 1):
        raise EvaluationError("probabilities must lie in [0, 1]")
    order = np.argsort(p, kind="mergesort")
    bins = []
    for chunk in np.array_split(order, bin_count):
        bins.append(CalibrationBin(float(p[chunk].mean()), float(y[chunk].mean()), int(chunk.size)))
    return CalibrationReport(bins, int(p.size), bin_count)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    n_pos: int = 0
    n_neg: int = 0

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise EvaluationError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC is undefined without both positives and negatives")
    return s, y, n_pos, n_neg


def auc_score(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + P(tie) / 2.

    Ranks are handled in doubled integer units, so the numerator is an exact
    integer count of ordered pairs (ties counting one half).
    """
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    uniq, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    # doubled average rank of every tie group: 2*(start+1) + (count-1)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank2 = 2 * starts + counts + 1
    u2 = int(rank2[inverse[y]].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def roc_auc(scores, labels) -> RocCurve:
    """ROC points at every distinct threshold, from (0, 0) to (1, 1)."""
    s, y, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.flatnonzero(np.diff(s_sorted) != 0)
    last = np.append(last, s.size - 1)
    tpr = np.concatenate(([0.0], tp[last] / n_pos))
    fpr = np.concatenate(([0.0], fp[last] / n_neg))
    thresholds = np.concatenate(([np.inf], s_sorted[last]))
    return RocCurve(fpr, tpr, thresholds, auc_score(s, y), n_pos, n_neg)


def expected_auc(scores, probabilities) -> float:
    """Population AUC of ``scores`` when labels are Bernoulli(probabilities).

    This is the ratio of the expected concordant weight to the expected
    number of positive-negative pairs, over pairs of distinct elements. It is
    the large-sample limit of the AUC (the expectation of the ratio differs
    from it by O(1/n)).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    q = 1.0 - p
    uniq, inverse = np.unique(s, return_inverse=True)
    group_q = np.bincount(inverse, weights=q, minlength=uniq.size)
    below_q = np.concatenate(([0.0], np.cumsum(group_q)[:-1]))
    same_q = group_q[inverse] - q
    numer = np.sum(p * (below_q[inverse] + 0.5 * same_q))
    denom = np.sum(p * (q.sum() - q))
    if denom <= 0:
        raise EvaluationError("expected AUC undefined: no positive-negative weight")
    return float(numer / denom)


# -- quadrant scoring --------------------------------------------------------

def _labels_at(mat: sp.csr_matrix, rows, cols) -> np.ndarray:
    coo = mat.tocoo()
    ncol = mat.shape[1]
    keys = np.sort(coo.row.astype(np.int64) * ncol + coo.col)
    probe = np.asarray(rows, dtype=np.int64) * ncol + np.asarray(cols, dtype=np.int64)
    pos = np.searchsorted(keys, probe)
    pos = np.minimum(pos, max(len(keys) - 1, 0))
    return (keys[pos] == probe) if len(keys) else np.zeros(len(probe), dtype=bool)


def _bank_for(banks, side):
    bank = banks.get(side) if isinstance(banks, dict) else banks
    if bank is None:
        raise EvaluationError(f"no customer bank for the {'training' if side == 't' else 'validation'} customers")
    return bank


def quadrant_scores(F, banks, matrix: PurchaseMatrix, split: QuadrantSplit, which: str,
                    pair_sample: int | None = None, seed: int = 0):
    """Logits and labels of the quadrant's pairs.

    ``F`` holds embeddings for all items (matrix row order). ``banks`` maps
    ``"t"``/``"v"`` to the customer bank of that side, rows ordered like
    ``split.customers_of(side)``. With ``pair_sample`` set, pairs are drawn
    uniformly with replacement.
    """
    bank = _bank_for(banks, which[1])
    q = quadrant(matrix, split, which)
    n_i, n_c = q.matrix.shape
    if bank.size != n_c:
        raise EvaluationError(f"bank has {bank.size} customers, quadrant {which} has {n_c}")
    Fq = np.asarray(F)[q.items]
    if pair_sample is None:
        Z = Fq @ bank.weights.T + bank.biases
        labels = q.matrix.toarray().astype(bool)
        return Z.ravel(), labels.ravel()
    rng = np.random.default_rng(seed)
    r = rng.integers(n_i, size=pair_sample)
    c = rng.integers(n_c, size=pair_sample)
    Z = np.einsum("ij,ij->i", Fq[r], bank.weights[c]) + bank.biases[c]
    return Z, _labels_at(q.matrix, r, c)


def quadrant_auc(F, banks, matrix, split, which: str, pair_sample: int | None = None, seed: int = 0) -> float:
    scores, labels = quadrant_scores(F, banks, matrix, split, which, pair_sample, seed)
    return auc_score(scores, labels)


@dataclass
class CustomerAucPairs:
    customers: list
    auc_train_items: np.ndarray
    auc_val_items: np.ndarray
    skipped: int = 0

    def __iter__(self):
        return iter(zip(self.customers, self.auc_train_items.tolist(), self.auc_val_items.tolist()))

    def __len__(self):
        return len(self.customers)


def per_customer_auc_pairs(F, bank, matrix: PurchaseMatrix, split: QuadrantSplit,
                           customer_side: str = "v") -> CustomerAucPairs:
    """Per-customer AUC on training items and on validation items.

    Customers lacking a positive (or a negative) in either item set are
    skipped and counted.
    """
    cust = split.customers_of(customer_side)
    blocks = {}
    for side in "tv":
        rows = split.items_of(side)
        Z = np.asarray(F)[rows] @ bank.weights.T + bank.biases
        Y = matrix.matrix[rows][:, cust].toarray().astype(bool)
        blocks[side] = (Z, Y)
    ids, a_t, a_v = [], [], []
    skipped = 0
    for c in range(len(cust)):
        ok = True
        for side in "tv":
            col = blocks[side][1][:, c]
            if col.all() or not col.any():
                ok = False
        if not ok:
            skipped += 1
            continue
        ids.append(matrix.customers[cust[c]])
        a_t.append(auc_score(blocks["t"][0][:, c], blocks["t"][1][:, c]))
        a_v.append(auc_score(blocks["v"][0][:, c], blocks["v"][1][:, c]))
    return CustomerAucPairs(ids, np.array(a_t), np.array(a_v), skipped)


def pearson_r2(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise EvaluationError("need two equal-length samples of size >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = xc @ xc
    syy = yc @ yc
    if sxx == 0 or syy == 0:
        raise EvaluationError("zero variance")
    r = (xc @ yc) / np.sqrt(sxx * syy)
    return float(min(r * r, 1.0))


def top_k_capture(F, bank, matrix: PurchaseMatrix, split: QuadrantSplit, k: int,
                  customer_side: str = "v", item_side: str = "v") -> float:
    """Share of the customers' purchases in ``item_side`` that land in their top-k.

    Ranking ties are broken by item position.
    """
    if k < 1:
        raise EvaluationError("k must be at least 1")
    rows = split.items_of(item_side)
    cust = split.customers_of(customer_side)
    Z = np.asarray(F)[rows] @ bank.weights.T + bank.biases
    Y = matrix.matrix[rows][:, cust].toarray().astype(bool)
    k = min(k, len(rows))
    hits = 0
    total = int(Y.sum())
    if total == 0:
        raise EvaluationError("no purchases to capture")
    for c in range(len(cust)):
        top = np.argsort(-Z[:, c], kind="mergesort")[:k]
        hits += int(Y[top, c].sum())
    return hits / total


# -- reports -----------------------------------------------------------------

def format_calibration(report: CalibrationReport) -> str:
    lines = ["bin\tmean_p\tempirical_rate\tcount"]
    for n, b in enumerate(report.bins):
        lines.append(f"{n}\t{b.mean_predicted!r}\t{b.empirical_rate!r}\t{b.count}")
    return "\n".join(lines) + "\n"


def format_roc(curve: RocCurve, max_points: int | None = None) -> str:
    fpr, tpr = curve.fpr, curve.tpr
    if max_points is not None and len(fpr) > max_points:
        keep = np.unique(np.linspace(0, len(fpr) - 1, max_points).round().astype(int))
        fpr, tpr = fpr[keep], tpr[keep]
    lines = ["fpr\ttpr"]
    lines.extend(f"{a!r}\t{b!r}" for a, b in zip(fpr.tolist(), tpr.tolist()))
    return "\n".join(lines) + "\n"


@dataclass
class AucTable:
    rows: dict = field(default_factory=dict)  # model -> {quadrant: auc}

    def add(self, model: str, which: str, auc: float) -> None:
        self.rows.setdefault(model, {})[which] = auc

    def format(self) -> str:
        quads = ("tt", "tv", "vt", "vv")
        lines = ["model\t" + "\t".join(quads)]
        for model in sorted(self.rows):
            vals = [self.rows[model].get(q) for q in quads]
            lines.append(model + "\t" + "\t".join("-" if v is None else f"{v:.6f}" for v in vals))
        return "\n".join(lines) + "\n"
