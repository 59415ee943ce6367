"""Two-dimensional t-SNE maps of item embeddings (exact O(n^2) variant)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)


class MapError(ValueError):
    pass


class MapDivergence(MapError):
    pass


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration_factor: float = 12.0
    early_exaggeration_iters: int = 250
    seed: int = 0
    initial_momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch_iter: int = 250
    use_gains: bool = True
    metric: str = "euclidean"
    init: str = "pca"
    entropy_tol: float = 1e-5

    def __post_init__(self):
        if self.perplexity <= 0 or self.iterations < 1 or self.learning_rate <= 0:
            raise MapError("perplexity, iterations and learning_rate must be positive")
        if self.early_exaggeration_factor <= 0 or self.early_exaggeration_iters < 0:
            raise MapError("invalid early exaggeration settings")
        if self.metric not in ("euclidean", "cosine"):
            raise MapError(f"unknown metric {self.metric!r}")
        if self.init not in ("pca", "random"):
            raise MapError(f"unknown init {self.init!r}")

    def test_mode(self, **overrides) -> "TsneConfig":
        """Plain gradient descent: no momentum, no adaptive gains."""
        kw = dict(initial_momentum=0.0, final_momentum=0.0, use_gains=False)
        kw.update(overrides)
        return replace(self, **kw)


@dataclass
class MapResult:
    coordinates: np.ndarray
    kl_history: list
    P: np.ndarray | None = None
    betas: np.ndarray | None = None


def input_distances(X, metric: str = "euclidean") -> np.ndarray:
    """Squared euclidean distances, or cosine distances, between all rows."""
    X = np.asarray(X, dtype=np.float64)
    if metric == "cosine":
        norms = np.sqrt(np.einsum("ij,ij->i", X, X))
        if np.any(norms == 0):
            raise MapError("cosine metric needs non-zero vectors")
        U = X / norms[:, None]
        D = 1.0 - U @ U.T
    else:
        sq = np.einsum("ij,ij->i", X, X)
        D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_entropy(d, beta):
    # conditional distribution exp(-beta d) over the row's other points
    shifted = d - d.min()
    w = np.exp(-beta * shifted)
    s = w.sum()
    p = w / s
    H = np.log(s) + beta * np.sum(shifted * p)
    return H, p


def conditional_affinities(D: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 200):
    """Per-row Gaussian conditionals whose entropy equals log(perplexity).

    Bisection on the precision ``beta`` of each row; raises when a row cannot
    reach the target within ``tol`` nats.
    """
    n = D.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.delete(D[i], i)
        if np.all(d == d[0]):
            raise MapError(f"point {i}: all distances equal, perplexity cannot be matched")
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            H, p = _row_entropy(d, beta)
            diff = H - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        else:
            raise MapError(f"point {i}: perplexity {perplexity} not reached (entropy off by {diff:.3g})")
        P[i, np.arange(n) != i] = p
        betas[i] = beta
    return P, betas


def joint_affinities(X, perplexity: float, metric: str = "euclidean", tol: float = 1e-5):
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 4:
        raise MapError("t-SNE needs at least 4 points")
    if perplexity >= (n - 1) / 3:
        raise MapError(f"perplexity {perplexity} infeasible for {n} points (must be < {(n - 1) / 3:.3g})")
    D = input_distances(X, metric)
    if not np.any(D > 0):
        raise MapError("all input points coincide")
    Pc, betas = conditional_affinities(D, perplexity, tol)
    P = (Pc + Pc.T) / (2.0 * n)
    return P, betas


def _q_matrix(Y):
    sq = np.einsum("ij,ij->i", Y, Y)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T), 0.0))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(P, Y) -> float:
    _, Q = _q_matrix(Y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def kl_gradient(P, Y):
    num, Q = _q_matrix(Y)
    W = (P - Q) * num
    return 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y


def _initial_layout(X, config: TsneConfig):
    n = X.shape[0]
    if config.init == "random":
        return np.random.default_rng(config.seed).normal(0.0, 1e-4, size=(n, 2))
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc
    vals, vecs = np.linalg.eigh(cov)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    Y = Xc @ top
    if Y.shape[1] < 2:
        Y = np.hstack([Y, np.zeros((n, 2 - Y.shape[1]))])
    for k in range(2):
        j = np.argmax(np.abs(Y[:, k]))
        if Y[j, k] < 0:
            Y[:, k] = -Y[:, k]
    scale = Y[:, 0].std()
    return Y / scale * 1e-4 if scale > 0 else Y


def tsne(X, config: TsneConfig = TsneConfig(), keep_affinities: bool = False) -> MapResult:
    """Embed rows of ``X`` in 2-D by gradient descent on KL(P || Q).

    ``kl_history[t]`` is the divergence (with un-exaggerated P) of the layout
    after iteration ``t``; ``kl_history[0]`` belongs to the initial layout.
    Rows are processed in lexicographic order, so permuting the input permutes
    the output exactly.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise MapError("embeddings must be a 2-D array")
    order = np.lexsort(X.T[::-1])
    inverse = np.empty_like(order)
    inverse[order] = np.arange(len(order))
    res = _tsne_sorted(X[order], config)
    if keep_affinities:
        res.P = res.P[np.ix_(inverse, inverse)]
    else:
        res.P = None
    res.betas = res.betas[inverse]
    res.coordinates = res.coordinates[inverse]
    return res


def _tsne_sorted(X, config: TsneConfig) -> MapResult:
    P, betas = joint_affinities(X, config.perplexity, config.metric, config.entropy_tol)
    P = np.maximum(P, 1e-300)
    np.fill_diagonal(P, 0.0)
    Y = _initial_layout(X, config)
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = [kl_divergence(P, Y)]
    for it in range(1, config.iterations + 1):
        exaggerate = it <= config.early_exaggeration_iters
        Pt = P * config.early_exaggeration_factor if exaggerate else P
        mom = config.initial_momentum if it <= config.momentum_switch_iter else config.final_momentum
        grad = kl_gradient(Pt, Y)
        if config.use_gains:
            same = np.sign(grad) == np.sign(velocity)
            gains = np.where(same, gains * 0.8, gains + 0.2)
            np.maximum(gains, 0.01, out=gains)
            step = gains * grad
        else:
            step = grad
        velocity = mom * velocity - config.learning_rate * step
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
        kl = kl_divergence(P, Y)
        if not np.isfinite(kl) or not np.all(np.isfinite(Y)):
            raise MapDivergence(f"t-SNE diverged at iteration {it}")
        history.append(kl)
    return MapResult(Y, history, P, betas)


def sample_items(item_ids, n: int, min_sales: int, sales_counts, seed: int = 0) -> list:
    """Uniform sample without replacement among items sold at least ``min_sales`` times."""
    counts = np.asarray(sales_counts)
    eligible = np.flatnonzero(counts >= min_sales)
    if n > len(eligible):
        raise MapError(f"only {len(eligible)} items sold at least {min_sales} times, {n} requested")
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(eligible, size=n, replace=False))
    return [item_ids[i] for i in picked]


def format_map(item_ids, coordinates) -> str:
    lines = ["item_id\tx\ty"]
    for i, (x, y) in zip(item_ids, np.asarray(coordinates).tolist()):
        lines.append(f"{i}\t{x!r}\t{y!r}")
    return "\n".join(lines) + "\n"


def format_kl(history) -> str:
    return "iteration\tkl\n" + "".join(f"{t}\t{v!r}\n" for t, v in enumerate(history))
