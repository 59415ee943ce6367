"""Planted-factor worlds: synthetic catalogs and purchases with known truth.

Every item ``i`` has a latent vector ``u_i`` and every customer ``j`` a latent
``v_j`` and bias ``c_j``. The true purchase probability is::

    p*_ij = (1 - noise) * sigmoid(u_i . v_j + c_j) + noise * target_density

Catalog tags are drawn from ``softmax((A u_i + a) / tau)`` per family, so
attributes carry tunable information about the latents. A second, dense
feature channel averages several such draws with its own temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, softmax

from .artifacts import read_artifact, write_artifact
from .catalog import Item
from .evaluation import auc_score, expected_auc
from .network import FeatureChannel
from .purchases import PurchaseMatrix, QuadrantSplit

TAG_FAMILIES = ("brand", "commodity_group", "main_color", "pattern")
DEFAULT_TAG_SIZES = (24, 16, 10, 8)
N_FIBERS = 8


class WorldError(ValueError):
    pass


@dataclass
class PlantedWorld:
    latent_dim: int
    item_latents: np.ndarray
    customer_latents: np.ndarray
    customer_biases: np.ndarray
    noise_level: float
    target_density: float
    seed: int
    tag_sizes: tuple
    tau_a: float
    tau_b: float
    item_tags: np.ndarray          # N x families, -1 = missing
    prices: np.ndarray             # N, NaN = missing
    fibers: np.ndarray             # N x N_FIBERS, rows of NaN = missing
    features_b: np.ndarray         # N x sum(tag_sizes_b)
    params: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return self.item_latents.shape[0]

    @property
    def n_customers(self) -> int:
        return self.customer_latents.shape[0]

    def item_ids(self) -> list:
        w = len(str(self.n_items))
        return [f"i{n:0{w}d}" for n in range(self.n_items)]

    def customer_ids(self) -> list:
        w = len(str(self.n_customers))
        return [f"c{n:0{w}d}" for n in range(self.n_customers)]

    def logits(self, rows=None, cols=None) -> np.ndarray:
        U = self.item_latents if rows is None else self.item_latents[rows]
        V = self.customer_latents if cols is None else self.customer_latents[cols]
        c = self.customer_biases if cols is None else self.customer_biases[cols]
        return U @ V.T + c

    def probabilities(self, rows=None, cols=None) -> np.ndarray:
        p = expit(self.logits(rows, cols))
        return (1.0 - self.noise_level) * p + self.noise_level * self.target_density

    # -- exports --------------------------------------------------------

    def items(self) -> list:
        out = []
        for n, item_id in enumerate(self.item_ids()):
            tags = {}
            for f, fam in enumerate(TAG_FAMILIES):
                if self.item_tags[n, f] >= 0:
                    tags[fam] = f"{fam[:2]}{int(self.item_tags[n, f]):03d}"
            price = None if np.isnan(self.prices[n]) else float(self.prices[n])
            fibers = None
            if not np.isnan(self.fibers[n, 0]):
                fibers = {f"fiber{k}": float(v) for k, v in enumerate(self.fibers[n]) if v > 0}
            out.append(Item(item_id, tags, price, fibers))
        return out

    def feature_channel(self) -> FeatureChannel:
        return FeatureChannel(self.item_ids(), self.features_b)


def _calibrate_offset(base_logits, target, tol=1e-10):
    """Offset c0 with mean(sigmoid(base + c0)) == target, by bisection."""
    lo, hi = -60.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expit(base_logits + mid).mean() > target:
            hi = mid
        else:
            lo = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def _draw_tags(rng, U, size, tau):
    A = rng.normal(size=(size, U.shape[1]))
    a0 = rng.normal(size=size)
    probs = softmax((U @ A.T + a0) / tau, axis=1)
    cum = np.cumsum(probs, axis=1)
    r = rng.random(U.shape[0])[:, None]
    return np.minimum((r > cum).sum(axis=1), size - 1), probs


def generate_world(n_items: int, n_customers: int, rank: int, tag_sizes=DEFAULT_TAG_SIZES,
                   noise_level: float = 0.0, target_density: float = 0.02, seed: int = 0,
                   tau_a: float = 0.3, tau_b: float = 1.0, tag_sizes_b=(16, 16, 16, 16),
                   draws_b: int = 4, bias_spread: float = 0.5, pattern_coverage: float = 0.7,
                   fabric_coverage: float = 0.65) -> PlantedWorld:
    """Draw a planted world.

    Customer biases are ``c0 + bias_spread * xi_j`` with ``c0`` found by
    bisection so that the mean true probability equals ``target_density``.
    """
    if min(n_items, n_customers, rank) < 1:
        raise WorldError("n_items, n_customers and rank must be positive")
    if not 0 < target_density < 0.5:
        raise WorldError(f"target_density {target_density} outside (0, 0.5)")
    if not 0 <= noise_level <= 1:
        raise WorldError("noise_level must lie in [0, 1]")
    if tau_a <= 0 or tau_b <= 0:
        raise WorldError("temperatures must be positive")
    if len(tag_sizes) != len(TAG_FAMILIES) or min(tag_sizes) < 1:
        raise WorldError(f"need {len(TAG_FAMILIES)} positive tag family sizes")
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(n_items, rank))
    V = rng.normal(size=(n_customers, rank))
    xi = rng.normal(size=n_customers) * bias_spread
    base = U @ V.T + xi
    c0 = _calibrate_offset(base, target_density)
    achieved = expit(base + c0).mean()
    if abs(achieved - target_density) > 0.02 * target_density:
        raise WorldError(f"density {target_density} not reachable (got {achieved:.3g})")
    biases = xi + c0

    tags = np.empty((n_items, len(TAG_FAMILIES)), dtype=np.int64)
    for f, size in enumerate(tag_sizes):
        tags[:, f], _ = _draw_tags(rng, U, size, tau_a)
    missing_pattern = rng.random(n_items) >= pattern_coverage
    tags[missing_pattern, TAG_FAMILIES.index("pattern")] = -1

    price_dir = rng.normal(size=rank) / np.sqrt(rank)
    prices = np.exp(3.5 + 0.8 * (U @ price_dir) + 0.1 * rng.normal(size=n_items))
    prices = np.round(prices, 2)

    fiber_map = rng.normal(size=(N_FIBERS, rank))
    fibers = softmax((U @ fiber_map.T) / max(tau_a, 0.5), axis=1)
    fibers = np.round(fibers, 3)
    fibers[:, -1] = 0.0
    fibers[:, -1] = np.round(1.0 - fibers[:, :-1].sum(axis=1), 3)
    bad = fibers[:, -1] < 0
    fibers[bad] = 0.0
    fibers[bad, 0] = 1.0
    no_fabric = rng.random(n_items) >= fabric_coverage
    fibers[no_fabric] = np.nan

    blocks = []
    for size in tag_sizes_b:
        A = rng.normal(size=(size, rank))
        a0 = rng.normal(size=size)
        probs = softmax((U @ A.T + a0) / tau_b, axis=1)
        cum = np.cumsum(probs, axis=1)
        hist = np.zeros((n_items, size))
        for _ in range(draws_b):
            r = rng.random(n_items)[:, None]
            hist[np.arange(n_items), np.minimum((r > cum).sum(axis=1), size - 1)] += 1.0
        blocks.append(hist / draws_b)
    features_b = np.hstack(blocks)

    params = dict(n_items=n_items, n_customers=n_customers, rank=rank, tag_sizes=tuple(tag_sizes),
                  noise_level=noise_level, target_density=target_density, seed=seed, tau_a=tau_a,
                  tau_b=tau_b, tag_sizes_b=tuple(tag_sizes_b), draws_b=draws_b,
                  bias_spread=bias_spread, pattern_coverage=pattern_coverage,
                  fabric_coverage=fabric_coverage)
    return PlantedWorld(rank, U, V, biases, float(noise_level), float(target_density), seed,
                        tuple(tag_sizes), tau_a, tau_b, tags, prices, fibers, features_b, params)


def sample_purchases(world: PlantedWorld, seed: int = 0) -> PurchaseMatrix:
    """Independent Bernoulli(p*) draws; each item row uses its own derived stream."""
    rows, cols = [], []
    for i in range(world.n_items):
        p = world.probabilities(rows=[i])[0]
        draw = np.random.default_rng([seed, i]).random(world.n_customers)
        hit = np.flatnonzero(draw < p)
        rows.extend([i] * len(hit))
        cols.extend(hit.tolist())
    mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(world.n_items, world.n_customers))
    return PurchaseMatrix(world.item_ids(), world.customer_ids(), mat)


def quadrant_probabilities(world: PlantedWorld, split: QuadrantSplit, which: str) -> np.ndarray:
    return world.probabilities(split.items_of(which[0]), split.customers_of(which[1]))


def oracle_auc(world: PlantedWorld, split: QuadrantSplit, which: str, seed: int = 0,
               exact: bool = False, labels=None) -> float:
    """AUC of the true probabilities on one quadrant.

    By default against a fresh Bernoulli label draw (``seed``); ``labels``
    substitutes a given (items x customers) label block; ``exact=True``
    returns the expectation over label draws.
    """
    if world.n_items * world.n_customers > 10 ** 7:
        raise WorldError("world too large for exact enumeration")
    P = quadrant_probabilities(world, split, which)
    if exact:
        return expected_auc(P.ravel(), P.ravel())
    if labels is None:
        labels = np.random.default_rng(seed).random(P.shape) < P
    return auc_score(P.ravel(), np.asarray(labels).ravel())


# -- serialization -------------------------------------------------------------

def save_world(path, world: PlantedWorld) -> str:
    meta = {f"p.{k}": repr(v) for k, v in sorted(world.params.items())}
    meta.update({"kind": "planted-world", "latent_dim": world.latent_dim, "seed": world.seed,
                 "noise_level": repr(world.noise_level), "target_density": repr(world.target_density),
                 "tag_sizes": ",".join(map(str, world.tag_sizes)), "tau_a": repr(world.tau_a),
                 "tau_b": repr(world.tau_b)})
    arrays = {
        "item_latents": world.item_latents,
        "customer_latents": world.customer_latents,
        "customer_biases": world.customer_biases,
        "item_tags": world.item_tags.astype(np.float64),
        "prices": world.prices,
        "fibers": world.fibers,
        "features_b": world.features_b,
    }
    digest = write_artifact(path, meta, arrays)
    manifest = ["# planted world manifest", f"artifact {Path(path).name}", f"sha256 {digest}"]
    manifest += [f"{k} {world.params[k]}" for k in sorted(world.params)]
    Path(str(path) + ".manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    return digest


def load_world(path) -> PlantedWorld:
    import ast

    meta, arr = read_artifact(path)
    if meta.get("kind") != "planted-world":
        raise WorldError(f"{path} is not a planted world")
    params = {k[2:]: ast.literal_eval(v) for k, v in meta.items() if k.startswith("p.")}
    n, k, r = params["n_items"], params["n_customers"], int(meta["latent_dim"])
    return PlantedWorld(
        r,
        arr["item_latents"].reshape(n, r),
        arr["customer_latents"].reshape(k, r),
        arr["customer_biases"].ravel(),
        float(meta["noise_level"]),
        float(meta["target_density"]),
        int(meta["seed"]),
        tuple(int(s) for s in meta["tag_sizes"].split(",")),
        float(meta["tau_a"]),
        float(meta["tau_b"]),
        arr["item_tags"].reshape(n, -1).astype(np.int64),
        arr["prices"].ravel(),
        arr["fibers"].reshape(n, N_FIBERS),
        arr["features_b"].reshape(n, -1),
        params,
    )
