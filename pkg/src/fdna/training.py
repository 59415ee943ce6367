"""Joint training of the embedding network and per-customer logistic layer.

For item ``i`` with embedding ``f_i`` and customer ``j`` with style vector
``w_j`` and bias ``b_j`` the purchase probability is ``sigmoid(f_i . w_j + b_j)``.
Training minimises the mean binary cross entropy over the training quadrant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .artifacts import read_artifact, write_artifact
from .network import EmbeddingModel, backward, forward

log = logging.getLogger(__name__)

EPS = 1e-12


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int, learning_rate: float, loss: float):
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch} at learning rate {learning_rate}")
        self.epoch = epoch
        self.learning_rate = learning_rate


@dataclass
class CustomerBank:
    weights: np.ndarray
    biases: np.ndarray
    customer_ids: list | None = None

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.biases = np.asarray(self.biases, dtype=np.float64).ravel()
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ValueError("one bias per customer row required")
        if self.customer_ids is not None and len(self.customer_ids) != len(self.biases):
            raise ValueError("customer_ids length does not match the bank")

    @property
    def size(self) -> int:
        return self.biases.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "CustomerBank":
        ids = list(self.customer_ids) if self.customer_ids is not None else None
        return CustomerBank(self.weights.copy(), self.biases.copy(), ids)


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    momentum: float = 0.9
    optimizer: str = "sgd"
    beta2: float = 0.999
    epochs: int = 20
    item_batch_size: int = 32
    negative_subsample: int | None = None
    seed: int = 0
    weight_init_sigma: float = 0.01
    # step-size multiplier for customer parameters; None means K (the number
    # of customers), which turns their mean-over-pairs gradient into a
    # mean-over-items gradient
    customer_lr_scale: float | None = None
    # L2 penalty (customer_l2 / 2) * mean_j |w_j|^2 added to the loss
    customer_l2: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.item_batch_size < 1:
            raise ValueError("item_batch_size must be positive")
        if self.negative_subsample is not None and self.negative_subsample < 1:
            raise ValueError("negative_subsample must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.weight_init_sigma <= 0:
            raise ValueError("weight_init_sigma must be positive")


def sigmoid(x):
    return expit(x)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def predict_probability(f, w, b) -> float:
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if f.shape != w.shape:
        raise ValueError(f"dimension mismatch: {f.shape} vs {w.shape}")
    return float(expit(f @ w + b))


def predict_matrix(F, bank: CustomerBank) -> np.ndarray:
    """Probabilities for every (item row of F, customer of bank) pair."""
    return expit(np.asarray(F) @ bank.weights.T + bank.biases)


def cross_entropy(p, labels, eps: float = EPS, stats: dict | None = None) -> float:
    """Mean binary cross entropy; probabilities are clamped to ``[eps, 1-eps]``.

    The number of clamped entries is added to ``stats["clamped"]`` when a
    dict is supplied.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in shape")
    return _ce_sum(p, y, eps, stats) / p.size


def _ce_sum(p, y, eps, stats=None, weights=None) -> float:
    clamped = np.clip(p, eps, 1 - eps)
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + int(np.count_nonzero(clamped != p))
    terms = y * np.log(clamped) + (1 - y) * np.log1p(-clamped)
    if weights is not None:
        terms = terms * weights
    return float(-terms.sum())


def _dense_rows(Y, rows=None) -> np.ndarray:
    sub = Y if rows is None else Y[rows]
    return sub.toarray() if sp.issparse(sub) else np.asarray(sub, dtype=np.float64)


def init_customer_bank(Y, d: int, seed: int = 0, sigma: float = 0.01, customer_ids=None) -> CustomerBank:
    """Gaussian style vectors; biases at the logit of each customer's purchase rate.

    ``Y`` is the (items x customers) training block. Rates are floored at
    ``1/(2 N)`` (and capped at ``1 - 1/(2 N)``) so biases stay finite.
    """
    n_items = Y.shape[0]
    counts = np.asarray(Y.sum(axis=0)).ravel()
    eps = 1.0 / (2 * n_items)
    rate = np.clip(counts / n_items, eps, 1 - eps)
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, sigma, size=(Y.shape[1], d))
    return CustomerBank(W, logit(rate), customer_ids)


def exact_loss(F, bank: CustomerBank, Y, stats: dict | None = None) -> float:
    """Mean cross entropy over the whole block for fixed embeddings ``F``."""
    P = predict_matrix(F, bank)
    return _ce_sum(P, _dense_rows(Y), EPS, stats) / P.size


def model_loss(model: EmbeddingModel, X, bank: CustomerBank, Y) -> float:
    return exact_loss(model.embed(X), bank, Y)


def chain_loss_and_grads(model: EmbeddingModel, X, bank: CustomerBank, Y, mode="infer",
                         rng=None, pair_weights=None, normalizer=None, stats=None):
    """Loss and gradients of the whole chain: network -> logistic layer -> cross entropy.

    Returns ``(loss_sum / normalizer, model_grads, grad_W, grad_b)`` with
    gradients of that normalised loss. ``normalizer`` defaults to the number
    of pairs in the block.
    """
    Yd = _dense_rows(Y)
    F, cache = forward(model, X, mode=mode, seed=rng)
    P = expit(F @ bank.weights.T + bank.biases)
    norm = Yd.size if normalizer is None else normalizer
    loss = _ce_sum(P, Yd, EPS, stats, pair_weights) / norm
    dZ = P - Yd
    if pair_weights is not None:
        dZ = dZ * pair_weights
    dZ /= norm
    grad_W = dZ.T @ F
    grad_b = dZ.sum(axis=0)
    dF = dZ @ bank.weights
    model_grads, _ = backward(model, cache, dF)
    return loss, model_grads, grad_W, grad_b


def _negative_weights(Yb, m, rng):
    """Keep positives; sample ``m`` negatives per item row, reweighted by (K - n_i)/m."""
    weights = Yb.copy()
    K = Yb.shape[1]
    for r in range(Yb.shape[0]):
        neg = np.flatnonzero(Yb[r] == 0)
        if len(neg) == 0:
            continue
        take = min(m, len(neg))
        chosen = rng.choice(neg, size=take, replace=False)
        weights[r, chosen] = len(neg) / take
    return weights


class _Optimizer:
    """In-place SGD-with-momentum or Adam updates over a fixed parameter list."""

    def __init__(self, params, config: TrainConfig, scales):
        self.params = params
        self.config = config
        self.scales = scales
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params] if config.optimizer == "adam" else None
        self.t = 0

    def __call__(self, grads):
        cfg = self.config
        self.t += 1
        if cfg.optimizer == "sgd":
            for p, m, g, s in zip(self.params, self.m, grads, self.scales):
                m *= cfg.momentum
                m -= (cfg.learning_rate * s) * g
                p += m
            return
        b1, b2 = cfg.momentum, cfg.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v, g, s in zip(self.params, self.m, self.v, grads, self.scales):
            g = g * s
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + 1e-8)


@dataclass
class TrainResult:
    model: EmbeddingModel
    bank: CustomerBank
    loss_history: list
    epoch_losses: list
    clamp_count: int = 0
    config: TrainConfig | None = None
    extras: dict = field(default_factory=dict)


def train(model: EmbeddingModel, X, Y, config: TrainConfig, bank: CustomerBank | None = None,
          customer_ids=None) -> TrainResult:
    """Mini-batch SGD with momentum over items.

    ``X`` holds one input row per training item, ``Y`` the matching
    (items x customers) purchase block. The input model and bank are not
    modified. ``loss_history`` holds the exact inference-mode loss before
    training and after every epoch; ``epoch_losses`` the running loss
    accumulated over each epoch's batches.
    """
    model = model.copy()
    n_items, n_cust = Y.shape
    if X.shape[0] != n_items:
        raise ValueError("X and Y must have one row per training item")
    if bank is None:
        bank = init_customer_bank(Y, model.output_dim, config.seed, config.weight_init_sigma, customer_ids)
    else:
        bank = bank.copy()
    if bank.dim != model.output_dim or bank.size != n_cust:
        raise ValueError("customer bank does not match model dimension or customer count")
    Y = sp.csr_matrix(Y) if sp.issparse(Y) else np.asarray(Y, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    cscale = float(n_cust if config.customer_lr_scale is None else config.customer_lr_scale)
    lr = config.learning_rate

    params = model.params() + [bank.weights, bank.biases]
    step = _Optimizer(params, config, scales=[1.0] * (len(params) - 2) + [cscale, cscale])
    stats: dict = {"clamped": 0}

    history = [model_loss(model, X, bank, Y)]
    epoch_losses = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_items)
        running = 0.0
        for start in range(0, n_items, config.item_batch_size):
            idx = np.sort(order[start:start + config.item_batch_size])
            Yb = _dense_rows(Y, idx)
            weights = None
            if config.negative_subsample is not None:
                weights = _negative_weights(Yb, config.negative_subsample, rng)
            loss, grads, gW, gb = chain_loss_and_grads(
                model, X[idx], bank, Yb, mode="train", rng=rng, pair_weights=weights,
                normalizer=Yb.size, stats=stats)
            if not math.isfinite(loss):
                raise TrainingDivergence(epoch, lr, loss)
            running += loss * Yb.size
            if config.customer_l2:
                gW = gW + (config.customer_l2 / n_cust) * bank.weights
            step(grads + [gW, gb])
        epoch_losses.append(running / (n_items * n_cust))
        current = model_loss(model, X, bank, Y)
        if not math.isfinite(current):
            raise TrainingDivergence(epoch, lr, current)
        history.append(current)
        log.debug("epoch %d: running %.6g exact %.6g", epoch, epoch_losses[-1], current)
    return TrainResult(model, bank, history, epoch_losses, stats["clamped"], config)


# -- validation customers ------------------------------------------------------

@dataclass
class CustomerFit:
    bank: CustomerBank
    converged: np.ndarray
    iterations: np.ndarray


def _regularized_loss(F, y, w, b, lam):
    z = F @ w + b
    # softplus(z) - y z is the cross entropy written in logits
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * (w @ w))


def fit_customer(F, y, lam: float = 1e-4, max_iter: int = 100, tol: float = 1e-10):
    """L2-regularised logistic regression of one customer's purchases on fixed ``F``.

    Damped Newton steps with backtracking; the bias is not penalised.
    Stops when the gradient max-norm drops below ``tol`` or the predicted
    improvement is below the objective's float resolution. Returns ``(w, b, converged, iterations)``.
    """
    n, d = F.shape
    y = np.asarray(y, dtype=np.float64)
    pos = y.sum()
    eps = 1.0 / (2 * n)
    if pos == 0 or pos == n:
        rate = eps if pos == 0 else 1 - eps
        return np.zeros(d), float(logit(rate)), True, 0
    w = np.zeros(d)
    b = float(logit(pos / n))
    obj = _regularized_loss(F, y, w, b, lam)
    A = np.hstack([F, np.ones((n, 1))])
    reg = np.full(d + 1, lam)
    reg[-1] = 0.0
    for it in range(1, max_iter + 1):
        theta = np.append(w, b)
        p = expit(A @ theta)
        grad = A.T @ (p - y) / n + reg * theta
        if np.max(np.abs(grad)) < tol:
            return w, b, True, it - 1
        s = p * (1 - p)
        H = (A.T * s) @ A / n + np.diag(reg)
        H[np.diag_indices_from(H)] += 1e-12
        step = np.linalg.solve(H, grad)
        # half the Newton decrement estimates the remaining suboptimality;
        # below float resolution of the objective no step can improve it
        if 0.5 * (grad @ step) <= 4 * np.finfo(float).eps * abs(obj):
            return w, b, True, it - 1
        t = 1.0
        while True:
            cand = theta - t * step
            new_obj = _regularized_loss(F, y, cand[:-1], cand[-1], lam)
            if new_obj <= obj - 1e-4 * t * (grad @ step) or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10:
            return w, b, False, it
        w, b, obj = cand[:-1].copy(), float(cand[-1]), new_obj
    theta = np.append(w, b)
    p = expit(A @ theta)
    grad = A.T @ (p - y) / n + reg * theta
    return w, b, bool(np.max(np.abs(grad)) < tol), max_iter


def fit_customers(F, Y, lam: float = 1e-4, max_iter: int = 100, tol: float = 1e-10,
                  customer_ids=None) -> CustomerFit:
    """Fit style vectors and biases for new customers against frozen embeddings.

    ``F`` (training items x d) is read only; ``Y`` is the (training items x
    new customers) purchase block. Customers without any purchase get a zero
    style vector and the floored bias.
    """
    F = np.asarray(F)
    n_cust = Y.shape[1]
    Yc = sp.csc_matrix(Y) if sp.issparse(Y) else np.asarray(Y, dtype=np.float64)
    W = np.zeros((n_cust, F.shape[1]))
    b = np.zeros(n_cust)
    converged = np.zeros(n_cust, dtype=bool)
    iters = np.zeros(n_cust, dtype=np.int64)
    for j in range(n_cust):
        col = Yc[:, j].toarray().ravel() if sp.issparse(Yc) else Yc[:, j]
        W[j], b[j], converged[j], iters[j] = fit_customer(F, col, lam, max_iter, tol)
    if not converged.all():
        log.warning("%d of %d customer regressions did not converge", int((~converged).sum()), n_cust)
    return CustomerFit(CustomerBank(W, b, customer_ids), converged, iters)


# -- artifacts ---------------------------------------------------------------

def save_bank(path, bank: CustomerBank, extra_meta: dict | None = None) -> str:
    meta = {"kind": "customer-bank", "customers": bank.size, "dim": bank.dim}
    if bank.customer_ids is not None:
        for cid in bank.customer_ids:
            if "," in cid or any(c.isspace() for c in cid):
                raise ValueError(f"customer id {cid!r} cannot be stored")
        meta["ids"] = ",".join(bank.customer_ids)
    for key, value in (extra_meta or {}).items():
        meta[f"x.{key}"] = value
    return write_artifact(path, meta, {"weights": bank.weights, "biases": bank.biases})


def load_bank(path) -> CustomerBank:
    meta, arrays = read_artifact(path)
    if meta.get("kind") != "customer-bank":
        raise ValueError(f"{path} is not a customer bank")
    ids = meta["ids"].split(",") if meta.get("ids") else None
    W = arrays["weights"].reshape(int(meta["customers"]), int(meta["dim"]))
    return CustomerBank(W, arrays["biases"], ids)
