"""Feedforward item-embedding networks.

An :class:`EmbeddingModel` is a stack of fully connected layers mapping an
item's input vector (sparse one-hot attributes or dense precomputed features)
to its embedding. A :class:`CombinedModel` concatenates the embeddings of two
frozen channels and condenses them with one trainable ReLU layer.

All arithmetic is float64. Weight matrices are stored ``(input, output)`` so a
batch of row vectors maps as ``X @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .artifacts import read_artifact, write_artifact

ACTIVATIONS = ("relu", "identity")


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    input_width: int
    output_width: int
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.input_width < 1 or self.output_width < 1:
            raise NetworkError(f"layer widths must be positive, got {self.input_width}->{self.output_width}")
        if self.activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise NetworkError("dropout_rate must lie in [0, 1)")


@dataclass
class Layer:
    spec: LayerSpec
    W: np.ndarray
    b: np.ndarray


@dataclass
class EmbeddingModel:
    layers: list
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise NetworkError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.spec.output_width != nxt.spec.input_width:
                raise NetworkError("consecutive layer widths do not match")
        if self.layers[-1].spec.activation != "relu":
            raise NetworkError("the embedding layer must be ReLU so embeddings are non-negative")

    @property
    def input_width(self) -> int:
        return self.layers[0].spec.input_width

    @property
    def output_dim(self) -> int:
        return self.layers[-1].spec.output_width

    @property
    def specs(self) -> list:
        return [layer.spec for layer in self.layers]

    def params(self) -> list:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def copy(self) -> "EmbeddingModel":
        layers = [Layer(l.spec, l.W.copy(), l.b.copy()) for l in self.layers]
        return EmbeddingModel(layers, self.seed, dict(self.meta))

    def embed(self, X, batch_size: int = 4096) -> np.ndarray:
        """Inference-mode embeddings for every row of ``X``."""
        n = X.shape[0]
        out = np.empty((n, self.output_dim))
        for start in range(0, n, batch_size):
            out[start:start + batch_size], _ = forward(self, X[start:start + batch_size], mode="infer")
        return out


@dataclass
class ForwardCache:
    x: object
    inputs: list
    pre: list
    masks: list


def taper_widths(input_width: int, d: int, n_layers: int = 4) -> list:
    """Geometric taper from ``input_width`` to ``d`` over ``n_layers`` layers."""
    ratio = (d / input_width) ** (1.0 / n_layers)
    widths = [input_width]
    for k in range(1, n_layers):
        widths.append(max(d, int(round(input_width * ratio ** k))))
    widths.append(d)
    return widths


def layer_specs(widths: Sequence[int], dropout_rate: float = 0.5) -> list:
    """ReLU everywhere; dropout on hidden outputs only, never on the embedding."""
    specs = []
    n = len(widths) - 1
    for k in range(n):
        specs.append(LayerSpec(widths[k], widths[k + 1], "relu", dropout_rate if k < n - 1 else 0.0))
    return specs


def init_sigma(fan_in: int, scale_rule) -> float:
    if isinstance(scale_rule, (int, float)) and not isinstance(scale_rule, bool):
        return float(scale_rule)
    if scale_rule == "he":
        return float(np.sqrt(2.0 / fan_in))
    if scale_rule == "xavier":
        return float(np.sqrt(1.0 / fan_in))
    raise NetworkError(f"unknown scale rule {scale_rule!r}")


def init_model(specs: Sequence[LayerSpec], seed: int = 0, scale_rule="he") -> EmbeddingModel:
    """Gaussian weights (sigma from ``scale_rule``), zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in specs:
        sigma = init_sigma(spec.input_width, scale_rule)
        W = rng.normal(0.0, sigma, size=(spec.input_width, spec.output_width))
        layers.append(Layer(spec, W, np.zeros(spec.output_width)))
    return EmbeddingModel(layers, seed, {"scale_rule": str(scale_rule)})


def _activate(z, activation):
    return np.maximum(z, 0.0) if activation == "relu" else z


def forward(model: EmbeddingModel, x, mode: str = "infer", seed=None, masks=None):
    """Run ``x`` (a row vector or a batch of rows) through the model.

    In ``train`` mode, dropout masks are drawn from ``seed`` (an int or a
    numpy Generator) with inverted scaling, so ``infer`` mode needs no
    rescaling. Explicit ``masks`` (one per layer, ``None`` for no dropout)
    override the random draw. Returns ``(f, cache)``.
    """
    if mode not in ("train", "infer"):
        raise NetworkError(f"unknown mode {mode!r}")
    single = not sp.issparse(x) and np.ndim(x) == 1
    a = sp.csr_matrix(x) if sp.issparse(x) else np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a.shape[1] != model.input_width:
        raise NetworkError(f"input width {a.shape[1]} does not match model input {model.input_width}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cache = ForwardCache(a, [], [], [])
    for k, layer in enumerate(model.layers):
        cache.inputs.append(a)
        z = np.asarray(a @ layer.W) + layer.b
        cache.pre.append(z)
        h = _activate(z, layer.spec.activation)
        mask = None
        if masks is not None:
            mask = masks[k]
        elif mode == "train" and layer.spec.dropout_rate > 0:
            keep = 1.0 - layer.spec.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
        if mask is not None:
            h = h * mask
        cache.masks.append(mask)
        a = h
    return (a[0] if single else a), cache


def backward(model: EmbeddingModel, cache: ForwardCache, grad_out, need_input_grad: bool = False):
    """Backpropagate ``grad_out`` (same shape as the forward output).

    Returns ``(param_grads, input_grad)`` where ``param_grads`` follows the
    order of :meth:`EmbeddingModel.params`; ``input_grad`` is ``None`` unless
    requested.
    """
    if cache is None or len(cache.pre) != len(model.layers):
        raise NetworkError("backward needs the cache of a forward pass through this model")
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    grads = [None] * (2 * len(model.layers))
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if cache.masks[k] is not None:
            g = g * cache.masks[k]
        if layer.spec.activation == "relu":
            g = g * (cache.pre[k] > 0)
        a_in = cache.inputs[k]
        grads[2 * k] = np.asarray(a_in.T @ g)
        grads[2 * k + 1] = g.sum(axis=0)
        if k > 0 or need_input_grad:
            g = g @ layer.W.T
    input_grad = g if need_input_grad else None
    return grads, input_grad


# -- precomputed channel and combined model ---------------------------------

@dataclass
class FeatureChannel:
    """Dense per-item vectors from an external source (stand-in for image fDNA)."""

    item_ids: list
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.item_ids):
            raise NetworkError("feature matrix must have one row per item id")
        self._pos = {i: n for n, i in enumerate(self.item_ids)}
        if len(self._pos) != len(self.item_ids):
            raise NetworkError("duplicate item ids in feature channel")

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, item_ids) -> np.ndarray:
        rows = []
        for i in item_ids:
            if i not in self._pos:
                raise NetworkError(f"no precomputed features for item {i!r}")
            rows.append(self._pos[i])
        return self.vectors[rows]


def read_features(path) -> FeatureChannel:
    ids, rows = [], []
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            vec = [float(v) for v in parts[1:]]
            if width is None:
                width = len(vec)
            elif len(vec) != width:
                raise NetworkError(f"{path}:{lineno}: expected {width} values, found {len(vec)}")
            ids.append(parts[0])
            rows.append(vec)
    if not ids:
        raise NetworkError(f"{path}: no feature rows")
    return FeatureChannel(ids, np.array(rows))


def write_features(path, channel: FeatureChannel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, vec in zip(channel.item_ids, channel.vectors):
            fh.write(i + "\t" + "\t".join(repr(float(v)) for v in vec) + "\n")


@dataclass
class CombinedModel:
    """Two frozen channels, concatenated, condensed by a trainable merge layer."""

    channel_a: EmbeddingModel
    channel_b: object  # EmbeddingModel or FeatureChannel
    merge: EmbeddingModel

    def __post_init__(self):
        expect = self.channel_a.output_dim + self._width_b()
        if self.merge.input_width != expect:
            raise NetworkError(f"merge input width {self.merge.input_width} != {expect}")
        if len(self.merge.layers) != 1:
            raise NetworkError("merge must be a single layer")

    def _width_b(self) -> int:
        if isinstance(self.channel_b, FeatureChannel):
            return self.channel_b.width
        return self.channel_b.output_dim

    @property
    def output_dim(self) -> int:
        return self.merge.output_dim

    def channel_features(self, xa, xb) -> np.ndarray:
        """Concatenated frozen-channel outputs; ``xb`` holds item ids for a FeatureChannel."""
        fa = self.channel_a.embed(xa)
        if isinstance(self.channel_b, FeatureChannel):
            fb = self.channel_b.lookup(xb)
        else:
            fb = self.channel_b.embed(xb)
        return np.hstack([fa, fb])

    def embed(self, xa, xb) -> np.ndarray:
        return self.merge.embed(self.channel_features(xa, xb))


def init_merge(width_a: int, width_b: int, d: int, seed: int = 0, scale_rule="he") -> EmbeddingModel:
    return init_model([LayerSpec(width_a + width_b, d, "relu", 0.0)], seed, scale_rule)


def forward_combined(model: CombinedModel, xa, xb):
    """Combined embedding: ReLU(concat(f_a, f_b) @ W_merge + b_merge)."""
    return model.embed(xa, xb)


# -- artifacts ---------------------------------------------------------------

def _model_payload(model: EmbeddingModel, prefix: str = ""):
    meta = {
        f"{prefix}layers": len(model.layers),
        f"{prefix}widths": ",".join(str(w) for w in [model.input_width] + [s.output_width for s in model.specs]),
        f"{prefix}activations": ",".join(s.activation for s in model.specs),
        f"{prefix}dropout": ",".join(repr(s.dropout_rate) for s in model.specs),
        f"{prefix}seed": model.seed,
    }
    for key in sorted(model.meta):
        meta[f"{prefix}m.{key}"] = model.meta[key]
    arrays = {}
    for k, layer in enumerate(model.layers):
        arrays[f"{prefix}W{k}"] = layer.W
        arrays[f"{prefix}b{k}"] = layer.b
    return meta, arrays


def _model_from_payload(meta, arrays, prefix: str = "") -> EmbeddingModel:
    widths = [int(w) for w in meta[f"{prefix}widths"].split(",")]
    acts = meta[f"{prefix}activations"].split(",")
    drops = [float(p) for p in meta[f"{prefix}dropout"].split(",")]
    layers = []
    for k in range(int(meta[f"{prefix}layers"])):
        spec = LayerSpec(widths[k], widths[k + 1], acts[k], drops[k])
        W = arrays[f"{prefix}W{k}"].reshape(widths[k], widths[k + 1])
        layers.append(Layer(spec, W, arrays[f"{prefix}b{k}"].ravel()))
    extra = {key[len(prefix) + 2:]: v for key, v in meta.items() if key.startswith(f"{prefix}m.")}
    return EmbeddingModel(layers, int(meta[f"{prefix}seed"]), extra)


def save_model(path, model, extra_meta: dict | None = None) -> str:
    """Write an EmbeddingModel or CombinedModel artifact; returns its sha256."""
    meta = {"kind": "mlp"}
    arrays = {}
    if isinstance(model, CombinedModel):
        meta["kind"] = "combined"
        parts = [("a.", model.channel_a), ("merge.", model.merge)]
        if isinstance(model.channel_b, FeatureChannel):
            meta["b.kind"] = "features"
            meta["b.width"] = model.channel_b.width
        else:
            meta["b.kind"] = "mlp"
            parts.append(("b.", model.channel_b))
        for prefix, sub in parts:
            m, a = _model_payload(sub, prefix)
            meta.update(m)
            arrays.update(a)
    else:
        m, a = _model_payload(model)
        meta.update(m)
        arrays.update(a)
    for key, value in (extra_meta or {}).items():
        meta[f"x.{key}"] = value
    return write_artifact(path, meta, arrays)


def load_model(path, features: FeatureChannel | None = None):
    """Inverse of :func:`save_model`; returns ``(model, extra_meta)``."""
    meta, arrays = read_artifact(path)
    extra = {k[2:]: v for k, v in meta.items() if k.startswith("x.")}
    if meta.get("kind") == "combined":
        a = _model_from_payload(meta, arrays, "a.")
        merge = _model_from_payload(meta, arrays, "merge.")
        if meta["b.kind"] == "features":
            if features is None:
                raise NetworkError(f"{Path(path).name}: combined model needs its feature channel")
            b = features
        else:
            b = _model_from_payload(meta, arrays, "b.")
        return CombinedModel(a, b, merge), extra
    return _model_from_payload(meta, arrays), extra


def sparsity(F: np.ndarray) -> float:
    """Fraction of zero components in a batch of embeddings."""
    F = np.asarray(F)
    return float((F == 0).mean()) if F.size else 0.0
