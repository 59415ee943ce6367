"""Glue between catalog, purchases, network and training for whole runs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import catalog, network, training
from .catalog import AttributeVocabulary, Item
from .network import CombinedModel, EmbeddingModel, FeatureChannel
from .purchases import PurchaseMatrix, QuadrantSplit, quadrant, split_customers

CHANNELS = ("attribute", "precomputed", "combined")


@dataclass
class Dataset:
    items: list
    matrix: PurchaseMatrix
    vocab: AttributeVocabulary
    X_attr: object                 # CSR, rows in matrix item order
    split: QuadrantSplit
    features: FeatureChannel | None = None
    params: dict = field(default_factory=dict)

    def inputs(self, channel: str):
        if channel == "attribute":
            return self.X_attr
        if channel == "precomputed":
            if self.features is None:
                raise ValueError("no precomputed feature channel loaded")
            return self.features.lookup(self.matrix.items)
        raise ValueError(f"channel {channel!r} has no direct input")


def prepare_dataset(items: list, matrix: PurchaseMatrix, *, price_clusters: int = 28,
                    fabric_clusters: int = 80, min_class_support: int = 50,
                    item_validation_fraction: float = 0.1, customer_validation_fraction: float = 0.1,
                    seed: int = 0, features: FeatureChannel | None = None,
                    vocab: AttributeVocabulary | None = None) -> Dataset:
    """Derive labels, build (or reuse) the vocabulary, encode, and split.

    Items are reordered to match the matrix rows.
    """
    by_id = {it.item_id: it for it in items}
    missing = [i for i in matrix.items if i not in by_id]
    if missing:
        raise ValueError(f"purchase matrix names item {missing[0]!r} absent from the catalog")
    ordered = [by_id[i] for i in matrix.items]
    catalog.assign_derived_labels(ordered, price_clusters, fabric_clusters, seed)
    if vocab is None:
        vocab = catalog.build_vocabulary(ordered, min_class_support)
    X = catalog.encode_items(ordered, vocab)
    pos = list(range(len(ordered)))
    train_pos, val_pos = catalog.split_items(pos, item_validation_fraction, seed)
    split = split_customers(matrix, customer_validation_fraction, seed,
                            np.array(train_pos, dtype=np.int64), np.array(val_pos, dtype=np.int64))
    params = dict(price_clusters=price_clusters, fabric_clusters=fabric_clusters,
                  min_class_support=min_class_support, item_validation_fraction=item_validation_fraction,
                  customer_validation_fraction=customer_validation_fraction, seed=seed)
    return Dataset(ordered, matrix, vocab, X, split, features, params)


@dataclass
class ModelConfig:
    d: int = 256
    widths: tuple | None = None      # hidden widths; None means a 4-layer taper
    n_layers: int = 4
    dropout: float = 0.5
    seed: int = 0
    scale_rule: str = "he"

    def layer_widths(self, input_width: int) -> list:
        if self.widths:
            return [input_width] + list(self.widths) + [self.d]
        return network.taper_widths(input_width, self.d, self.n_layers)


@dataclass
class TrainedRun:
    channel: str
    model: object                    # EmbeddingModel or CombinedModel
    bank_train: training.CustomerBank
    bank_val: training.CustomerBank
    fdna: np.ndarray                 # embeddings of every item, matrix order
    result: training.TrainResult
    fit: training.CustomerFit

    @property
    def banks(self) -> dict:
        return {"t": self.bank_train, "v": self.bank_val}


def embed_all(model, data: Dataset, channel: str) -> np.ndarray:
    if isinstance(model, CombinedModel):
        xb = data.matrix.items if isinstance(model.channel_b, FeatureChannel) else data.inputs("precomputed")
        return model.embed(data.X_attr, xb)
    return model.embed(data.inputs(channel))


def merge_inputs(a: EmbeddingModel, b, data: Dataset) -> np.ndarray:
    fa = a.embed(data.X_attr)
    fb = b.lookup(data.matrix.items) if isinstance(b, FeatureChannel) else b.embed(data.inputs("precomputed"))
    return np.hstack([fa, fb])


def train_channel(data: Dataset, channel: str, model_cfg: ModelConfig, train_cfg: training.TrainConfig,
                  fit_lambda: float = 1e-4, channel_a: EmbeddingModel | None = None, channel_b=None,
                  init: EmbeddingModel | None = None) -> TrainedRun:
    """Train one of the three models on the tt block, then fit validation customers.

    The combined model needs frozen ``channel_a`` (attribute) and
    ``channel_b`` (precomputed-feature model or raw feature channel); only its
    merge layer is trained.
    """
    if channel not in CHANNELS:
        raise ValueError(f"unknown channel {channel!r}")
    split = data.split
    if channel == "combined":
        if channel_a is None or channel_b is None:
            raise ValueError("combined model needs both trained channels")
        X = merge_inputs(channel_a, channel_b, data)
        width_b = channel_b.width if isinstance(channel_b, FeatureChannel) else channel_b.output_dim
        base = init or network.init_merge(channel_a.output_dim, width_b, model_cfg.d, model_cfg.seed,
                                          model_cfg.scale_rule)
    else:
        X = data.inputs(channel)
        specs = network.layer_specs(model_cfg.layer_widths(X.shape[1]), model_cfg.dropout)
        base = init or network.init_model(specs, model_cfg.seed, model_cfg.scale_rule)
    tt = quadrant(data.matrix, split, "tt")
    train_ids = [data.matrix.customers[j] for j in split.customer_train]
    result = training.train(base, X[tt.items], tt.matrix, train_cfg, customer_ids=train_ids)
    if channel == "combined":
        model = CombinedModel(channel_a, channel_b, result.model)
    else:
        model = result.model
    F = result.model.embed(X)
    tv = quadrant(data.matrix, split, "tv")
    val_ids = [data.matrix.customers[j] for j in split.customer_val]
    fit = training.fit_customers(F[split.item_train], tv.matrix, lam=fit_lambda, customer_ids=val_ids)
    return TrainedRun(channel, model, result.bank, fit.bank, F, result, fit)


def items_from_world(world) -> list[Item]:
    return world.items()
