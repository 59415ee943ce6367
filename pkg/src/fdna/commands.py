"""Implementations behind the ``fdna`` command line.

Each command reads its inputs from files, writes its outputs to files, and
records its resolved configuration next to them. Wall-clock time goes to a
separate ``timing.txt`` so that all other outputs are byte-stable.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from pathlib import Path

import numpy as np

from . import catalog, evaluation, network, pipeline, purchases, similarity, synthetic, training
from .artifacts import atomic_write_text, sha256_file
from .embedding_map import TsneConfig, format_kl, format_map, sample_items, tsne

CATALOG = "catalog.jsonl"
PURCHASES = "purchases.csv"
FEATURES = "features.tsv"
WORLD = "world.fdna"


class DataError(ValueError):
    """Bad or inconsistent input files; maps to exit code 3."""


def _config_text(args, drop=("func", "threads", "command")) -> str:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in drop}
    return json.dumps(resolved, indent=2, sort_keys=True) + "\n"


def _emit(path: Path, text: str, args) -> None:
    atomic_write_text(path, text)
    atomic_write_text(path.with_name(path.name + ".config.json"), _config_text(args))
    print(text, end="")


# -- data ------------------------------------------------------------------------

def load_data(data_dir):
    data_dir = Path(data_dir)
    for name in (CATALOG, PURCHASES):
        if not (data_dir / name).is_file():
            raise DataError(f"{data_dir / name} not found")
    items = catalog.read_catalog(data_dir / CATALOG)
    customers = sorted(set(purchases.customers_in(data_dir / PURCHASES)))
    matrix = purchases.load_purchases(purchases.read_purchase_records(data_dir / PURCHASES),
                                      [it.item_id for it in items], customers)
    features = network.read_features(data_dir / FEATURES) if (data_dir / FEATURES).is_file() else None
    return items, matrix, features


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise DataError(f"output directory {out} does not exist")
    world = synthetic.generate_world(args.items, args.customers, args.rank, noise_level=args.noise,
                                     target_density=args.density, seed=args.seed,
                                     tau_a=args.tau_a, tau_b=args.tau_b)
    matrix = synthetic.sample_purchases(world, args.seed)
    # everything lands in a scratch directory first; nothing is moved unless all writes succeed
    with tempfile.TemporaryDirectory(dir=out, prefix=".gen-data-") as tmp:
        tmp = Path(tmp)
        catalog.write_catalog(tmp / CATALOG, world.items())
        purchases.write_purchases(tmp / PURCHASES, matrix)
        network.write_features(tmp / FEATURES, world.feature_channel())
        synthetic.save_world(tmp / WORLD, world)
        (tmp / "gen-data.config.json").write_text(_config_text(args), encoding="utf-8")
        names = sorted(os.listdir(tmp))
        for name in names:
            os.replace(tmp / name, out / name)
    print(f"# gen-data: {world.n_items} items, {len(matrix.customers)} customers with purchases, "
          f"{matrix.nnz} purchases")
    for name in names:
        print(f"{sha256_file(out / name)}  {name}")
    return 0


# -- training --------------------------------------------------------------------

def _data_params(args) -> dict:
    return dict(data=str(args.data), price_clusters=args.price_clusters, fabric_clusters=args.fabric_clusters,
                min_class_support=args.min_support, item_validation_fraction=args.item_validation,
                customer_validation_fraction=args.customer_validation, seed=args.split_seed)


def _prepare_run(args):
    """Load and split the data; nothing is written yet."""
    run = Path(args.run)
    if not run.parent.is_dir():
        raise DataError(f"parent of run directory {run} does not exist")
    items, matrix, features = load_data(args.data)
    params = _data_params(args)
    recorded = run / "dataset.json"
    if recorded.exists() and json.loads(recorded.read_text(encoding="utf-8")) != params:
        raise DataError(f"{run} was prepared with different data flags (see {recorded})")
    kw = {k: v for k, v in params.items() if k != "data"}
    data = pipeline.prepare_dataset(items, matrix, features=features, **kw)
    return run, data, params


def _record_run(run: Path, data, params: dict) -> None:
    run.mkdir(exist_ok=True)
    atomic_write_text(run / "dataset.json", json.dumps(params, indent=2, sort_keys=True) + "\n")
    catalog.write_vocabulary(run / "vocab.tsv", data.vocab)
    purchases.write_split_manifest(run / "split.txt", data.matrix, data.split, {"seed": params["seed"]})


def _load_channel_model(run: Path, channel: str, features=None):
    path = run / channel / "model.fdna"
    if not path.is_file():
        raise DataError(f"{path} not found; train the {channel} channel first")
    return network.load_model(path, features)


def cmd_train(args) -> int:
    started = time.perf_counter()
    run, data, params = _prepare_run(args)
    checksum = data.vocab.checksum()
    widths = tuple(int(w) for w in args.widths.split(",")) if args.widths else None
    model_cfg = pipeline.ModelConfig(d=args.d, widths=widths, n_layers=args.layers, dropout=args.dropout,
                                     seed=args.seed)
    train_cfg = training.TrainConfig(
        learning_rate=args.learning_rate, momentum=args.momentum, optimizer=args.optimizer,
        epochs=args.epochs, item_batch_size=args.batch_size, negative_subsample=args.negatives,
        seed=args.seed, weight_init_sigma=args.init_sigma, customer_l2=args.customer_l2)

    init = None
    if args.resume:
        previous, extra = _load_channel_model(run, args.channel, data.features)
        if extra.get("vocab_checksum") != checksum:
            raise DataError(f"cannot resume: model vocabulary checksum {extra.get('vocab_checksum')} "
                            f"does not match data vocabulary checksum {checksum}")
        init = previous.merge if isinstance(previous, network.CombinedModel) else previous

    channel_a = channel_b = None
    if args.channel == "combined":
        channel_a, extra_a = _load_channel_model(run, "attribute")
        channel_b, _ = _load_channel_model(run, "precomputed")
        if extra_a.get("vocab_checksum") != checksum:
            raise DataError(f"attribute model vocabulary checksum {extra_a.get('vocab_checksum')} "
                            f"does not match data vocabulary checksum {checksum}")

    result = pipeline.train_channel(data, args.channel, model_cfg, train_cfg, args.fit_lambda,
                                    channel_a, channel_b, init)
    _record_run(run, data, params)
    out = run / args.channel
    out.mkdir(exist_ok=True)
    meta = {"vocab_checksum": checksum, "channel": args.channel}
    network.save_model(out / "model.fdna", result.model, meta)
    training.save_bank(out / "bank_train.fdna", result.bank_train)
    training.save_bank(out / "bank_val.fdna", result.bank_val)
    similarity.save_store(out / "fdna.emb", similarity.EmbeddingStore(list(data.matrix.items), result.fdna))

    hist = result.result.loss_history
    running = [None] + list(result.result.epoch_losses)
    lines = ["epoch\texact_loss\trunning_loss"]
    lines += [f"{e}\t{h!r}\t{'-' if r is None else repr(r)}" for e, (h, r) in enumerate(zip(hist, running))]
    atomic_write_text(out / "loss.tsv", "\n".join(lines) + "\n")
    summary = [
        f"channel {args.channel}",
        f"vocab_checksum {checksum}",
        f"vocab_length {data.vocab.length}",
        f"initial_loss {hist[0]!r}",
        f"final_loss {hist[-1]!r}",
        f"clamp_count {result.result.clamp_count}",
        f"fit_converged {int(result.fit.converged.sum())}/{len(result.fit.converged)}",
        f"sparsity {network.sparsity(result.fdna)!r}",
    ]
    atomic_write_text(out / "manifest.txt", "\n".join(summary) + "\n")
    atomic_write_text(out / "config.json", _config_text(args))
    atomic_write_text(out / "timing.txt", f"wall_seconds {time.perf_counter() - started:.3f}\n")
    print("\n".join(summary))
    return 0


# -- reports ---------------------------------------------------------------------

class RunContext:
    def __init__(self, run):
        self.run = Path(run)
        params_path = self.run / "dataset.json"
        if not params_path.is_file():
            raise DataError(f"{self.run} is not a run directory (no dataset.json)")
        self.params = json.loads(params_path.read_text(encoding="utf-8"))
        self.items, self.matrix, self.features = load_data(self.params["data"])
        self.split, _ = purchases.read_split_manifest(self.run / "split.txt", self.matrix)

    def channels(self) -> list:
        return [c for c in pipeline.CHANNELS if (self.run / c / "fdna.emb").is_file()]

    def store(self, channel: str) -> similarity.EmbeddingStore:
        path = self.run / channel / "fdna.emb"
        if not path.is_file():
            raise DataError(f"{path} not found; train the {channel} channel first")
        store = similarity.load_store(path)
        if list(store.item_ids) != list(self.matrix.items):
            raise DataError(f"{path} does not match the catalog item order")
        return store

    def banks(self, channel: str) -> dict:
        return {"t": training.load_bank(self.run / channel / "bank_train.fdna"),
                "v": training.load_bank(self.run / channel / "bank_val.fdna")}


def _out_path(args, ctx: RunContext, default: str) -> Path:
    return Path(args.out) if args.out else ctx.run / default


def cmd_evaluate(args) -> int:
    ctx = RunContext(args.run)
    channels = ctx.channels()
    if not channels:
        raise DataError(f"no trained channels in {ctx.run}")
    table = evaluation.AucTable()
    quads = args.quadrant or list(purchases.QUADRANTS)
    for ch in channels:
        F, banks = ctx.store(ch).vectors, ctx.banks(ch)
        for q in quads:
            table.add(ch, q, evaluation.quadrant_auc(F, banks, ctx.matrix, ctx.split, q, args.pairs, args.seed))
    _emit(_out_path(args, ctx, "evaluate.tsv"), table.format(), args)
    return 0


def cmd_calibrate(args) -> int:
    ctx = RunContext(args.run)
    F, banks = ctx.store(args.channel).vectors, ctx.banks(args.channel)
    z, y = evaluation.quadrant_scores(F, banks, ctx.matrix, ctx.split, args.quadrant, args.pairs, args.seed)
    report = evaluation.calibrate(training.sigmoid(z), y, args.bins)
    _emit(_out_path(args, ctx, f"{args.channel}/calibration_{args.quadrant}.tsv"),
          evaluation.format_calibration(report), args)
    return 0


def cmd_recommend(args) -> int:
    ctx = RunContext(args.run)
    F, banks = ctx.store(args.channel).vectors, ctx.banks(args.channel)
    bank = col = None
    for side in "tv":
        ids = banks[side].customer_ids or []
        if args.customer in ids:
            bank, col = banks[side], ids.index(args.customer)
    if bank is None:
        raise DataError(f"customer {args.customer!r} is in neither customer bank")
    rows = {"training": ctx.split.item_train, "validation": ctx.split.item_val,
            "all": np.arange(len(ctx.matrix.items))}[args.items]
    if len(rows) == 0:
        raise DataError(f"no {args.items} items")
    p = training.sigmoid(F[rows] @ bank.weights[col] + bank.biases[col])
    ids = np.array([ctx.matrix.items[i] for i in rows], dtype=object).astype(str)
    order = np.lexsort((ids, -p))[:args.top]
    cpos = ctx.matrix.customers.index(args.customer)
    bought = set(ctx.matrix.matrix[:, cpos].nonzero()[0].tolist())
    lines = ["customer_id\trank\titem_id\tprobability\tpurchased"]
    for rank, o in enumerate(order, 1):
        lines.append(f"{args.customer}\t{rank}\t{ids[o]}\t{float(p[o])!r}\t{int(rows[o] in bought)}")
    _emit(_out_path(args, ctx, f"{args.channel}/recommend_{args.customer}.tsv"), "\n".join(lines) + "\n", args)
    return 0


def cmd_neighbors(args) -> int:
    ctx = RunContext(args.run)
    store = ctx.store(args.channel)
    results = [similarity.nearest_neighbors(i, store, args.k) for i in args.item]
    name = "neighbors.tsv" if len(args.item) > 1 else f"neighbors_{args.item[0]}.tsv"
    _emit(_out_path(args, ctx, f"{args.channel}/{name}"), similarity.format_neighbors(results), args)
    return 0


def cmd_map(args) -> int:
    ctx = RunContext(args.run)
    store = ctx.store(args.channel)
    ids = sample_items(list(ctx.matrix.items), args.n, args.min_sales, ctx.matrix.item_counts(), args.seed)
    config = TsneConfig(perplexity=args.perplexity, iterations=args.iterations,
                        learning_rate=args.learning_rate, seed=args.seed, metric=args.metric)
    result = tsne(store.subset(ids).vectors, config)
    out = _out_path(args, ctx, f"{args.channel}/map.tsv")
    atomic_write_text(out.with_name(out.stem + "_kl.tsv"), format_kl(result.kl_history))
    _emit(out, format_map(ids, result.coordinates), args)
    return 0
