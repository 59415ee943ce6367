import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fdna.catalog import (
    FAMILY_ORDER, AttributeVocabulary, CatalogError, Item, assign_derived_labels, build_vocabulary,
    cluster_fabrics, cluster_prices, encode_item, encode_items, item_from_record, kmeans, nearest_centroid, read_catalog,
    read_vocabulary, split_items, write_catalog, write_vocabulary,
)

TABLE1 = {"brand": 2401, "commodity_group": 1224, "main_color": 75, "pattern": 47,
          "price_cluster": 28, "fabric_cluster": 80}


def test_table1_layout_length():
    vocab = AttributeVocabulary.from_counts(TABLE1)
    assert vocab.length == 3855
    offsets = [f.offset for f in vocab.families]
    assert offsets == [0, 2401, 3625, 3700, 3747, 3775]


def test_table1_brand_zero_only():
    vocab = AttributeVocabulary.from_counts(TABLE1)
    row = encode_item(Item("x", {"brand": 0}), vocab)
    assert row.shape == (1, 3855)
    assert row.indices.tolist() == [0]


def test_single_class_vocabulary():
    items = [Item(f"i{n}", {"brand": "acme"}) for n in range(3)]
    vocab = build_vocabulary(items, min_class_support=3)
    assert vocab.length == 1
    assert encode_item(items[0], vocab).toarray().tolist() == [[1.0]]


def test_rare_class_dropped_and_encodes_zero():
    items = [Item(f"i{n}", {"brand": "big", "main_color": "red"}) for n in range(97)]
    items += [Item(f"r{n}", {"brand": "tiny", "main_color": "red"}) for n in range(3)]
    counts = {}
    for it in items:
        counts[it.tags["brand"]] = counts.get(it.tags["brand"], 0) + 1
    assert counts == {"big": 97, "tiny": 3}
    vocab = build_vocabulary(items, min_class_support=50)
    assert vocab.family("brand").labels == ("big",)
    X = encode_items(items, vocab).toarray()
    brand_block = X[:, vocab.family("brand").offset:vocab.family("brand").offset + 1]
    assert brand_block[:97].sum() == 97
    assert brand_block[97:].sum() == 0


def test_empty_catalog_rejected():
    with pytest.raises(CatalogError):
        build_vocabulary([])


def test_class_order_frequency_then_label():
    tags = ["b"] * 3 + ["a"] * 3 + ["c"] * 5
    items = [Item(str(n), {"brand": t}) for n, t in enumerate(tags)]
    vocab = build_vocabulary(items, min_class_support=1)
    assert vocab.family("brand").labels == ("c", "a", "b")


def test_six_and_four_nonzeros():
    vocab = AttributeVocabulary.from_counts({name: 3 for name in FAMILY_ORDER})
    full = Item("a", {name: 1 for name in FAMILY_ORDER})
    assert encode_item(full, vocab).nnz == 6
    partial = Item("b", {name: 2 for name in FAMILY_ORDER if name not in ("pattern", "fabric_cluster")})
    row = encode_item(partial, vocab).toarray().ravel()
    assert np.count_nonzero(row) == 4
    for name in ("pattern", "fabric_cluster"):
        fam = vocab.family(name)
        assert not row[fam.offset:fam.offset + fam.class_count].any()


def test_index_out_of_range():
    vocab = AttributeVocabulary.from_counts({"brand": 2})
    with pytest.raises(CatalogError):
        encode_item(Item("a", {"brand": 2}), vocab)


def test_vocabulary_idempotent_and_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    items = [Item(str(n), {"brand": f"b{rng.integers(6)}", "pattern": f"p{rng.integers(3)}"}) for n in range(200)]
    v1 = build_vocabulary(items, 10)
    v2 = build_vocabulary(items, 10)
    assert v1 == v2
    write_vocabulary(tmp_path / "v.tsv", v1)
    v3 = read_vocabulary(tmp_path / "v.tsv")
    assert v3.families == v1.families
    assert v3.checksum() == v1.checksum()


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4), st.booleans()), min_size=1, max_size=60),
       st.integers(1, 5))
def test_encoding_invariants(rows, support):
    items = [Item(str(n), {"brand": f"b{a}", "main_color": f"c{c}"} if has else {"brand": f"b{a}"})
             for n, (a, c, has) in enumerate(rows)]
    try:
        vocab = build_vocabulary(items, support)
    except CatalogError:
        return
    assert vocab.length == sum(f.class_count for f in vocab.families)
    ends = [f.offset + f.class_count for f in vocab.families]
    assert [f.offset for f in vocab.families] == [0] + ends[:-1]
    X = encode_items(items, vocab)
    assert np.all(X.data == 1.0)
    per_row = np.diff(X.indptr)
    assert per_row.min() >= 0 and per_row.max() <= 6


# -- k-means ---------------------------------------------------------------

def test_kmeans_single_cluster_is_mean_log_price():
    prices = [10.0, 20.0, 55.0, 80.0]
    items = [Item(str(n), raw_price=p) for n, p in enumerate(prices)]
    assign, excluded = cluster_prices(items, 1)
    assert set(assign.values()) == {0} and excluded == []
    res = kmeans(np.log(prices), 1)
    np.testing.assert_allclose(res.centroids[0, 0], np.mean(np.log(prices)), rtol=1e-14)


def _best_two_partition(x):
    # brute-force every bipartition for the minimum within-cluster inertia
    best = None
    for mask in itertools.product([0, 1], repeat=len(x)):
        m = np.array(mask, dtype=bool)
        if m.all() or not m.any():
            continue
        cost = ((x[m] - x[m].mean()) ** 2).sum() + ((x[~m] - x[~m].mean()) ** 2).sum()
        if best is None or cost < best[0] - 1e-12:
            best = (cost, m)
    return best


def test_price_two_groups_match_enumeration():
    prices = [10, 10, 10, 1000, 1000, 1000]
    items = [Item(str(n), raw_price=p) for n, p in enumerate(prices)]
    assign, _ = cluster_prices(items, 2, seed=4)
    labels = np.array([assign[str(n)] for n in range(6)])
    cost, mask = _best_two_partition(np.log(np.array(prices, dtype=float)))
    assert cost == pytest.approx(0.0)
    assert len(set(labels[mask])) == 1 and len(set(labels[~mask])) == 1
    assert labels[0] != labels[3]


def test_nonpositive_price_excluded():
    items = [Item("a", raw_price=5.0), Item("b", raw_price=0.0), Item("c", raw_price=7.0), Item("d")]
    assign, excluded = cluster_prices(items, 2)
    assert sorted(assign) == ["a", "c"]
    assert excluded == ["b", "d"]


def test_k_exceeds_distinct_prices():
    items = [Item(str(n), raw_price=9.99) for n in range(5)]
    with pytest.raises(CatalogError):
        cluster_prices(items, 2)


def test_fabric_pure_groups():
    items = [Item(f"c{n}", fiber_composition={"cotton": 1.0}) for n in range(4)]
    items += [Item(f"w{n}", fiber_composition={"wool": 1.0}) for n in range(4)]
    items.append(Item("none"))
    assign = cluster_fabrics(items, 2, seed=1)
    assert "none" not in assign
    assert len({assign[f"c{n}"] for n in range(4)}) == 1
    assert len({assign[f"w{n}"] for n in range(4)}) == 1
    assert assign["c0"] != assign["w0"]


def test_fabric_single_cluster_centroid_is_mean():
    comps = [{"cotton": 0.5, "wool": 0.5}, {"cotton": 1.0}, {"silk": 0.2, "wool": 0.8}]
    X = np.array([[0.5, 0.0, 0.5], [1.0, 0.0, 0.0], [0.0, 0.2, 0.8]])
    res = kmeans(X, 1)
    np.testing.assert_allclose(res.centroids[0], X.mean(axis=0), rtol=1e-14)
    assert set(cluster_fabrics([Item(str(n), fiber_composition=c) for n, c in enumerate(comps)], 1).values()) == {0}


def test_nearest_centroid_tie_goes_to_lowest_index():
    X = np.array([[1.0], [0.0], [2.0]])
    C = np.array([[2.0], [0.0]])
    assert nearest_centroid(X, C).tolist() == [0, 1, 0]
    C3 = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    assert nearest_centroid(np.array([[0.5, 0.5]]), C3).tolist() == [0]


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_inertia_non_increasing(seed, k):
    X = np.random.default_rng(seed).normal(size=(40, 3))
    res = kmeans(X, k, seed=seed)
    h = np.array(res.inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))
    assert res.converged


def test_assign_derived_labels_format():
    items = [Item(str(n), raw_price=float(p), fiber_composition={"cotton": 1.0} if n % 2 else None)
             for n, p in enumerate([5, 6, 50, 55, 500, 520])]
    assign_derived_labels(items, price_k=3, fabric_k=4, seed=0)
    assert all(it.tags["price_cluster"].startswith("p") for it in items)
    assert [it.tags.get("fabric_cluster") for it in items] == [None, "f00", None, "f00", None, "f00"]


# -- split -------------------------------------------------------------------

def test_split_90_10_deterministic():
    ids = list(range(100))
    t1, v1 = split_items(ids, 0.1, seed=5)
    t2, v2 = split_items(ids, 0.1, seed=5)
    assert (len(t1), len(v1)) == (90, 10)
    assert (t1, v1) == (t2, v2)


@given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 100))
def test_split_partitions(n, frac, seed):
    train, val = split_items(list(range(n)), frac, seed)
    assert set(train) | set(val) == set(range(n))
    assert not set(train) & set(val)
    assert abs(len(val) - frac * n) <= 1 or len(val) in (1, n - 1)


def test_split_needs_two_items():
    with pytest.raises(CatalogError):
        split_items([1], 0.1)


# -- ingestion ----------------------------------------------------------------

def test_catalog_roundtrip(tmp_path):
    path = tmp_path / "catalog.jsonl"
    path.write_text(
        json.dumps({"item_id": "a", "brand": "x", "commodity_group": "shoe", "color": "red",
                    "price": 19.9, "fibers": {"cotton": 0.6, "wool": 0.4}}) + "\n"
        + json.dumps({"item_id": "b", "brand": "y", "pattern": "dots"}) + "\n", encoding="utf-8")
    items = read_catalog(path)
    assert items[0].tags == {"brand": "x", "commodity_group": "shoe", "main_color": "red"}
    assert items[0].raw_price == 19.9
    assert items[1].fiber_composition is None
    write_catalog(tmp_path / "out.jsonl", items)
    again = read_catalog(tmp_path / "out.jsonl")
    assert [(i.item_id, i.tags, i.raw_price, i.fiber_composition) for i in again] == \
        [(i.item_id, i.tags, i.raw_price, i.fiber_composition) for i in items]


def test_duplicate_id_rejected(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text('{"item_id": "a"}\n{"item_id": "a"}\n', encoding="utf-8")
    with pytest.raises(CatalogError, match="duplicate"):
        read_catalog(path)


def test_bad_fiber_sum():
    with pytest.raises(CatalogError):
        item_from_record({"item_id": "a", "fibers": {"cotton": 0.5, "wool": 0.4}})


def test_generated_catalog_matches_shipped_schema(tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    import json
    from pathlib import Path

    from fdna import synthetic

    schema = json.loads((Path(__file__).parents[1] / "docs" / "catalog.schema.json").read_text())
    path = tmp_path / "catalog.jsonl"
    write_catalog(path, synthetic.generate_world(80, 20, 3, seed=0).items())
    for line in path.read_text().splitlines():
        jsonschema.validate(json.loads(line), schema)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"brand": "x"}, schema)
