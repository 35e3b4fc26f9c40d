import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgaml.embed import EmbeddingTable, pool_path
from kgaml.errors import DimMismatch, EmptyTrain, LeakageError
from kgaml.features import MODES, FeatureEncoder, build_unified, feature_matrix, fit_encoder
from kgaml.kg import build_concept_graph, induce_logic_path
from kgaml.rgc import RetrievedContext

from conftest import make_ann, make_tx


def _train(coins=("btc", "eth")):
    return [make_tx(f"t{i}", 1_600_000_000 + 9_000 * i, f"a{i}", f"b{i}", 10.0 * (i + 1), coin=coins[i % len(coins)],
                    split="train", label=i % 2, anomaly_type="x" if i % 2 else None) for i in range(10)]


def _setup(dim=4):
    graph = build_concept_graph([make_ann("t0"), make_ann("t1", st="peel", kws=("hop",))])
    rng = np.random.default_rng(0)
    table = EmbeddingTable(dim, [n.node_id for n in graph.nodes], rng.normal(size=(len(graph.nodes), dim)))
    ctx = RetrievedContext("t0", [("e1", 0.5)], rng.normal(size=dim))
    return graph, table, ctx


def test_unseen_category_and_widths():
    enc = fit_encoder(_train(), concept_dim=4, context_dim=4)
    assert enc.coins == ["btc", "eth"]
    block = enc.categorical(make_tx(coin="sol"))
    coin = block[len(enc.directions): len(enc.directions) + 2]
    assert coin.tolist() == [0.0, 0.0]
    assert enc.width == 7 + enc.categorical_width + 8


def test_constant_column_and_standardization():
    train = [make_tx(f"t{i}", 1_600_000_000 + 777 * i, value=5.0, split="train") for i in range(6)]
    enc = fit_encoder(train)
    assert enc.stds[0] == 1.0 and enc.stds[1] == 1.0
    tr = _train()
    enc = fit_encoder(tr)
    Z = np.stack([enc.numeric(t)[:2] for t in tr])
    assert np.allclose(Z.mean(axis=0), 0, atol=1e-9) and np.allclose(Z.std(axis=0), 1, atol=1e-9)


def test_encoder_guards():
    with pytest.raises(EmptyTrain):
        fit_encoder([])
    with pytest.raises(LeakageError):
        fit_encoder([make_tx(split="test")])


def test_modes():
    graph, table, ctx = _setup()
    enc = fit_encoder(_train(), concept_dim=4, context_dim=4)
    tx = _train()[0]
    path = induce_logic_path(make_ann("t0"), graph)
    sl = enc.block_slices()
    fo = build_unified(tx, None, None, None, "feature_only", enc)
    assert not fo.r[sl["concept"]].any() and not fo.r[sl["context"]].any()
    kg = build_unified(tx, path, table, ctx, "kg", enc)
    assert np.array_equal(kg.r[sl["concept"]], pool_path(path, table))
    assert not kg.r[sl["context"]].any()
    cs = build_unified(tx, path, table, ctx, "kg_cs", enc)
    assert np.array_equal(cs.r[sl["context"]], ctx.context_vector)
    novel = induce_logic_path(make_ann("t9", at="new", sf="new", st="new", kws=("new",), split="test"), graph)
    assert not build_unified(tx, novel, table, ctx, "kg", enc).r[sl["concept"]].any()
    with pytest.raises(DimMismatch):
        build_unified(tx, path, EmbeddingTable(3, [0], [[1, 2, 3]]), ctx, "kg", enc)
    with pytest.raises(ValueError):
        build_unified(tx, path, table, ctx, "other", enc)


def test_encoder_round_trip():
    enc = fit_encoder(_train(), 8, 8)
    back = FeatureEncoder.from_dict(enc.to_dict())
    tx = make_tx(coin="eth", value=123.0)
    assert np.array_equal(back.numeric(tx), enc.numeric(tx))
    assert np.array_equal(back.categorical(tx), enc.categorical(tx))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2_000_000_000), st.floats(0, 1e8), st.sampled_from(["btc", "eth", "sol"]),
       st.sampled_from(["in", "out", "internal"]), st.booleans(), st.sampled_from([0, 1, None]))
def test_width_nesting_and_no_label_leak(ts, value, coin, direction, self_tx, label):
    graph, table, ctx = _setup()
    enc = fit_encoder(_train(), concept_dim=4, context_dim=4)
    tx = make_tx("q", ts, "a", "a" if self_tx else "b", value, direction, coin, label=label,
                 anomaly_type="mixing" if label else None)
    path = induce_logic_path(make_ann("q", split="test"), graph)
    rows = {m: build_unified(tx, path, table, ctx, m, enc).r for m in MODES}
    assert len({len(r) for r in rows.values()}) == 1
    assert all(np.isfinite(r).all() for r in rows.values())
    sl = enc.block_slices()
    prefix = slice(0, sl["categorical"].stop)
    assert np.array_equal(rows["feature_only"][prefix], rows["kg"][prefix])
    assert np.array_equal(rows["kg"][: sl["context"].start], rows["kg_cs"][: sl["context"].start])
    stripped = dataclasses.replace(tx, label=None, anomaly_type=None)
    assert np.array_equal(build_unified(stripped, path, table, ctx, "kg_cs", enc).r, rows["kg_cs"])
    assert feature_matrix([build_unified(tx, path, table, ctx, "kg", enc)]).shape == (1, enc.width)
