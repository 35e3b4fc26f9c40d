import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgaml.errors import RateTooSmall, SingleClassLabels, SingleComponent
from kgaml.evalx import (
    SplitManifest, address_disjoint_split, addresses_of, auc_pairs, combined_split, compute_metrics, make_split,
    stratified_sample, temporal_split,
)

from conftest import make_tx
from oracles import metrics_oracle


def _ts_txs(stamps):
    return [make_tx(f"t{i:02d}", ts, f"a{i}", f"b{i}") for i, ts in enumerate(stamps)]


def test_temporal_examples():
    txs = _ts_txs(range(1, 11))
    m = temporal_split(txs, 0.8)
    assert m.train_ids == [f"t{i:02d}" for i in range(8)] and m.test_ids == ["t08", "t09"]
    assert temporal_split(list(reversed(txs)), 0.8).to_dict() == m.to_dict()
    tie = temporal_split(_ts_txs([1, 2, 3, 4, 5, 6, 7, 8, 8, 8]), 0.8)
    assert tie.test_ids == [] and len(tie.train_ids) == 10
    tie2 = temporal_split(_ts_txs([1, 2, 3, 4, 5, 6, 7, 8, 8, 9]), 0.8)
    assert tie2.test_ids == ["t09"]
    with pytest.raises(ValueError):
        temporal_split(txs[:1], 0.5)
    with pytest.raises(ValueError):
        temporal_split(txs, 1.0)


def test_address_disjoint_examples():
    big = [make_tx(f"b{i}", i, "hub", f"x{i}") for i in range(8)]
    small = [make_tx(f"s{i}", i, "p", f"q{i}") for i in range(2)]
    m = address_disjoint_split(small + big, 0.8, seed=3)
    assert sorted(m.train_ids) == sorted(t.tx_id for t in big)
    with pytest.raises(SingleComponent):
        address_disjoint_split(big, 0.8)


def test_address_disjoint_random_100():
    rng = np.random.default_rng(5)
    txs = [make_tx(f"t{i}", i, f"a{rng.integers(60)}", f"a{rng.integers(60)}") for i in range(100)]
    m = address_disjoint_split(txs, 0.7, seed=1)
    assert not addresses_of(txs, m.train_ids) & addresses_of(txs, m.test_ids)
    assert set(m.train_ids) | set(m.test_ids) == {t.tx_id for t in txs}


def test_combined_drops_shared_addresses():
    txs = [make_tx("t0", 1, "a", "b"), make_tx("t1", 2, "c", "d"), make_tx("t2", 3, "a", "z"),
           make_tx("t3", 4, "y", "x")]
    m = combined_split(txs, 0.5)
    assert m.test_ids == ["t3"] and m.params["dropped"] == 1
    assert make_split(txs, "combined", 0.5).to_dict() == m.to_dict()


def test_manifest_guards_and_io(tmp_path):
    with pytest.raises(ValueError):
        SplitManifest(["a"], ["a"], "temporal")
    m = temporal_split(_ts_txs(range(5)), 0.6)
    import json
    back = SplitManifest.from_dict(json.loads(m.save(tmp_path / "m.json").read_text()))
    assert back.checksum == m.checksum


def _labeled(n0, n1, types=("mix",)):
    txs = [make_tx(f"n{i:05d}", i, label=0) for i in range(n0)]
    txs += [make_tx(f"p{i:05d}", i, label=1, anomaly_type=types[i % len(types)]) for i in range(n1)]
    return txs


def test_stratified_examples():
    txs = _labeled(10_000, 100)
    ids = stratified_sample(txs, 0.1, seed=0)
    assert sum(i.startswith("n") for i in ids) == 1000 and sum(i.startswith("p") for i in ids) == 10
    tiny = stratified_sample(txs, 0.0001, min_per_anomaly_type=2, seed=0)
    assert sum(i.startswith("n") for i in tiny) == 1 and sum(i.startswith("p") for i in tiny) == 2
    with pytest.raises(RateTooSmall):
        stratified_sample(txs, 0.0001, min_per_anomaly_type=0)
    assert stratified_sample(txs, 0.05, seed=4) == stratified_sample(txs, 0.05, seed=4)
    multi = stratified_sample(_labeled(500, 30, ("a", "b", "c")), 0.02, min_per_anomaly_type=2, seed=1)
    by_type = {t: sum(1 for i in multi if i.startswith("p") and int(i[1:]) % 3 == k) for k, t in enumerate("abc")}
    assert all(v >= 2 for v in by_type.values())


def test_stratified_skips_unlabeled():
    txs = _labeled(50, 10) + [make_tx(f"u{i}", i, label=None) for i in range(50)]
    ids = stratified_sample(txs, 0.5, seed=0)
    assert not any(i.startswith("u") for i in ids)


def test_metrics_hand_cases():
    r = compute_metrics([1, 0, 1, 1], [1, 0, 0, 1])
    assert r.accuracy == 0.75 and abs(r.macro_f1 - 0.7333333333333333) < 1e-15
    assert r.confusion == {"tp": 2, "tn": 1, "fp": 1, "fn": 0}
    assert compute_metrics([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]).auc_roc == 0.75
    perfect = compute_metrics([0.9, 0.1, 0.7], [1, 0, 1])
    assert (perfect.accuracy, perfect.macro_precision, perfect.macro_recall, perfect.macro_f1,
            perfect.auc_roc) == (1.0, 1.0, 1.0, 1.0, 1.0)
    single = compute_metrics([0.2, 0.9], [0, 0])
    assert single.auc_roc is None and single.accuracy == 0.5
    with pytest.raises(SingleClassLabels):
        auc_pairs(np.array([0.1]), np.array([1]))
    assert compute_metrics([0.5, 0.49], [1, 0]).confusion["tp"] == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_equal_oracle(seed):
    rng = np.random.default_rng(seed)
    labels = (rng.random(200) < rng.uniform(0.05, 0.6)).astype(int)
    scores = np.round(rng.random(200), int(rng.integers(1, 4)))  # coarse grid forces ties
    got = compute_metrics(scores, labels).to_dict()
    want = metrics_oracle(scores.tolist(), labels.tolist())
    for k, v in want.items():
        assert got[k] == v, k
    assert sum(got["confusion"].values()) == 200


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_monotone_invariant(seed):
    rng = np.random.default_rng(seed)
    y = np.r_[0, 1, (rng.random(60) < 0.4).astype(int)]
    s = np.round(rng.random(62), 2)
    assert auc_pairs(s, y) == auc_pairs(np.exp(3 * s) - 7, y)


@st.composite
def split_fixtures(draw):
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 80))
    n_addr = int(rng.integers(n // 2 + 2, 3 * n))
    return [make_tx(f"t{i:03d}", int(rng.integers(0, 50)), f"a{rng.integers(n_addr)}", f"a{rng.integers(n_addr)}",
                    label=int(rng.random() < 0.2)) for i in range(n)], seed


@settings(max_examples=50, deadline=None)
@given(split_fixtures(), st.sampled_from([0.5, 0.7, 0.8]))
def test_split_invariants(fixture, frac):
    txs, seed = fixture
    ids = {t.tx_id for t in txs}
    by_id = {t.tx_id: t for t in txs}
    t = temporal_split(txs, frac)
    assert not set(t.train_ids) & set(t.test_ids) and set(t.train_ids) | set(t.test_ids) == ids
    if t.test_ids:
        assert max(by_id[i].timestamp for i in t.train_ids) <= min(by_id[i].timestamp for i in t.test_ids)
    assert len(t.train_ids) >= math.ceil(frac * len(txs))
    try:
        a = address_disjoint_split(txs, frac, seed)
    except SingleComponent:
        pass
    else:
        assert a.test_ids and not addresses_of(txs, a.train_ids) & addresses_of(txs, a.test_ids)
        assert set(a.train_ids) | set(a.test_ids) == ids
    c = combined_split(txs, frac)
    assert not addresses_of(txs, c.train_ids) & addresses_of(txs, c.test_ids)
    assert set(c.test_ids) <= set(t.test_ids)
