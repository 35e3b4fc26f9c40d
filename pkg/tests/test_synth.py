import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgaml.annotate import annotate_rule_based
from kgaml.errors import InvalidSpec
from kgaml.ingest import load_table
from kgaml.synth import (
    ANOMALOUS, FILES, MOTIF_RULE, MotifSpec, default_specs, generate_corpus, load_specs, write_corpus,
)

BASE = MotifSpec("benign_baseline", 50, 30)


def _txs_of(corpus, kind):
    ids = set(corpus.ids_of(kind))
    return [t for t in corpus.transactions if t.tx_id in ids]


def test_fan_out_shape():
    c = generate_corpus([MotifSpec("fan_out", 1, 5), BASE], seed=1)
    fan = _txs_of(c, "fan_out")
    assert len(fan) == 5
    assert len({t.from_addr for t in fan}) == 1 and len({t.to_addr for t in fan}) == 5
    assert all(t.label == 1 and t.anomaly_type == "fan_out" for t in fan)


def test_layering_shape():
    c = generate_corpus([MotifSpec("layering_chain", 1, 4), BASE], seed=2)
    chain = sorted(_txs_of(c, "layering_chain"), key=lambda t: t.timestamp)
    assert len(chain) == 4
    assert all(a.to_addr == b.from_addr for a, b in zip(chain, chain[1:]))
    assert all(a.timestamp < b.timestamp for a, b in zip(chain, chain[1:]))
    assert all(b.abs_usd_value < a.abs_usd_value for a, b in zip(chain, chain[1:]))


def test_mixing_and_self_burst():
    c = generate_corpus([MotifSpec("mixing_round", 2, 4, value_sigma=0.3), MotifSpec("self_transfer_burst", 1, 3),
                         BASE], seed=3)
    mix = _txs_of(c, "mixing_round")
    assert len({t.abs_usd_value for t in mix}) == 2
    burst = _txs_of(c, "self_transfer_burst")
    assert all(t.is_self_transfer and t.direction == "internal" for t in burst)


def test_invalid_specs():
    for bad in [MotifSpec("fan_out", 1, 1), MotifSpec("layering_chain", 1, 2), MotifSpec("nope", 1),
                MotifSpec("fan_out", -1, 3), MotifSpec("mixing_round", 1, 3, value_median=0)]:
        with pytest.raises(InvalidSpec):
            bad.validate()
    with pytest.raises(InvalidSpec):
        generate_corpus([BASE])
    with pytest.raises(InvalidSpec):
        generate_corpus([MotifSpec("fan_out", 1, 3)])
    with pytest.raises(InvalidSpec):
        default_specs(100, 0.01)


def test_default_specs_budget():
    for n, r in [(5000, 0.01), (1000, 0.02), (2000, 0.05), (600, 0.01)]:
        specs = default_specs(n, r)
        assert sum(s.n_transactions for s in specs) == n
        assert sum(s.n_transactions for s in specs if s.kind in ANOMALOUS) == round(n * r)


def test_bookkeeping(small_corpus):
    c = small_corpus
    anomalous = [t for t in c.transactions if t.label == 1]
    assert len(anomalous) == sum(1 for k in c.motif_of.values() if k in ANOMALOUS) == 20
    ann_ids = [a.tx_id for a in c.annotations]
    assert sorted(ann_ids) == sorted(t.tx_id for t in anomalous)
    assert len(set(ann_ids)) == len(ann_ids)
    assert [t.tx_id for t in c.transactions] == [t.tx_id for t in sorted(c.transactions, key=lambda t: t.timestamp)]


def test_regime_shift_is_high_value_outlier(small_corpus):
    c = small_corpus
    baseline = np.array([t.abs_usd_value for t in _txs_of(c, "benign_baseline")])
    p95 = np.percentile(baseline, 95)
    shift = _txs_of(c, "benign_regime_shift")
    assert shift and all(t.abs_usd_value >= p95 for t in shift)
    assert all(t.label == 0 for t in shift)
    surge_days = {e.event_date for e in c.events if "surge" in e.title}
    from datetime import datetime, timezone
    shift_days = {datetime.fromtimestamp(t.timestamp, tz=timezone.utc).date() for t in shift}
    assert surge_days & shift_days


def test_gold_annotations_follow_rules(small_corpus):
    c = small_corpus
    by_id = {t.tx_id: t for t in c.transactions}
    for a in c.annotations:
        rule = c.rules[MOTIF_RULE[by_id[a.tx_id].anomaly_type]]
        assert (a.anomaly_type, a.subtype_family, a.subtype) == (rule.at, rule.sf, rule.st)
        assert 1 <= len(a.keywords) <= 5


def test_rule_annotator_recovers_motifs(small_corpus):
    # chunk text for a motif's rule is enough for the annotator to reproduce the gold levels
    c = small_corpus
    by_id = {t.tx_id: t for t in c.transactions}
    for a in c.annotations[:6]:
        tx = by_id[a.tx_id]
        chunk = c.chunks[MOTIF_RULE[tx.anomaly_type]]
        got = annotate_rule_based(tx, [chunk], [], c.rules)
        assert got.subtype == a.subtype


def test_write_and_reload_bit_identical(tmp_path):
    specs = default_specs(600, 0.02)
    c = generate_corpus(specs, seed=7)
    d1 = write_corpus(c, tmp_path / "a", specs, 7)
    d2 = write_corpus(generate_corpus(specs, seed=7), tmp_path / "b", specs, 7)
    for name in list(FILES.values()) + ["rules.json", "corpus.json"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert d1 is not None and d2 is not None
    loaded = load_table("tx", tmp_path / "a" / FILES["tx"])
    assert loaded.rejects == [] and loaded.records == c.transactions
    assert load_table("annotation", tmp_path / "a" / FILES["annotation"]).records == c.annotations
    assert load_table("event", tmp_path / "a" / FILES["event"]).records == c.events
    specs2, seed = load_specs(tmp_path / "a" / "corpus.json")
    assert specs2 == specs and seed == 7


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 3), st.integers(0, 1000))
def test_label_counts_match_specs(n_fan, n_layer, n_mix, n_burst, seed):
    specs = [MotifSpec("fan_out", n_fan, 3), MotifSpec("layering_chain", n_layer, 3),
             MotifSpec("mixing_round", n_mix, 3), MotifSpec("self_transfer_burst", n_burst, 2), BASE]
    if n_fan + n_layer + n_mix + n_burst == 0:
        with pytest.raises(InvalidSpec):
            generate_corpus(specs, seed=seed)
        return
    c = generate_corpus(specs, seed=seed)
    assert sum(c.labels.values()) == sum(s.n_transactions for s in specs if s.kind in ANOMALOUS)
    assert len(c.transactions) == sum(s.n_transactions for s in specs)
    assert all(t.is_self_transfer == (t.from_addr == t.to_addr) for t in c.transactions)
