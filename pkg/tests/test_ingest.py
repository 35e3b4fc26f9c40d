import json
from datetime import date

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgaml.errors import DuplicateId, MissingColumn, ParseError
from kgaml.ingest import (
    AnnotationRecord, EventDoc, KnowledgeChunk, load_table, parse_timestamp, validate_consistency, write_table,
)

from conftest import make_ann, make_tx

TX_HEADER = "tx_id,timestamp,from_addr,to_addr,abs_usd_value,direction,is_self_transfer,coin,year,label\n"


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_three_row_file_loads(tmp_path):
    p = _write(tmp_path, "tx.csv", TX_HEADER
               + "t1,1600000000,a,b,10.5,out,false,BTC,2020,0\n"
               + "t2,2020-09-13T12:26:40Z,b,b,3,internal,true,ETH,2020,1\n"
               + "t3,1600000100,c,d,0,in,false,BTC,2020,\n")
    res = load_table("tx", p)
    assert [r.tx_id for r in res] == ["t1", "t2", "t3"]
    assert res.rejects == []
    assert res.records[1].timestamp == 1600000000
    assert res.records[1].is_self_transfer
    assert res.records[2].label is None


def test_negative_value_rejected(tmp_path):
    p = _write(tmp_path, "tx.csv", TX_HEADER + "t1,1600000000,a,b,-5,out,false,BTC,2020,0\n"
               + "t2,1600000000,a,b,5,out,false,BTC,2020,0\n")
    res = load_table("tx", p)
    assert len(res) == 1 and len(res.rejects) == 1
    err = res.rejects[0]
    assert isinstance(err, ParseError) and err.row == 1 and err.field == "abs_usd_value"


def test_sixth_keyword_rejected(tmp_path):
    head = "tx_id,anomaly_type,subtype_family,subtype," + ",".join(f"keyword{i}" for i in range(1, 7)) + "\n"
    p = _write(tmp_path, "ann.csv", head + "t1,mixing,coinjoin,tornado,a,b,c,d,e,f\n"
               + "t2,mixing,coinjoin,tornado,a,b,c,d,e,\n")
    res = load_table("annotation", p)
    assert [a.tx_id for a in res] == ["t2"]
    assert res.records[0].keywords == ("a", "b", "c", "d", "e")
    assert isinstance(res.rejects[0], ParseError) and res.rejects[0].row == 1


def test_missing_column(tmp_path):
    p = _write(tmp_path, "tx.csv", "tx_id,timestamp\nt1,1\n")
    with pytest.raises(MissingColumn) as exc:
        load_table("tx", p)
    assert exc.value.name == "from_addr"


def test_duplicate_id_and_self_transfer_mismatch(tmp_path):
    p = _write(tmp_path, "tx.csv", TX_HEADER
               + "t1,1,a,b,1,out,false,BTC,2020,0\n"
               + "t1,2,a,b,1,out,false,BTC,2020,0\n"
               + "t2,3,a,b,1,out,true,BTC,2020,0\n")
    res = load_table("tx", p)
    assert len(res) == 1
    assert isinstance(res.rejects[0], DuplicateId)
    assert isinstance(res.rejects[1], ParseError) and res.rejects[1].field == "is_self_transfer"


def test_jsonl_and_extras(tmp_path):
    rows = [{"tx_id": "t1", "timestamp": 5, "from_addr": "a", "to_addr": "b", "abs_usd_value": 1,
             "direction": "out", "coin_infer": "BTC", "merchant": "m1"},
            "not json"]
    p = tmp_path / "tx.jsonl"
    p.write_text(json.dumps(rows[0]) + "\n" + rows[1] + "\n")
    res = load_table("tx", p)
    assert res.records[0].coin == "btc"
    assert res.records[0].extras == {"merchant": "m1"}
    assert res.n_rows == 2 and len(res.rejects) == 1


def test_event_and_chunk_tables(tmp_path):
    ev = _write(tmp_path, "ev.csv", "event_id,event_date,event_title,description,coin,is_anomaly\n"
                "e1,2021-05-19,Crash,Market sell-off,BTC,true\ne2,bad,Oops,text,,false\ne3,2021-01-01,T,,,\n")
    res = load_table("event", ev)
    assert res.records == [EventDoc("e1", date(2021, 5, 19), "Crash", "Market sell-off", "btc", True)]
    assert [e.field for e in res.rejects] == ["event_date", "description"]
    ch = _write(tmp_path, "ch.csv", "chunk_id,chunk_text,sheet_name,row_idx\nc1,hello,typology,3\n")
    assert load_table("chunk", ch).records == [KnowledgeChunk("c1", "hello", "typology", 3)]


def test_validate_consistency_examples():
    t1, t2 = make_tx("t1"), make_tx("t2")
    assert validate_consistency([t1, t2], [make_ann("t1")]) == {"orphan_annotations": 0, "unannotated": 1}
    assert validate_consistency([t1], [make_ann("t1"), make_ann("t9")]) == {"orphan_annotations": 1,
                                                                          "unannotated": 0}
    assert validate_consistency([t1, t2], []) == {"orphan_annotations": 0, "unannotated": 2}


def test_iso_timestamps():
    assert parse_timestamp("1970-01-01T00:01:00") == 60
    assert parse_timestamp("1970-01-01T01:00:00+01:00") == 0
    assert parse_timestamp(12.9) == 12


_word = st.text(alphabet="abcdefghij xyz", min_size=1, max_size=12).map(str.strip).filter(bool)


@st.composite
def tx_records(draw):
    n = draw(st.integers(1, 8))
    out = []
    for i in range(n):
        src = draw(st.sampled_from("abc"))
        dst = draw(st.sampled_from("abc"))
        value = draw(st.floats(0, 1e9, allow_nan=False, allow_infinity=False))
        out.append(make_tx(f"t{i}", draw(st.integers(0, 2_000_000_000)), src, dst, value,
                           draw(st.sampled_from(["in", "out", "internal"])), draw(st.sampled_from(["btc", "eth"])),
                           draw(st.sampled_from([0, 1, None]))))
    return out


@settings(max_examples=40, deadline=None)
@given(tx_records(), st.sampled_from(["csv", "jsonl"]))
def test_tx_round_trip(tmp_path_factory, txs, ext):
    p = tmp_path_factory.mktemp("rt") / f"tx.{ext}"
    write_table(txs, p)
    res = load_table("tx", p)
    assert res.rejects == []
    assert res.records == txs
    write_table(res.records, p)
    assert load_table("tx", p).records == res.records


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(_word, _word, _word, st.lists(_word, min_size=1, max_size=5), _word),
                min_size=1, max_size=6), st.sampled_from(["csv", "jsonl"]))
def test_annotation_round_trip(tmp_path_factory, rows, ext):
    anns = [AnnotationRecord(f"t{i}", a, b, c, tuple(k), text) for i, (a, b, c, k, text) in enumerate(rows)]
    p = tmp_path_factory.mktemp("rt") / f"ann.{ext}"
    write_table(anns, p)
    assert load_table("annotation", p).records == anns


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["ok", "neg", "dir", "blank"]), min_size=1, max_size=20))
def test_rejects_plus_accepts_equals_rows(tmp_path_factory, kinds):
    body = {"ok": "1,a,b,5,out,false,BTC,2020,0", "neg": "1,a,b,-1,out,false,BTC,2020,0",
            "dir": "1,a,b,5,sideways,false,BTC,2020,0", "blank": "1,a,b,,out,false,BTC,2020,0"}
    lines = [f"t{i},{body[k]}" for i, k in enumerate(kinds)]
    p = tmp_path_factory.mktemp("rows") / "tx.csv"
    p.write_text(TX_HEADER + "\n".join(lines) + "\n")
    res = load_table("tx", p)
    assert len(res.records) + len(res.rejects) == len(kinds) == res.n_rows
    assert len(res.records) == kinds.count("ok")
