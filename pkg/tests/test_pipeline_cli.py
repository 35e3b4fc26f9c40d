import io
import json
from dataclasses import replace
from pathlib import Path

import pytest

from kgaml import pipeline
from kgaml.cli import main
from kgaml.errors import ConfigError, LeakageError
from kgaml.features import FeatureEncoder
from kgaml.pipeline import PipelineConfig, run_ablation, run_pipeline

SMALL = dict(synth={"n_total": 1000, "anomaly_rate": 0.02, "seed": 9}, gbdt_rounds=30, walks_per_node=4,
             walk_length=10, embed_epochs=2, embed_dim=16, text_dim=32)


def small_cfg(tmp_path, name="run", **kw):
    return PipelineConfig(seed=7, out_dir=str(tmp_path / name), **{**SMALL, **kw})


# ------------------------------------------------------------------ config


def test_config_requires_seed_and_known_keys():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"out_dir": "x"})
    with pytest.raises(ConfigError, match="bogus"):
        PipelineConfig.from_dict({"seed": 1, "bogus": 2})


@pytest.mark.parametrize("change", [{"mode": "nope"}, {"backbone": "svm"}, {"lambda1": -0.1}, {"k_events": 0},
                                    {"synth": None}, {"synth": None, "tx_path": "/nonexistent.csv",
                                                      "event_path": "/x", "chunk_path": "/y"}])
def test_config_validate_rejects(change, tmp_path):
    cfg = replace(small_cfg(tmp_path), **change)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_load_roundtrip(tmp_path):
    cfg = small_cfg(tmp_path)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert PipelineConfig.load(p) == cfg


# ---------------------------------------------------------------- pipeline


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    outs = [run_pipeline(small_cfg(root, f"r{i}")) for i in range(2)]
    return outs


def test_pipeline_writes_every_artifact(two_runs):
    out = two_runs[0]
    for name in ("manifest.json", "ingest.json", "split_manifest.json", "labeled_sample.json", "annotations.csv",
                 "retrieval.jsonl", "graph.jsonl", "embeddings.bin", "features.jsonl", "encoder.json",
                 "model_gbdt.bin", "scores.jsonl", "metrics.json", "explanations.jsonl", "explanations.txt",
                 "data/transactions.csv", "data/rules.json"):
        assert (out / name).exists(), name
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "ok" and man["failed_stage"] is None
    assert set(man["stages"]) >= {"ingest", "split", "annotate", "kg", "embed", "featurize", "train", "predict",
                                  "metrics", "explain"}


def test_pipeline_is_byte_identical(two_runs):
    a, b = two_runs
    for name in ("metrics.json", "explanations.jsonl", "explanations.txt", "scores.jsonl", "embeddings.bin",
                 "model_gbdt.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    ma, mb = (json.loads((x / "manifest.json").read_text()) for x in two_runs)
    assert ma == mb


def test_explanations_cover_flagged_test_rows(two_runs):
    out = two_runs[0]
    flagged = [r["tx_id"] for r in map(json.loads, (out / "scores.jsonl").read_text().splitlines())
               if r["score"] >= 0.5]
    reports = [json.loads(l) for l in (out / "explanations.jsonl").read_text().splitlines()]
    assert [r["tx_id"] for r in reports] == flagged
    for r in reports:
        assert r["score"] == pytest.approx(r["lambda1"] * r["sim_x"] + r["lambda2"] * r["sim_e"], abs=1e-12)
        assert r["score"] == max(c["score"] for c in r["candidates"])


def test_feature_only_skips_graph_stages(tmp_path):
    out = run_pipeline(small_cfg(tmp_path, mode="feature_only"))
    assert not (out / "graph.jsonl").exists() and not (out / "embeddings.bin").exists()
    man = json.loads((out / "manifest.json").read_text())
    assert "kg" not in man["stages"] and "embed" not in man["stages"]
    enc = FeatureEncoder.from_dict(json.loads((out / "encoder.json").read_text()))
    sl = enc.block_slices()
    for line in (out / "features.jsonl").read_text().splitlines():
        r = json.loads(line)["r"]
        assert len(r) == enc.width
        assert not any(r[sl["concept"]]) and not any(r[sl["context"]])
    assert (out / "explanations.jsonl").read_text() == ""


def test_injected_test_annotation_aborts_graph_build(tmp_path, monkeypatch):
    real = pipeline.annotate_all

    def poisoned(txs, *a, **kw):
        anns, ch, ev = real(txs, *a, **kw)
        victim = next(t.tx_id for t in txs if t.split == "train")
        anns[victim] = replace(anns[victim], split="test")
        return anns, ch, ev

    monkeypatch.setattr(pipeline, "annotate_all", poisoned)
    cfg = small_cfg(tmp_path)
    with pytest.raises(LeakageError) as ei:
        run_pipeline(cfg)
    assert ei.value.stage == "kg"
    man = json.loads((Path(cfg.out_dir) / "manifest.json").read_text())
    assert man["status"] == "failed" and man["failed_stage"] == "kg"
    assert not (Path(cfg.out_dir) / "graph.jsonl").exists()


def test_annotations_carry_split_tags(tmp_path):
    prep = pipeline.prepare(small_cfg(tmp_path), None, need_graph=False)
    train = {t.tx_id for t in prep.train_txs}
    assert len(prep.annotations) == len(prep.train_txs) + len(prep.test_txs)
    assert all((a.split == "train") == (i in train) for i, a in prep.annotations.items())


def test_ablation_shares_split_and_reports_all_metrics(tmp_path):
    cfg = small_cfg(tmp_path, gbdt_rounds=10)
    doc = run_ablation(cfg, seeds=(0, 1), out_dir=tmp_path / "abl")
    assert [r["mode"] for r in doc["table"]] == ["feature_only", "kg", "kg_cs"]
    for row in doc["table"]:
        for k in pipeline.METRIC_KEYS:
            assert row[k] is not None
    for seed in (0, 1):
        sums = {r["split_sha256"] for r in doc["raw"] if r["seed"] == seed}
        assert len(sums) == 1
    assert (tmp_path / "abl" / "ablation.md").read_text().count("| gbdt |") == 3


# --------------------------------------------------------------------- CLI


def run_cli(*argv, capsys=None):
    rc = main([str(a) for a in argv])
    if capsys is None:
        return rc, ""
    cap = capsys.readouterr()
    run_cli.last_err = cap.err
    return rc, cap.out


def test_cli_end_to_end(tmp_path, capsys, monkeypatch):
    d = tmp_path / "data"
    w = tmp_path / "work"
    w.mkdir()
    assert run_cli("synth", "--n-total", 1000, "--anomaly-rate", 0.02, "--seed", 9, "--out", d, capsys=capsys)[0] == 0
    rc, out = run_cli("ingest", "--kind", "tx", "--path", d / "transactions.csv", "--out", w / "tx.jsonl",
                      "--annotations", d / "annotations.csv", capsys=capsys)
    assert rc == 0 and json.loads(out)["accepted"] == 1000
    rc, out = run_cli("split", "--tx", d / "transactions.csv", "--strategy", "temporal", "--label-rate", 0.1,
                      "--out", w / "split.json", capsys=capsys)
    assert rc == 0 and json.loads(out) == {"train": 800, "test": 200, "strategy": "temporal"}
    assert (w / "split.labeled.json").exists()
    rc, _ = run_cli("annotate", "--tx", d / "transactions.csv", "--events", d / "events.csv", "--chunks",
                    d / "chunks.csv", "--rules", d / "rules.json", "--dim", 32, "--out", w / "ann.csv", capsys=capsys)
    assert rc == 0
    rc, out = run_cli("kg", "build", "--annotations", w / "ann.csv", "--manifest", w / "split.json",
                      "--out", w / "graph.jsonl", capsys=capsys)
    assert rc == 0 and json.loads(out)["nodes"] > 0
    rc, out = run_cli("embed", "train", "--graph", w / "graph.jsonl", "--dim", 16, "--epochs", 1,
                      "--out", w / "emb.bin", capsys=capsys)
    assert rc == 0 and json.loads(out)["dim"] == 16
    rc, _ = run_cli("rgc", "index", "--kind", "events", "--in", d / "events.csv", "--dim", 32,
                    "--out", w / "events.idx", capsys=capsys)
    assert rc == 0
    monkeypatch.setattr("sys.stdin", io.StringIO("peel chain exchange\n\nmixer deposit\n"))
    rc, out = run_cli("rgc", "query", "--idx", w / "events.idx", "--k", 3, capsys=capsys)
    lines = [json.loads(l) for l in out.splitlines()]
    assert rc == 0 and len(lines) == 2 and all(len(l["hits"]) == 3 for l in lines)
    rc, out = run_cli("featurize", "--tx", d / "transactions.csv", "--manifest", w / "split.json", "--mode", "kg_cs",
                      "--annotations", w / "ann.csv", "--graph", w / "graph.jsonl", "--embeddings", w / "emb.bin",
                      "--event-index", w / "events.idx", "--dim", 16, "--out", w / "feats.jsonl", capsys=capsys)
    assert rc == 0 and json.loads(out)["rows"] == 1000
    rc, _ = run_cli("train", "--features", w / "feats.jsonl", "--labeled", w / "split.labeled.json",
                    "--rounds", 10, "--min-leaf", 5, "--out", w / "model.bin", capsys=capsys)
    assert rc == 0
    rc, out = run_cli("predict", "--features", w / "feats.jsonl", "--model", w / "model.bin",
                      "--out", w / "scores.jsonl", capsys=capsys)
    assert rc == 0 and json.loads(out)["scored"] == 200
    rc, out = run_cli("eval", "--scores", w / "scores.jsonl", "--manifest", w / "split.json",
                      "--out", w / "metrics.json", capsys=capsys)
    assert rc == 0 and set(json.loads(out)) >= {"accuracy", "macro_f1", "auc_roc"}
    tx_id = json.loads((w / "scores.jsonl").read_text().splitlines()[0])["tx_id"]
    rc, out = run_cli("explain", "--tx-id", tx_id, "--tx", d / "transactions.csv", "--graph", w / "graph.jsonl",
                      "--embeddings", w / "emb.bin", "--events", d / "events.csv", "--out", w / "expl.json",
                      capsys=capsys)
    assert rc == 0 and out.startswith(f"Transaction {tx_id}")
    assert (w / "expl.txt").exists()


def test_cli_pipeline_and_ablate(tmp_path, capsys):
    cfg = small_cfg(tmp_path, "cli_run").to_dict()
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    rc, out = run_cli("pipeline", "--config", p, capsys=capsys)
    assert rc == 0 and "macro_f1" in json.loads(out)
    rc, out = run_cli("ablate", "--config", p, "--seeds", "0", "--out", tmp_path / "abl", capsys=capsys)
    assert rc == 0 and out.count("| gbdt |") == 3


def test_cli_errors_exit_2(tmp_path, capsys):
    rc, _ = run_cli("ingest", "--kind", "tx", "--path", tmp_path / "missing.csv", capsys=capsys)
    assert rc == 2
    bad = tmp_path / "ann.csv"
    bad.write_text("tx_id,anomaly_type,subtype_family,subtype,keyword1\nt1,a,b,c,k\n")
    rc, _ = run_cli("kg", "build", "--annotations", bad, "--out", tmp_path / "g.jsonl", capsys=capsys)
    assert rc == 2
    assert "LeakageError" in run_cli.last_err
    rc, _ = run_cli("pipeline", "--config", tmp_path / "nope.json", capsys=capsys)
    assert rc == 2
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"out_dir": str(tmp_path / "o")}))
    rc, _ = run_cli("pipeline", "--config", p, capsys=capsys)
    assert rc == 2
