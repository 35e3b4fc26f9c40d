"""End-to-end run: ingest, split, annotate with retrieval, concept graph, embeddings,
features, backbone training, scoring, metrics and explanations.

Every stage writes its artifacts through :class:`ArtifactLog`, which records
a SHA-256 per file in ``manifest.json``.  A failing stage tags the exception
with its name, leaves earlier artifacts in place and re-raises.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import annotate as ann_mod
from .embed import EmbeddingTable, deepwalk
from .errors import ConfigError
from .evalx import MetricsReport, SplitManifest, compute_metrics, make_split, stratified_sample
from .explain import enumerate_candidates, explain
from .features import MODES, FeatureEncoder, build_unified, fit_encoder
from .ingest import AnnotationRecord, TransactionRecord, load_table, tag_split, write_table
from .io import sha256_file, sha256_json, write_json, write_jsonl
from .kg import ConceptGraph, LogicPath, build_concept_graph, induce_logic_path, save_graph
from .predict.gbdt import train_gbdt
from .predict.gru import train_gru, windows_ending_at
from .predict.sage import build_tx_graph, train_sage
from .rgc import (DEFAULT_K_CHUNKS, DEFAULT_K_EVENTS, EmbeddingIndex, RetrievedContext, build_query,
                  cluster_contexts, context_vector, retrieve_context, retrieve_top_k)
from .synth import default_specs, generate_corpus, write_corpus

log = logging.getLogger(__name__)

BACKBONES = ("gbdt", "gru", "sage")
ANNOTATORS = ("rule", "remote")


@dataclass
class PipelineConfig:
    """Every run parameter by name.  Either the four table paths or ``synth`` must be given."""

    seed: int
    out_dir: str = "runs/default"
    tx_path: str | None = None
    event_path: str | None = None
    chunk_path: str | None = None
    annotation_path: str | None = None  # gold annotations; only checked for consistency
    rules_path: str | None = None
    synth: dict | None = None  # {"n_total", "anomaly_rate", "seed"}
    # split and label scarcity
    split_strategy: str = "temporal"
    train_fraction: float = 0.8
    label_rate: float = 0.1
    min_per_anomaly_type: int = 2
    # retrieval
    k_chunks: int = DEFAULT_K_CHUNKS
    k_events: int = DEFAULT_K_EVENTS
    text_dim: int = 64
    annotator: str = "rule"
    # concept embeddings
    embed_dim: int = 64
    walks_per_node: int = 10
    walk_length: int = 20
    window: int = 5
    negatives: int = 5
    embed_epochs: int = 5
    embed_lr: float = 0.025
    pooling: str = "uniform"
    # prediction
    mode: str = "kg_cs"
    backbone: str = "gbdt"
    gbdt_rounds: int = 200
    gbdt_max_depth: int = 6
    gbdt_lr: float = 0.1
    gbdt_min_leaf: int = 5
    gru_hidden: int = 32
    gru_window: int = 16
    gru_epochs: int = 50
    gru_lr: float = 1e-2
    sage_hidden: int = 32
    sage_sample_size: int = 10
    sage_epochs: int = 100
    sage_lr: float = 1e-2
    # explanations
    lambda1: float = 0.5
    lambda2: float = 0.5
    top_m: int = 5

    def validate(self) -> None:
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}")
        if self.annotator not in ANNOTATORS:
            raise ConfigError(f"annotator must be one of {ANNOTATORS}")
        if self.synth is None:
            for name in ("tx_path", "event_path", "chunk_path"):
                p = getattr(self, name)
                if not p:
                    raise ConfigError(f"{name} is required when no synth spec is given")
                if not Path(p).exists():
                    raise ConfigError(f"{name}: {p} does not exist")
            for name in ("annotation_path", "rules_path"):
                p = getattr(self, name)
                if p and not Path(p).exists():
                    raise ConfigError(f"{name}: {p} does not exist")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda weights must be non-negative")
        if self.k_chunks < 1 or self.k_events < 1:
            raise ConfigError("k_chunks and k_events must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "seed" not in d:
            raise ConfigError("seed is mandatory")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class ArtifactLog:
    """Writes stage artifacts and keeps their checksums in ``manifest.json``."""

    def __init__(self, root: str | Path, config: dict):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.entries: dict[str, dict[str, str]] = {}
        self.config = config
        self.status = "running"
        self.failed_stage: str | None = None

    def record(self, stage: str, path: Path) -> Path:
        self.entries.setdefault(stage, {})[str(Path(path).relative_to(self.root))] = sha256_file(path)
        return path

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def flush(self) -> Path:
        doc = {"config": self.config, "config_sha256": sha256_json(self.config), "status": self.status,
               "failed_stage": self.failed_stage, "stages": self.entries}
        return write_json(self.root / "manifest.json", doc)


class _Stage:
    def __init__(self, name: str, artifacts: ArtifactLog | None):
        self.name, self.artifacts = name, artifacts

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, Exception):
            if getattr(exc, "stage", None) is None:
                try:
                    exc.stage = self.name
                except AttributeError:
                    pass
            if self.artifacts is not None:
                self.artifacts.status = "failed"
                self.artifacts.failed_stage = self.name
                self.artifacts.flush()
        return False


# ------------------------------------------------------------------ shared state


@dataclass
class Inputs:
    transactions: list[TransactionRecord]
    events: list
    chunks: list
    rules: list
    gold: list[AnnotationRecord] = field(default_factory=list)
    rejects: dict[str, int] = field(default_factory=dict)


@dataclass
class Prepared:
    """Everything the three modes share for one (data, split, seed)."""

    inputs: Inputs
    split: SplitManifest
    labeled_ids: list[str]
    contexts: dict[str, str]
    chunk_hits: dict[str, list[tuple[str, float]]]
    event_ctx: dict[str, RetrievedContext]
    annotations: dict[str, AnnotationRecord]
    train_txs: list[TransactionRecord]
    test_txs: list[TransactionRecord]
    graph: ConceptGraph | None = None
    table: EmbeddingTable | None = None
    event_index: EmbeddingIndex | None = None


def load_inputs(cfg: PipelineConfig, data_dir: Path | None = None) -> Inputs:
    if cfg.synth is not None:
        s = dict(cfg.synth)
        specs = default_specs(int(s.get("n_total", 5000)), float(s.get("anomaly_rate", 0.01)))
        corpus = generate_corpus(specs, seed=int(s.get("seed", cfg.seed)))
        if data_dir is not None:
            write_corpus(corpus, data_dir, specs, int(s.get("seed", cfg.seed)))
        return Inputs(corpus.transactions, corpus.events, corpus.chunks, corpus.rules, corpus.annotations)
    rejects = {}
    loaded = {}
    for kind, p in (("tx", cfg.tx_path), ("event", cfg.event_path), ("chunk", cfg.chunk_path),
                    ("annotation", cfg.annotation_path)):
        if not p:
            continue
        res = load_table(kind, p)
        loaded[kind] = res.records
        rejects[kind] = len(res.rejects)
    rules = ann_mod.load_rules(cfg.rules_path) if cfg.rules_path else ann_mod.default_rules()
    return Inputs(loaded["tx"], loaded["event"], loaded["chunk"], rules, loaded.get("annotation", []), rejects)


def split_contexts(train_txs: Sequence[TransactionRecord], test_txs: Sequence[TransactionRecord]) -> dict[str, str]:
    """Cluster contexts where train rows see only train neighbours; test rows see everything (labels unused)."""
    contexts = cluster_contexts(train_txs)
    if test_txs:
        full = cluster_contexts(list(train_txs) + list(test_txs))
        contexts.update({t.tx_id: full[t.tx_id] for t in test_txs})
    return contexts


def annotate_all(txs: Sequence[TransactionRecord], contexts: dict[str, str], chunk_index: EmbeddingIndex,
                 event_index: EmbeddingIndex, chunks_by_id: dict, events_by_id: dict, rules, cfg: PipelineConfig):
    """Retrieval plus annotation for each transaction; returns (annotations, chunk hits, event contexts)."""
    chunk_hits, event_ctx, items = {}, {}, []
    for tx in txs:
        q = build_query(tx, contexts[tx.tx_id], cfg.text_dim)
        ch = retrieve_top_k(chunk_index, q, min(cfg.k_chunks, len(chunk_index)))
        ec = retrieve_context(tx.tx_id, event_index, q, min(cfg.k_events, len(event_index)))
        chunk_hits[tx.tx_id] = ch
        event_ctx[tx.tx_id] = ec
        items.append((tx, contexts[tx.tx_id], [chunks_by_id[c] for c, _ in ch], [events_by_id[e] for e, _ in ec.hits]))
    endpoint = os.environ.get(ann_mod.ENDPOINT_ENV)
    if cfg.annotator == "remote" and endpoint:
        recs = ann_mod.annotate_remote_batch(items, ann_mod.RemoteConfig(endpoint), rules)
    else:
        recs = [ann_mod.annotate_rule_based(tx, c, e, rules, ctx) for tx, ctx, c, e in items]
    # each annotation inherits its transaction's split tag
    return {r.tx_id: replace(r, split=tx.split) for r, tx in zip(recs, txs)}, chunk_hits, event_ctx


def prepare(cfg: PipelineConfig, artifacts: ArtifactLog | None = None, need_graph: bool = True,
            inputs: Inputs | None = None) -> Prepared:
    """Stages shared across modes: ingest, split, annotate, concept graph and embeddings."""
    def out(stage, name, obj):
        if artifacts is not None:
            artifacts.record(stage, write_json(artifacts.path(name), obj))

    with _Stage("ingest", artifacts):
        if inputs is None:
            inputs = load_inputs(cfg, artifacts.path("data") if artifacts is not None else None)
        if artifacts is not None and cfg.synth is not None:
            for f in sorted(artifacts.path("data").iterdir()):
                artifacts.record("ingest", f)
        out("ingest", "ingest.json", {
            "n_transactions": len(inputs.transactions), "n_events": len(inputs.events),
            "n_chunks": len(inputs.chunks), "n_rules": len(inputs.rules), "n_gold": len(inputs.gold),
            "rejects": inputs.rejects,
        })

    with _Stage("split", artifacts):
        txs = inputs.transactions
        split = make_split(txs, cfg.split_strategy, cfg.train_fraction, cfg.seed)
        train_ids = set(split.train_ids)
        test_ids = set(split.test_ids)
        train_txs = tag_split([t for t in txs if t.tx_id in train_ids], "train")
        test_txs = tag_split([t for t in txs if t.tx_id in test_ids], "test")
        labeled = stratified_sample(train_txs, cfg.label_rate, cfg.min_per_anomaly_type, cfg.seed)
        out("split", "split_manifest.json", split.to_dict())
        out("split", "labeled_sample.json", {"rate": cfg.label_rate, "seed": cfg.seed,
                                                         "min_per_anomaly_type": cfg.min_per_anomaly_type,
                                                         "tx_ids": labeled})

    with _Stage("annotate", artifacts):
        contexts = split_contexts(train_txs, test_txs)
        chunk_index = EmbeddingIndex.from_chunks(inputs.chunks, cfg.text_dim)
        event_index = EmbeddingIndex.from_events(inputs.events, cfg.text_dim)
        annotations, chunk_hits, event_ctx = annotate_all(
            train_txs + test_txs, contexts, chunk_index, event_index,
            {c.chunk_id: c for c in inputs.chunks}, {e.event_id: e for e in inputs.events}, inputs.rules, cfg)
        if artifacts is not None:
            order = [t.tx_id for t in train_txs + test_txs]
            p = write_table([annotations[i] for i in order], artifacts.path("annotations.csv"))
            artifacts.record("annotate", p)
            rows = [{"tx_id": i, "cluster_context": contexts[i],
                     "chunk_hits": [[d, s] for d, s in chunk_hits[i]],
                     "event_hits": [[d, s] for d, s in event_ctx[i].hits]} for i in order]
            artifacts.record("annotate", write_jsonl(artifacts.path("retrieval.jsonl"), rows))

    prep = Prepared(inputs, split, labeled, contexts, chunk_hits, event_ctx, annotations, train_txs, test_txs,
                    event_index=event_index)
    if need_graph:
        build_graph_stages(prep, cfg, artifacts)
    return prep


def build_graph_stages(prep: Prepared, cfg: PipelineConfig, artifacts: ArtifactLog | None = None) -> None:
    with _Stage("kg", artifacts):
        train_anns = [prep.annotations[t.tx_id] for t in prep.train_txs]
        prep.graph = build_concept_graph(train_anns)
        if artifacts is not None:
            artifacts.record("kg", save_graph(prep.graph, artifacts.path("graph.jsonl")))
    with _Stage("embed", artifacts):
        prep.table = deepwalk(prep.graph, dim=cfg.embed_dim, walks_per_node=cfg.walks_per_node,
                              walk_length=cfg.walk_length, window=cfg.window, negatives=cfg.negatives,
                              epochs=cfg.embed_epochs, lr=cfg.embed_lr, seed=cfg.seed)
        if artifacts is not None:
            artifacts.record("embed", prep.table.save(artifacts.path("embeddings.bin")))


# ----------------------------------------------------------------- per-mode run


@dataclass
class ModeResult:
    mode: str
    backbone: str
    test_ids: list[str]
    scores: np.ndarray
    labels: np.ndarray
    metrics: MetricsReport
    paths: dict[str, LogicPath] = field(default_factory=dict)


def featurize(prep: Prepared, mode: str, cfg: PipelineConfig) -> tuple[FeatureEncoder, dict[str, np.ndarray], dict[str, LogicPath]]:
    encoder = fit_encoder(prep.train_txs, cfg.embed_dim, cfg.text_dim)
    use_kg = mode in ("kg", "kg_cs")
    if use_kg and (prep.graph is None or prep.table is None):
        raise ConfigError(f"mode {mode} needs the concept graph stages")
    feats, paths = {}, {}
    for tx in prep.train_txs + prep.test_txs:
        path = induce_logic_path(prep.annotations[tx.tx_id], prep.graph) if use_kg else None
        if path is not None:
            paths[tx.tx_id] = path
        uf = build_unified(tx, path, prep.table if use_kg else None, prep.event_ctx.get(tx.tx_id), mode, encoder,
                           cfg.pooling)
        feats[tx.tx_id] = uf.r
    return encoder, feats, paths


def fit_and_score(prep: Prepared, feats: dict[str, np.ndarray], cfg: PipelineConfig, backbone: str, seed: int):
    """Train on the labeled train subset and return (model, test scores)."""
    label_of = {t.tx_id: t.label for t in prep.train_txs}
    lab_ids = prep.labeled_ids
    y = np.array([float(label_of[i]) for i in lab_ids])
    test_ids = [t.tx_id for t in prep.test_txs]
    if backbone == "gbdt":
        X = np.stack([feats[i] for i in lab_ids])
        model = train_gbdt(X, y, rounds=cfg.gbdt_rounds, max_depth=cfg.gbdt_max_depth, lr=cfg.gbdt_lr,
                           min_leaf=cfg.gbdt_min_leaf, seed=seed)
        return model, model.predict_proba(np.stack([feats[i] for i in test_ids]))
    if backbone == "gru":
        # windows end at each target in timestamp order; train windows only see train rows
        train_order = sorted(prep.train_txs, key=lambda t: (t.timestamp, t.tx_id))
        pos = {t.tx_id: k for k, t in enumerate(train_order)}
        Ftr = np.stack([feats[t.tx_id] for t in train_order])
        Xw = windows_ending_at(Ftr, [pos[i] for i in lab_ids], cfg.gru_window)
        model = train_gru((Xw, y), hidden_dim=cfg.gru_hidden, epochs=cfg.gru_epochs, lr=cfg.gru_lr, seed=seed)
        full = sorted(prep.train_txs + prep.test_txs, key=lambda t: (t.timestamp, t.tx_id))
        fpos = {t.tx_id: k for k, t in enumerate(full)}
        Fall = np.stack([feats[t.tx_id] for t in full])
        return model, model.predict_proba(windows_ending_at(Fall, [fpos[i] for i in test_ids], cfg.gru_window))
    if backbone == "sage":
        all_txs = prep.train_txs + prep.test_txs
        graph = build_tx_graph(all_txs, feats)
        model = train_sage(graph, {i: int(label_of[i]) for i in lab_ids}, hidden_dim=cfg.sage_hidden,
                           sample_size=cfg.sage_sample_size, epochs=cfg.sage_epochs, lr=cfg.sage_lr, seed=seed,
                           train_nodes=[t.tx_id for t in prep.train_txs])
        p = model.predict_proba(graph)
        return model, np.array([p[graph.index(i)] for i in test_ids])
    raise ConfigError(f"unknown backbone {backbone!r}")


def run_mode(prep: Prepared, cfg: PipelineConfig, mode: str, backbone: str,
             artifacts: ArtifactLog | None = None) -> ModeResult:
    with _Stage("featurize", artifacts):
        encoder, feats, paths = featurize(prep, mode, cfg)
        if artifacts is not None:
            rows = [{"tx_id": t.tx_id, "mode": mode, "r": [float(v) for v in feats[t.tx_id]], "split": t.split}
                    for t in prep.train_txs + prep.test_txs]
            artifacts.record("featurize", write_jsonl(artifacts.path("features.jsonl"), rows))
            artifacts.record("featurize", write_json(artifacts.path("encoder.json"), encoder.to_dict()))
    with _Stage("train", artifacts):
        model, scores = fit_and_score(prep, feats, cfg, backbone, cfg.seed)
        if artifacts is not None:
            artifacts.record("train", model.save(artifacts.path(f"model_{backbone}.bin")))
    with _Stage("predict", artifacts):
        test_ids = [t.tx_id for t in prep.test_txs]
        labels = np.array([t.label for t in prep.test_txs], dtype=int)
        if artifacts is not None:
            rows = [{"tx_id": i, "score": float(s), "label": int(l)} for i, s, l in zip(test_ids, scores, labels)]
            artifacts.record("predict", write_jsonl(artifacts.path("scores.jsonl"), rows))
    with _Stage("metrics", artifacts):
        metrics = compute_metrics(scores, labels)
        if artifacts is not None:
            artifacts.record("metrics", write_json(artifacts.path("metrics.json"), metrics.to_dict()))
    return ModeResult(mode, backbone, test_ids, scores, labels, metrics, paths)


def explain_flagged(prep: Prepared, result: ModeResult, cfg: PipelineConfig, threshold: float = 0.5) -> list[dict]:
    if prep.graph is None or prep.table is None or len(prep.graph) == 0:
        return []
    by_id = {t.tx_id: t for t in prep.test_txs}
    event_text = {e.event_id: f"{e.title}: {e.description}" for e in prep.inputs.events}
    # same hits, pooled in the concept embedding dimension so sim(e, P) is defined
    idx = prep.event_index
    if idx is None or idx.dim != prep.table.dim:
        idx = EmbeddingIndex.from_events(prep.inputs.events, prep.table.dim)
    reports = []
    for tx_id, s in zip(result.test_ids, result.scores):
        if s < threshold:
            continue
        tx = by_id[tx_id]
        cands = enumerate_candidates(tx, prep.graph, prep.table, cfg.top_m)
        hits = prep.event_ctx[tx_id].hits
        ctx = RetrievedContext(tx_id, hits, context_vector(hits, idx))
        rep = explain(tx, cands, prep.table, ctx, cfg.lambda1, cfg.lambda2, event_text=event_text)
        d = rep.to_dict()
        d["anomaly_score"] = float(s)
        reports.append(d)
    return reports


def run_pipeline(cfg: PipelineConfig) -> Path:
    """Full run into ``cfg.out_dir``; returns that directory."""
    cfg.validate()
    # out_dir is excluded so identical runs in different directories share checksums
    artifacts = ArtifactLog(cfg.out_dir, {k: v for k, v in cfg.to_dict().items() if k != "out_dir"})
    need_graph = cfg.mode != "feature_only"
    prep = prepare(cfg, artifacts, need_graph=need_graph)
    result = run_mode(prep, cfg, cfg.mode, cfg.backbone, artifacts)
    with _Stage("explain", artifacts):
        reports = explain_flagged(prep, result, cfg) if need_graph else []
        artifacts.record("explain", write_jsonl(artifacts.path("explanations.jsonl"), reports))
        text = "\n\n".join(r["narrative"] for r in reports)
        p = artifacts.path("explanations.txt")
        p.write_text(text + ("\n" if text else ""), encoding="utf-8")
        artifacts.record("explain", p)
    artifacts.status = "ok"
    artifacts.flush()
    return Path(cfg.out_dir)


# -------------------------------------------------------------------- ablation

METRIC_KEYS = ("accuracy", "macro_precision", "macro_recall", "macro_f1", "auc_roc")


def regime_shift_false_positives(prep: Prepared, result: ModeResult, threshold: float = 0.5) -> int:
    motif = {t.tx_id: t.extras.get("motif") for t in prep.test_txs}
    return int(sum(1 for i, s, l in zip(result.test_ids, result.scores, result.labels)
                   if s >= threshold and l == 0 and motif.get(i) == "benign_regime_shift"))


def run_ablation(cfg: PipelineConfig, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                 backbones: Sequence[str] = ("gbdt",), modes: Sequence[str] = MODES,
                 out_dir: str | Path | None = None) -> dict:
    """Three modes on identical splits and seeds; returns (and optionally writes) the comparison table."""
    cfg.validate()
    raw = []
    base_inputs = load_inputs(cfg) if cfg.synth is not None and "seed" in cfg.synth else None
    for seed in seeds:
        c = replace(cfg, seed=seed)
        inputs = base_inputs if base_inputs is not None else load_inputs(c)
        prep = prepare(c, None, need_graph=any(m != "feature_only" for m in modes), inputs=inputs)
        for backbone in backbones:
            for mode in modes:
                res = run_mode(prep, c, mode, backbone)
                row = {"seed": seed, "backbone": backbone, "mode": mode,
                       "split_sha256": prep.split.checksum, "regime_shift_fp": regime_shift_false_positives(prep, res)}
                row.update({k: getattr(res.metrics, k) for k in METRIC_KEYS})
                raw.append(row)
    table = []
    for backbone in backbones:
        for mode in modes:
            rows = [r for r in raw if r["backbone"] == backbone and r["mode"] == mode]
            entry: dict[str, Any] = {"backbone": backbone, "mode": mode, "n_seeds": len(rows),
                                     "regime_shift_fp_total": sum(r["regime_shift_fp"] for r in rows)}
            for k in METRIC_KEYS:
                vals = [r[k] for r in rows if r[k] is not None]
                entry[k] = float(np.mean(vals)) if vals else None
            table.append(entry)
    doc = {"config": cfg.to_dict(), "seeds": list(seeds), "table": table, "raw": raw}
    if out_dir is not None:
        out = Path(out_dir)
        write_json(out / "ablation.json", doc)
        (out / "ablation.md").write_text(format_table(table) + "\n", encoding="utf-8")
    return doc


_MODE_LABEL = {"feature_only": "Feature-only", "kg": "Feature + KG", "kg_cs": "Feature + KG + CS"}


def format_table(table: Sequence[dict]) -> str:
    head = "| Backbone | Configuration | Accuracy | Precision | Recall | F1 | AUC-ROC |"
    lines = [head, "|" + "---|" * 7]
    for e in table:
        cells = [f"{e[k]:.4f}" if e[k] is not None else "n/a" for k in METRIC_KEYS]
        lines.append(f"| {e['backbone']} | {_MODE_LABEL.get(e['mode'], e['mode'])} | " + " | ".join(cells) + " |")
    return "\n".join(lines)
