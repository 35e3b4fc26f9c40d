"""Command-line entry point.  Exit status is 0 only when the command fully succeeds."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import annotate as ann_mod
from .embed import EmbeddingTable, deepwalk, embed_text
from .errors import KgamlError
from .evalx import SplitManifest, compute_metrics, make_split, stratified_sample
from .explain import enumerate_candidates, explain
from .features import MODES, build_unified, fit_encoder
from .ingest import load_table, tag_split, validate_consistency, write_table
from .io import load_blob, read_jsonl, save_blob, write_json, write_jsonl
from .kg import build_concept_graph, induce_logic_path, load_graph, save_graph
from .pipeline import BACKBONES, PipelineConfig, split_contexts, format_table, run_ablation, run_pipeline
from .predict.gbdt import GbdtModel, train_gbdt
from .predict.gru import GruModel, train_gru, windows_ending_at
from .predict.sage import SageModel, build_tx_graph, train_sage
from .rgc import EmbeddingIndex, build_query, cluster_contexts, retrieve_context, retrieve_top_k
from .synth import default_specs, generate_corpus, load_specs, write_corpus

log = logging.getLogger("kgaml")


def _tx_split(args):
    """Transactions tagged by an optional manifest; untagged when no manifest is given."""
    txs = load_table("tx", args.tx).records
    if not getattr(args, "manifest", None):
        return txs, None
    m = SplitManifest.from_dict(json.loads(Path(args.manifest).read_text()))
    tr, te = set(m.train_ids), set(m.test_ids)
    return tag_split([t for t in txs if t.tx_id in tr], "train") + tag_split([t for t in txs if t.tx_id in te], "test"), m


# ------------------------------------------------------------------- commands


def cmd_synth(args):
    seed = args.seed
    if args.config:
        specs, cfg_seed = load_specs(args.config)
        seed = cfg_seed if seed is None else seed
    else:
        specs = default_specs(args.n_total, args.anomaly_rate)
    seed = 7 if seed is None else seed
    corpus = generate_corpus(specs, seed=seed)
    paths = write_corpus(corpus, args.out, specs, seed)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2, sort_keys=True))


def cmd_ingest(args):
    res = load_table(args.kind, args.path)
    for r in res.rejects:
        log.warning("rejected: %s", r)
    if args.out:
        write_table(res.records, args.out)
    summary = {"kind": res.kind, "rows": res.n_rows, "accepted": len(res.records), "rejected": len(res.rejects)}
    if args.annotations and res.kind == "tx":
        summary.update(validate_consistency(res.records, load_table("annotation", args.annotations).records))
    print(json.dumps(summary, sort_keys=True))
    return 1 if args.strict and res.rejects else 0


def cmd_split(args):
    txs = load_table("tx", args.tx).records
    m = make_split(txs, args.strategy, args.train_fraction, args.seed)
    m.save(args.out)
    if args.label_rate:
        train = tag_split([t for t in txs if t.tx_id in set(m.train_ids)], "train")
        ids = stratified_sample(train, args.label_rate, args.min_per_type, args.seed)
        write_json(Path(args.out).with_suffix(".labeled.json"), {"rate": args.label_rate, "tx_ids": ids})
    print(json.dumps({"train": len(m.train_ids), "test": len(m.test_ids), "strategy": m.strategy}))


def cmd_annotate(args):
    txs = load_table("tx", args.tx).records
    events = load_table("event", args.events).records
    chunks = load_table("chunk", args.chunks).records
    rules = ann_mod.load_rules(args.rules) if args.rules else ann_mod.default_rules()
    contexts = cluster_contexts(txs)
    ci = EmbeddingIndex.from_chunks(chunks, args.dim)
    ei = EmbeddingIndex.from_events(events, args.dim)
    cby = {c.chunk_id: c for c in chunks}
    eby = {e.event_id: e for e in events}
    items = []
    for tx in txs:
        q = build_query(tx, contexts[tx.tx_id], args.dim)
        ch = [cby[d] for d, _ in retrieve_top_k(ci, q, min(args.k_chunks, len(ci)))]
        ev = [eby[d] for d, _ in retrieve_top_k(ei, q, min(args.k_events, len(ei)))]
        items.append((tx, contexts[tx.tx_id], ch, ev))
    endpoint = os.environ.get(ann_mod.ENDPOINT_ENV)
    if endpoint:
        recs = ann_mod.annotate_remote_batch(items, ann_mod.RemoteConfig(endpoint), rules)
    else:
        recs = [ann_mod.annotate_rule_based(tx, c, e, rules, ctx) for tx, ctx, c, e in items]
    write_table(recs, args.out)
    print(json.dumps({"annotated": len(recs), "remote": bool(endpoint)}))


def cmd_kg_build(args):
    anns = load_table("annotation", args.train or args.annotations).records
    if args.manifest:
        m = SplitManifest.from_dict(json.loads(Path(args.manifest).read_text()))
        tr = set(m.train_ids)
        anns = [a for a in anns if a.tx_id in tr]
    anns = tag_split(anns, "train") if args.train or args.manifest or args.assume_train else anns
    g = build_concept_graph(anns)
    save_graph(g, args.out)
    print(json.dumps({"nodes": len(g.nodes), "edges": len(g.edges)}))


def cmd_embed_train(args):
    g = load_graph(args.graph)
    table = deepwalk(g, dim=args.dim, walks_per_node=args.walks_per_node, walk_length=args.walk_length,
                     window=args.window, negatives=args.negatives, epochs=args.epochs, lr=args.lr, seed=args.seed)
    table.save(args.out)
    print(json.dumps({"nodes": len(table.node_ids), "dim": table.dim, "epoch_losses": table.epoch_losses}))


def cmd_rgc_index(args):
    if args.kind == "events":
        idx = EmbeddingIndex.from_events(load_table("event", args.input).records, args.dim)
    else:
        idx = EmbeddingIndex.from_chunks(load_table("chunk", args.input).records, args.dim)
    idx.save(args.out)
    print(json.dumps({"docs": len(idx), "dim": idx.dim, "corpus": idx.corpus_tag}))


def cmd_rgc_query(args):
    idx = EmbeddingIndex.load(args.idx)
    for line in sys.stdin:
        text = line.strip()
        if not text:
            continue
        hits = retrieve_top_k(idx, embed_text(text, idx.dim), args.k)
        print(json.dumps({"query": text, "hits": [{"doc_id": d, "score": s} for d, s in hits]}))


def _features(args, txs):
    """Unified features for every transaction; the encoder is fit on train-tagged rows."""
    train = [t for t in txs if t.split == "train"]
    graph = table = ei = None
    anns = {}
    if args.mode != "feature_only":
        graph = load_graph(args.graph)
        table = EmbeddingTable.load(args.embeddings)
        anns = {a.tx_id: a for a in load_table("annotation", args.annotations).records}
    if args.mode == "kg_cs":
        ei = EmbeddingIndex.load(args.event_index)
    # block widths follow the loaded artifacts; --dim only sizes absent blocks
    encoder = fit_encoder(train, table.dim if table is not None else args.dim, ei.dim if ei is not None else args.dim)
    ctx = {}
    if ei is not None:
        contexts = split_contexts([t for t in txs if t.split == "train"], [t for t in txs if t.split != "train"])
        ctx = {t.tx_id: retrieve_context(t.tx_id, ei, build_query(t, contexts[t.tx_id], ei.dim), args.k_events)
               for t in txs}
    rows = {}
    for t in txs:
        path = induce_logic_path(anns[t.tx_id], graph) if graph is not None and t.tx_id in anns else None
        if graph is not None and path is None:
            raise KgamlError(f"no annotation for {t.tx_id}")
        rows[t.tx_id] = build_unified(t, path, table, ctx.get(t.tx_id), args.mode, encoder).r
    return encoder, rows


def cmd_featurize(args):
    txs, _ = _tx_split(args)
    encoder, rows = _features(args, txs)
    if str(args.out).endswith((".jsonl", ".ndjson")):
        write_jsonl(args.out, [{"tx_id": t.tx_id, "mode": args.mode, "r": [float(v) for v in rows[t.tx_id]],
                                "label": t.label, "split": t.split, "timestamp": t.timestamp} for t in txs])
    else:
        save_blob(args.out, {"type": "features", "mode": args.mode, "tx_ids": [t.tx_id for t in txs],
                             "encoder": encoder.to_dict(), "labels": [t.label for t in txs],
                             "splits": [t.split for t in txs], "timestamps": [t.timestamp for t in txs]},
                  {"r": np.stack([rows[t.tx_id] for t in txs])})
    print(json.dumps({"rows": len(txs), "width": encoder.width, "mode": args.mode}))


def _load_features(path):
    """Feature rows from a JSON-lines file or a binary blob, as (header, matrix)."""
    if str(path).endswith((".jsonl", ".ndjson")):
        rows = read_jsonl(path)
        header = {"tx_ids": [r["tx_id"] for r in rows], "labels": [r.get("label") for r in rows],
                  "splits": [r.get("split") for r in rows], "timestamps": [r.get("timestamp", 0) for r in rows],
                  "mode": rows[0]["mode"] if rows else None}
        return header, np.array([r["r"] for r in rows], dtype=np.float64)
    header, arrays = load_blob(path)
    return header, arrays["r"]


def cmd_train(args):
    header, R = _load_features(args.features)
    ids, labels, splits = header["tx_ids"], header["labels"], header["splits"]
    train_idx = [i for i, s in enumerate(splits) if s == "train" and labels[i] is not None]
    if args.labeled:
        keep = set(json.loads(Path(args.labeled).read_text())["tx_ids"])
        train_idx = [i for i in train_idx if ids[i] in keep]
    y = np.array([float(labels[i]) for i in train_idx])
    if args.lr is None:
        args.lr = 0.1 if args.backbone == "gbdt" else 1e-2
    if args.epochs is None:
        args.epochs = 100 if args.backbone == "sage" else 50
    if args.backbone == "gbdt":
        model = train_gbdt(R[train_idx], y, rounds=args.rounds, max_depth=args.max_depth, lr=args.lr,
                           min_leaf=args.min_leaf, seed=args.seed)
    elif args.backbone == "gru":
        order = sorted((i for i, s in enumerate(splits) if s == "train"), key=lambda i: (header["timestamps"][i], ids[i]))
        pos = {i: k for k, i in enumerate(order)}
        X = windows_ending_at(R[order], [pos[i] for i in train_idx], args.window_len)
        model = train_gru((X, y), hidden_dim=args.hidden, epochs=args.epochs, lr=args.lr, seed=args.seed)
    else:
        txs = load_table("tx", args.tx).records if args.tx else None
        if txs is None:
            raise KgamlError("--tx is required for the sage backbone")
        graph = build_tx_graph(txs, {i: R[k] for k, i in enumerate(ids)})
        model = train_sage(graph, {ids[i]: int(labels[i]) for i in train_idx}, hidden_dim=args.hidden,
                           sample_size=args.sample_size, epochs=args.epochs, lr=args.lr, seed=args.seed,
                           train_nodes=[ids[i] for i, s in enumerate(splits) if s == "train"])
    model.save(args.out)
    print(json.dumps({"backbone": args.backbone, "n_train": len(train_idx), "out": args.out}))


def cmd_predict(args):
    header, R = _load_features(args.features)
    ids, splits = header["tx_ids"], header["splits"]
    kind = load_blob(args.model)[0]["type"]
    idx = [i for i, s in enumerate(splits) if s == "test"] or list(range(len(ids)))
    if kind == "gbdt":
        p = GbdtModel.load(args.model).predict_proba(R[idx])
    elif kind == "gru":
        m = GruModel.load(args.model)
        order = sorted(range(len(ids)), key=lambda i: (header["timestamps"][i], ids[i]))
        pos = {i: k for k, i in enumerate(order)}
        p = m.predict_proba(windows_ending_at(R[order], [pos[i] for i in idx], m.window_len))
    else:
        m = SageModel.load(args.model)
        graph = build_tx_graph(load_table("tx", args.tx).records, {i: R[k] for k, i in enumerate(ids)})
        full = m.predict_proba(graph)
        p = np.array([full[graph.index(ids[i])] for i in idx])
    labels = header["labels"]
    write_jsonl(args.out, [{"tx_id": ids[i], "score": float(s), "label": labels[i]} for i, s in zip(idx, p)])
    print(json.dumps({"scored": len(idx)}))


def cmd_eval(args):
    rows = read_jsonl(args.scores)
    if args.manifest:
        test = set(SplitManifest.from_dict(json.loads(Path(args.manifest).read_text())).test_ids)
        rows = [r for r in rows if r["tx_id"] in test]
    labels = {}
    if args.tx:
        labels = {t.tx_id: t.label for t in load_table("tx", args.tx).records}
    y = [r["label"] if r.get("label") is not None else labels[r["tx_id"]] for r in rows]
    rep = compute_metrics([r["score"] for r in rows], y)
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True)
    if args.out:
        write_json(args.out, rep.to_dict())
    print(text)


def cmd_explain(args):
    txs = {t.tx_id: t for t in load_table("tx", args.tx).records}
    if args.tx_id not in txs:
        raise KgamlError(f"unknown tx_id {args.tx_id}")
    tx = txs[args.tx_id]
    graph = load_graph(args.graph)
    table = EmbeddingTable.load(args.embeddings)
    ctx = None
    event_text = None
    if args.events:
        events = load_table("event", args.events).records
        ei = EmbeddingIndex.from_events(events, table.dim)
        contexts = cluster_contexts(list(txs.values()))
        ctx = retrieve_context(tx.tx_id, ei, build_query(tx, contexts[tx.tx_id], table.dim), args.k_events)
        event_text = {e.event_id: f"{e.title}: {e.description}" for e in events}
    cands = enumerate_candidates(tx, graph, table, args.top_m)
    rep = explain(tx, cands, table, ctx, args.lambda1, args.lambda2, event_text=event_text)
    write_json(args.out, rep.to_dict())
    Path(args.out).with_suffix(".txt").write_text(rep.narrative + "\n", encoding="utf-8")
    print(rep.narrative)


def _pipeline_config(args) -> PipelineConfig:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("seed", "out_dir", "mode", "backbone"):
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    if "seed" not in doc:
        raise KgamlError("seed is mandatory (config key or --seed)")
    if not any(k in doc for k in ("synth", "tx_path")):
        doc["synth"] = {"n_total": 5000, "anomaly_rate": 0.01, "seed": 7}
    return PipelineConfig.from_dict(doc)


def cmd_pipeline(args):
    cfg = _pipeline_config(args)
    out = run_pipeline(cfg)
    print((out / "metrics.json").read_text(), end="")


def cmd_ablate(args):
    cfg = _pipeline_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    backbones = args.backbones.split(",")
    doc = run_ablation(cfg, seeds=seeds, backbones=backbones, out_dir=args.out)
    print(format_table(doc["table"]))


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgaml", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    s.add_argument("--config", help="JSON document with specs (or n_total/anomaly_rate)")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-total", type=int, default=5000)
    s.add_argument("--anomaly-rate", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="validate and normalize one table")
    s.add_argument("--kind", required=True, choices=["tx", "ann", "annotation", "event", "chunk"])
    s.add_argument("--path", required=True)
    s.add_argument("--out", help="normalized output (.jsonl or .csv)")
    s.add_argument("--annotations", help="check tx/annotation consistency")
    s.add_argument("--strict", action="store_true", help="non-zero exit if any row is rejected")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", help="write a train/test manifest")
    s.add_argument("--tx", required=True)
    s.add_argument("--strategy", choices=["temporal", "address_disjoint", "combined"], default="temporal")
    s.add_argument("--train-fraction", type=float, default=0.8)
    s.add_argument("--label-rate", type=float)
    s.add_argument("--min-per-type", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("annotate", help="retrieval-conditioned annotation of transactions")
    s.add_argument("--tx", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--chunks", required=True)
    s.add_argument("--rules")
    s.add_argument("--k-chunks", type=int, default=3)
    s.add_argument("--k-events", type=int, default=5)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_annotate)

    kg = sub.add_parser("kg", help="concept graph commands")
    kgs = kg.add_subparsers(dest="kg_command", required=True)
    s = kgs.add_parser("build", help="build the concept graph from train annotations")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--train", help="annotation file holding train-split records only")
    src.add_argument("--annotations", help="annotation file; combine with --manifest or --assume-train")
    s.add_argument("--manifest", help="restrict to the manifest's train ids")
    s.add_argument("--assume-train", action="store_true", help="treat every input annotation as train")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_kg_build)

    em = sub.add_parser("embed", help="concept embedding commands")
    ems = em.add_subparsers(dest="embed_command", required=True)
    s = ems.add_parser("train", help="DeepWalk over the concept graph")
    s.add_argument("--graph", required=True)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--walks-per-node", type=int, default=10)
    s.add_argument("--walk-length", type=int, default=20)
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--negatives", type=int, default=5)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--lr", type=float, default=0.025)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_embed_train)

    rg = sub.add_parser("rgc", help="retrieval index commands")
    rgs = rg.add_subparsers(dest="rgc_command", required=True)
    s = rgs.add_parser("index", help="embed events or expert chunks")
    s.add_argument("--kind", required=True, choices=["events", "chunks"])
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rgc_index)
    s = rgs.add_parser("query", help="top-k lookup; one query text per stdin line, JSON hits per line")
    s.add_argument("--idx", required=True)
    s.add_argument("--k", type=int, default=5)
    s.set_defaults(func=cmd_rgc_query)

    s = sub.add_parser("featurize", help="unified feature matrix")
    s.add_argument("--tx", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=MODES, default="kg_cs")
    s.add_argument("--annotations")
    s.add_argument("--graph")
    s.add_argument("--embeddings")
    s.add_argument("--event-index")
    s.add_argument("--k-events", type=int, default=5)
    s.add_argument("--dim", type=int, default=64, help="width of blocks with no artifact (zero-filled)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="fit a backbone on train rows")
    s.add_argument("--features", required=True)
    s.add_argument("--backbone", choices=BACKBONES, default="gbdt")
    s.add_argument("--mode", choices=MODES, help="recorded for reference; features fix the mode")
    s.add_argument("--labeled", help="JSON with the retained labeled tx_ids")
    s.add_argument("--tx", help="transactions (sage backbone)")
    s.add_argument("--rounds", type=int, default=200)
    s.add_argument("--max-depth", type=int, default=6)
    s.add_argument("--min-leaf", type=int, default=20)
    s.add_argument("--hidden", type=int, default=32)
    s.add_argument("--window-len", type=int, default=16)
    s.add_argument("--sample-size", type=int, default=10)
    s.add_argument("--epochs", type=int, help="default 50 (gru) / 100 (sage)")
    s.add_argument("--lr", type=float, help="default 0.1 (gbdt) / 0.01 (gru, sage)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="score test rows with a trained model")
    s.add_argument("--features", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--tx", help="transactions (sage backbone)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="macro metrics from a scores file")
    s.add_argument("--scores", required=True)
    s.add_argument("--manifest")
    s.add_argument("--tx", help="label source when scores carry none")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("explain", help="path-level explanation for one transaction")
    s.add_argument("--tx-id", required=True)
    s.add_argument("--tx", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--events")
    s.add_argument("--k-events", type=int, default=5)
    s.add_argument("--top-m", type=int, default=5)
    s.add_argument("--lambda1", type=float, default=0.5)
    s.add_argument("--lambda2", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_explain)

    for name, func, helptext in (("pipeline", cmd_pipeline, "end-to-end run"),
                                 ("ablate", cmd_ablate, "three-mode ablation table")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="JSON pipeline config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out-dir")
        s.add_argument("--mode", choices=MODES)
        s.add_argument("--backbone", choices=BACKBONES)
        if name == "ablate":
            s.add_argument("--seeds", default="0,1,2,3,4")
            s.add_argument("--backbones", default="gbdt")
            s.add_argument("--out", help="directory for ablation.json / ablation.md")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = args.func(args)
    except KgamlError as exc:
        stage = f" [stage {exc.stage}]" if getattr(exc, "stage", None) else ""
        print(f"error{stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
