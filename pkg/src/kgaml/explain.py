"""Path-level explanations: pick the concept path best aligned with a transaction and its retrieved events."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embed import EmbeddingTable, cosine, embed_text, pool_path
from .errors import DimMismatch, EmptyGraph
from .ingest import TransactionRecord
from .kg import ConceptGraph, LogicPath, path_from_spine
from .rgc import RetrievedContext, render_tx

DEFAULT_LAMBDA1 = 0.5
DEFAULT_LAMBDA2 = 0.5
DEFAULT_TOP_M = 5


@dataclass
class CandidatePathSet:
    tx_id: str
    candidates: list[LogicPath]
    provenance: list[dict] = field(default_factory=list)


def tx_embedding(tx: TransactionRecord, dim: int) -> np.ndarray:
    return embed_text(render_tx(tx), dim)


def enumerate_candidates(tx: TransactionRecord, graph: ConceptGraph, table: EmbeddingTable,
                         top_m: int = DEFAULT_TOP_M) -> CandidatePathSet:
    """Top ``top_m`` complete AT->SF->ST spines (with KW children) by cosine to the transaction rendering."""
    if len(graph) == 0:
        raise EmptyGraph("concept graph is empty")
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    q = tx_embedding(tx, table.dim)
    scored = []
    for at, sf, st in graph.spines():
        path = path_from_spine(tx.tx_id, graph, at, sf, st)
        scored.append((-cosine(q, pool_path(path, table)), path.names, path))
    scored.sort(key=lambda s: (s[0], s[1]))
    keep = scored[:top_m]
    prov = [{"rank": r, "query_sim": -s, "source": "spine"} for r, (s, _, _) in enumerate(keep)]
    return CandidatePathSet(tx.tx_id, [p for _, _, p in keep], prov)


def path_sims(path: LogicPath, tx_emb, ctx_emb, table: EmbeddingTable) -> tuple[float, float]:
    tx_emb = np.asarray(tx_emb, dtype=np.float64)
    ctx_emb = np.asarray(ctx_emb, dtype=np.float64)
    for name, v in (("transaction", tx_emb), ("context", ctx_emb)):
        if v.shape != (table.dim,):
            raise DimMismatch(f"{name} embedding has shape {v.shape}, pooling dim is {table.dim}")
    pooled = pool_path(path, table)
    return cosine(tx_emb, pooled), cosine(ctx_emb, pooled)


def score_path(path: LogicPath, tx_emb, ctx_emb, table: EmbeddingTable,
               lambda1: float = DEFAULT_LAMBDA1, lambda2: float = DEFAULT_LAMBDA2) -> float:
    sim_x, sim_e = path_sims(path, tx_emb, ctx_emb, table)
    return lambda1 * sim_x + lambda2 * sim_e


@dataclass
class ExplanationReport:
    tx_id: str
    best_path: LogicPath
    score: float
    lambda1: float
    lambda2: float
    term_breakdown: tuple[float, float]
    supporting_events: list[tuple[str, float]]
    narrative: str
    candidate_scores: list[tuple[tuple[str, ...], float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        p = self.best_path
        return {
            "tx_id": self.tx_id,
            "best_path": {"AT": p.at.name, "SF": p.sf.name, "ST": p.st.name, "KW": [k.name for k in p.kws]},
            "score": self.score, "lambda1": self.lambda1, "lambda2": self.lambda2,
            "sim_x": self.term_breakdown[0], "sim_e": self.term_breakdown[1],
            "supporting_events": [{"event_id": e, "score": s} for e, s in self.supporting_events],
            "candidates": [{"path": list(n), "score": s} for n, s in self.candidate_scores],
            "narrative": self.narrative,
        }


def render_narrative(tx_id: str, path: LogicPath, events: Sequence[tuple[str, float]],
                     event_text: dict[str, str] | None = None) -> str:
    kws = ", ".join(k.name for k in path.kws) or "none recorded"
    lines = [
        f"Transaction {tx_id} is explained by the anomaly type '{path.at.name}'.",
        f"Within it, the subtype family '{path.sf.name}' applies.",
        f"The specific subtype is '{path.st.name}'.",
        f"Indicative keywords: {kws}.",
        "Supporting events:",
    ]
    if not events:
        lines.append("- none retrieved")
    for eid, s in events:
        text = (event_text or {}).get(eid, "")
        lines.append(f"- {eid} (similarity {s:.3f})" + (f": {text}" if text else ""))
    return "\n".join(lines)


def explain(tx: TransactionRecord, candidates: CandidatePathSet | Sequence[LogicPath], table: EmbeddingTable,
            ctx: RetrievedContext | np.ndarray | None = None, lambda1: float = DEFAULT_LAMBDA1,
            lambda2: float = DEFAULT_LAMBDA2, tx_emb: np.ndarray | None = None,
            event_text: dict[str, str] | None = None) -> ExplanationReport:
    """Argmax of the alignment score over candidates; equal scores resolve to the smallest path names."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("lambda weights must be non-negative")
    paths = list(candidates.candidates if isinstance(candidates, CandidatePathSet) else candidates)
    if not paths:
        raise ValueError("no candidate paths")
    if tx_emb is None:
        tx_emb = tx_embedding(tx, table.dim)
    if isinstance(ctx, RetrievedContext):
        ctx_vec, hits = ctx.context_vector, list(ctx.hits)
    else:
        ctx_vec, hits = (np.zeros(table.dim) if ctx is None else ctx), []
    rows = []
    for p in paths:
        sx, se = path_sims(p, tx_emb, ctx_vec, table)
        rows.append((lambda1 * sx + lambda2 * se, p.names, sx, se, p))
    best = min(rows, key=lambda r: (-r[0], r[1]))
    score, _, sx, se, path = best
    return ExplanationReport(
        tx_id=tx.tx_id, best_path=path, score=score, lambda1=lambda1, lambda2=lambda2,
        term_breakdown=(sx, se), supporting_events=hits,
        narrative=render_narrative(tx.tx_id, path, hits, event_text),
        candidate_scores=[(r[1], r[0]) for r in rows],
    )
