"""Exact cosine retrieval over event and expert-knowledge corpora.

A transaction is rendered to text, optionally joined with a description of its
neighbourhood (the *cluster context*), hashed into a query vector and matched
against an ``EmbeddingIndex``.  Retrieved hits are folded into a single
context vector by a similarity-weighted mean.
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embed import embed_text
from .errors import DimensionMismatch, EmptyIndex
from .ingest import EventDoc, KnowledgeChunk, TransactionRecord
from .io import load_blob, save_blob

CORPUS_TAGS = ("events", "expert_chunks")
DEFAULT_K_CHUNKS = 3
DEFAULT_K_EVENTS = 5
TIE_DECIMALS = 12


def cosine_sim(q, d) -> float:
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if q.shape != d.shape:
        raise DimensionMismatch(f"{q.shape} vs {d.shape}")
    nq, nd = np.linalg.norm(q), np.linalg.norm(d)
    if nq == 0 or nd == 0:
        return 0.0
    return float(np.clip(q @ d / (nq * nd), -1.0, 1.0))


@dataclass
class EmbeddingIndex:
    dim: int
    doc_ids: list[str]
    vectors: np.ndarray
    payloads: list[str] = field(default_factory=list)
    corpus_tag: str = "events"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64).reshape(len(self.doc_ids), self.dim)
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("doc_ids must be unique")
        if self.corpus_tag not in CORPUS_TAGS:
            raise ValueError(f"corpus_tag must be one of {CORPUS_TAGS}")
        norms = np.linalg.norm(self.vectors, axis=1)
        nz = norms > 0
        self.vectors[nz] /= norms[nz, None]
        if not self.payloads:
            self.payloads = [""] * len(self.doc_ids)
        # rank of each doc_id in ascending order, used to break score ties
        order = sorted(range(len(self.doc_ids)), key=lambda i: self.doc_ids[i])
        self._id_rank = np.empty(len(order), dtype=np.int64)
        self._id_rank[order] = np.arange(len(order))
        self._pos = {d: i for i, d in enumerate(self.doc_ids)}

    def __len__(self):
        return len(self.doc_ids)

    def vector(self, doc_id: str) -> np.ndarray:
        return self.vectors[self._pos[doc_id]]

    def payload(self, doc_id: str) -> str:
        return self.payloads[self._pos[doc_id]]

    @classmethod
    def from_texts(cls, items: Sequence[tuple[str, str]], dim: int = 64, corpus_tag: str = "events") -> "EmbeddingIndex":
        ids = [i for i, _ in items]
        vecs = np.stack([embed_text(t, dim) for _, t in items]) if items else np.zeros((0, dim))
        return cls(dim, ids, vecs, [t for _, t in items], corpus_tag)

    @classmethod
    def from_events(cls, events: Sequence[EventDoc], dim: int = 64) -> "EmbeddingIndex":
        return cls.from_texts([(e.event_id, e.text) for e in events], dim, "events")

    @classmethod
    def from_chunks(cls, chunks: Sequence[KnowledgeChunk], dim: int = 64) -> "EmbeddingIndex":
        return cls.from_texts([(c.chunk_id, c.text) for c in chunks], dim, "expert_chunks")

    def save(self, path: str | Path) -> Path:
        return save_blob(path, {"type": "embedding_index", "dim": self.dim, "corpus_tag": self.corpus_tag,
                                "doc_ids": self.doc_ids, "payloads": self.payloads},
                         {"vectors": self.vectors})

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingIndex":
        header, arrays = load_blob(path)
        if header.get("type") != "embedding_index":
            raise ValueError(f"{path}: not an embedding index")
        return cls(header["dim"], header["doc_ids"], arrays["vectors"], header["payloads"], header["corpus_tag"])


@dataclass(frozen=True)
class RetrievedContext:
    tx_id: str
    hits: list[tuple[str, float]]
    context_vector: np.ndarray


def retrieve_top_k(index: EmbeddingIndex, q, k: int) -> list[tuple[str, float]]:
    """The k best cosine matches; equal scores (to 12 decimals) are ordered by ascending doc_id."""
    if len(index) == 0:
        raise EmptyIndex("index has no entries")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise DimensionMismatch(f"query has shape {q.shape}, index dim is {index.dim}")
    nq = np.linalg.norm(q)
    scores = np.zeros(len(index)) if nq == 0 else np.clip(index.vectors @ q / nq, -1.0, 1.0)
    # rounding makes float-noise ties exact, so the doc_id order decides them
    scores = np.round(scores, TIE_DECIMALS)
    order = np.lexsort((index._id_rank, -scores))[:k]
    return [(index.doc_ids[i], float(scores[i])) for i in order]


def context_vector(hits: Sequence[tuple[str, float]], index: EmbeddingIndex) -> np.ndarray:
    """Mean of hit vectors weighted by max(score, 0); zero if no hit scores above 0."""
    weights = np.array([max(s, 0.0) for _, s in hits])
    if len(hits) == 0 or weights.sum() <= 0:
        return np.zeros(index.dim)
    vecs = np.stack([index.vector(d) for d, _ in hits])
    return (weights / weights.sum()) @ vecs


def retrieve_context(tx_id: str, index: EmbeddingIndex, q, k: int) -> RetrievedContext:
    hits = retrieve_top_k(index, q, k)
    return RetrievedContext(tx_id, hits, context_vector(hits, index))


# --------------------------------------------------------------------- queries


def magnitude_token(value: float) -> str:
    """Order-of-magnitude bucket such as ``usd1e3`` (1000 <= value < 10000)."""
    if value < 1:
        return "usd1e0"
    return f"usd1e{int(math.floor(math.log10(value)))}"


def render_tx(tx: TransactionRecord) -> str:
    flag = "selftransfer" if tx.is_self_transfer else "external"
    return f"coin {tx.coin} direction {tx.direction} value {magnitude_token(tx.abs_usd_value)} {flag} year {tx.year}"


def build_query(tx: TransactionRecord, cluster_context: str | None = None, dim: int = 64) -> np.ndarray:
    text = render_tx(tx)
    if cluster_context:
        text = f"{text} {cluster_context}"
    return embed_text(text, dim)


# ------------------------------------------------------------- cluster context

SIGNAL_TEXT = {
    "fanout": "dispersal fanout burst",
    "forwarding": "layering chain forwarding hop",
    "equal_value": "mixing equal denomination round",
    "self_burst": "self transfer cycling burst",
    "surge": "market volume surge",
}
ROUTINE_TEXT = "routine activity"


@dataclass(frozen=True)
class ContextParams:
    window_s: int = 6 * 3600
    fanout_min: int = 3
    forward_ratio: float = 0.8
    equal_value_min: int = 3
    self_burst_min: int = 3
    surge_min: int = 12


def _count_in(sorted_ts: list[int], lo: int, hi: int) -> int:
    return bisect_right(sorted_ts, hi) - bisect_left(sorted_ts, lo)


def cluster_signals(txs: Sequence[TransactionRecord], params: ContextParams = ContextParams()) -> dict[str, list[str]]:
    """Neighbourhood signals per transaction, computed from unlabeled structure only.

    Signals: sender fan-out within the window, value forwarding along a hop,
    repeated equal values (same coin), bursts of self transfers, and a
    coin-wide volume surge.
    """
    w = params.window_s
    by_sender: dict[str, list[TransactionRecord]] = defaultdict(list)
    by_receiver: dict[str, list[TransactionRecord]] = defaultdict(list)
    self_ts: dict[str, list[int]] = defaultdict(list)
    coin_ts: dict[str, list[int]] = defaultdict(list)
    value_ts: dict[tuple[str, int], list[int]] = defaultdict(list)
    for t in txs:
        coin_ts[t.coin].append(t.timestamp)
        value_ts[(t.coin, round(t.abs_usd_value * 100))].append(t.timestamp)
        if t.is_self_transfer:
            self_ts[t.from_addr].append(t.timestamp)
        else:
            by_sender[t.from_addr].append(t)
            by_receiver[t.to_addr].append(t)
    for d in (self_ts, coin_ts, value_ts):
        for v in d.values():
            v.sort()
    for d in (by_sender, by_receiver):
        for v in d.values():
            v.sort(key=lambda r: (r.timestamp, r.tx_id))

    out: dict[str, list[str]] = {}
    for t in txs:
        sig = []
        lo, hi = t.timestamp - w, t.timestamp + w
        if not t.is_self_transfer:
            receivers = {r.to_addr for r in by_sender[t.from_addr] if lo <= r.timestamp <= hi}
            if len(receivers) >= params.fanout_min:
                sig.append("fanout")
            fwd = any(t.timestamp < r.timestamp <= hi
                      and params.forward_ratio * t.abs_usd_value <= r.abs_usd_value <= t.abs_usd_value
                      for r in by_sender.get(t.to_addr, ()))
            back = any(lo <= r.timestamp < t.timestamp
                       and params.forward_ratio * r.abs_usd_value <= t.abs_usd_value <= r.abs_usd_value
                       for r in by_receiver.get(t.from_addr, ()))
            if fwd or back:
                sig.append("forwarding")
        if _count_in(value_ts[(t.coin, round(t.abs_usd_value * 100))], lo, hi) >= params.equal_value_min:
            sig.append("equal_value")
        if t.is_self_transfer and _count_in(self_ts[t.from_addr], lo, hi) >= params.self_burst_min:
            sig.append("self_burst")
        if _count_in(coin_ts[t.coin], lo, hi) >= params.surge_min:
            sig.append("surge")
        out[t.tx_id] = sig
    return out


def render_context(signals: Sequence[str]) -> str:
    if not signals:
        return ROUTINE_TEXT
    return " ".join(SIGNAL_TEXT[s] for s in signals)


def cluster_contexts(txs: Sequence[TransactionRecord], params: ContextParams = ContextParams()) -> dict[str, str]:
    return {k: render_context(v) for k, v in cluster_signals(txs, params).items()}
