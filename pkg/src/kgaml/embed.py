"""Concept embeddings: truncated random walks + skip-gram with negative sampling,
path pooling, and a deterministic hashed text embedder used as the offline
stand-in for an external text-embedding model."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateCorpus, EmptyGraph
from .io import load_blob, save_blob
from .kg import ConceptGraph, LogicPath

TYPE_WEIGHTS = {"AT": 0.1, "SF": 0.2, "ST": 0.3}
KW_TOTAL_WEIGHT = 0.4
WEIGHTINGS = ("uniform", "type_weighted", "softmax_sim")


@dataclass(frozen=True)
class WalkCorpus:
    walks: list[list[int]]
    walks_per_node: int
    walk_length: int
    seed: int
    node_ids: tuple[int, ...] = ()

    @property
    def params(self) -> dict:
        return {"walks_per_node": self.walks_per_node, "walk_length": self.walk_length, "seed": self.seed}


@dataclass
class EmbeddingTable:
    dim: int
    node_ids: np.ndarray
    matrix: np.ndarray
    epoch_losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self._row = {int(n): i for i, n in enumerate(self.node_ids)}

    @property
    def zero_vector(self) -> np.ndarray:
        return np.zeros(self.dim)

    @property
    def vectors(self) -> dict[int, np.ndarray]:
        return {int(n): self.matrix[i] for i, n in enumerate(self.node_ids)}

    def lookup(self, node_id: int | None) -> np.ndarray:
        if node_id is None:
            return np.zeros(self.dim)
        i = self._row.get(int(node_id))
        return np.zeros(self.dim) if i is None else self.matrix[i].copy()

    def scaled(self, c: float) -> "EmbeddingTable":
        return EmbeddingTable(self.dim, self.node_ids.copy(), self.matrix * c)

    def save(self, path: str | Path) -> Path:
        # float32 on disk, as the interchange format promises
        return save_blob(path, {"type": "embedding_table", "dim": self.dim, "n": len(self.node_ids),
                                "epoch_losses": self.epoch_losses},
                         {"node_ids": self.node_ids, "vectors": self.matrix.astype(np.float32)})

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        header, arrays = load_blob(path)
        if header.get("type") != "embedding_table":
            raise ValueError(f"{path}: not an embedding table")
        return cls(header["dim"], arrays["node_ids"], arrays["vectors"].astype(np.float64),
                   list(header.get("epoch_losses", [])))


# ------------------------------------------------------------------------ walks


def _adjacency(graph) -> dict[int, list[int]]:
    if isinstance(graph, ConceptGraph):
        return graph.adjacency()
    if isinstance(graph, Mapping):
        adj: dict[int, set[int]] = {int(k): set() for k in graph}
        for u, nbrs in graph.items():
            for v in nbrs:
                if int(v) == int(u):
                    continue
                adj.setdefault(int(v), set())
                adj[int(u)].add(int(v))
                adj[int(v)].add(int(u))
        return {k: sorted(v) for k, v in sorted(adj.items())}
    raise TypeError(f"cannot walk a {type(graph).__name__}")


def generate_walks(graph, walks_per_node: int = 10, walk_length: int = 20, seed: int = 0) -> WalkCorpus:
    """Uniform truncated random walks, treating edges as undirected.

    Each start node has its own RNG stream derived from (seed, node_id), so the
    corpus does not depend on the order nodes are visited in.
    """
    adj = _adjacency(graph)
    if not adj:
        raise EmptyGraph("cannot walk an empty graph")
    if walk_length < 2:
        raise ValueError("walk_length must be >= 2")
    walks = []
    for node in sorted(adj):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(node,)))
        for _ in range(walks_per_node):
            walk = [node]
            cur = node
            for _ in range(walk_length - 1):
                nbrs = adj[cur]
                if not nbrs:
                    break
                cur = nbrs[int(rng.integers(len(nbrs)))]
                walk.append(cur)
            walks.append(walk)
    return WalkCorpus(walks, walks_per_node, walk_length, seed, tuple(sorted(adj)))


# -------------------------------------------------------------------- skip-gram


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def skipgram_loss_grad(w_in: np.ndarray, w_out: np.ndarray, centers: np.ndarray,
                       contexts: np.ndarray, negatives: np.ndarray):
    """Summed negative-sampling loss over (center, context) pairs and its gradients.

    ``negatives`` has shape (n_pairs, n_neg).  Per pair:
    L = -log s(u_c . h_v) - sum_n log s(-u_n . h_v).
    Returns (loss, grad_in, grad_out) with grads the same shape as the weights.
    """
    h = w_in[centers]
    u_pos = w_out[contexts]
    u_neg = w_out[negatives]
    s_pos = np.einsum("ij,ij->i", h, u_pos)
    s_neg = np.einsum("ikj,ij->ik", u_neg, h)
    loss = -_log_sigmoid(s_pos).sum() - _log_sigmoid(-s_neg).sum()
    g_pos = _sigmoid(s_pos) - 1.0
    g_neg = _sigmoid(s_neg)
    grad_h = g_pos[:, None] * u_pos + np.einsum("ik,ikj->ij", g_neg, u_neg)
    grad_in = _scatter_rows(centers, grad_h, w_in.shape)
    out_idx = np.concatenate([contexts, negatives.ravel()])
    out_val = np.concatenate([g_pos[:, None] * h, (g_neg[:, :, None] * h[:, None, :]).reshape(-1, h.shape[1])])
    grad_out = _scatter_rows(out_idx, out_val, w_out.shape)
    return float(loss), grad_in, grad_out


def _scatter_rows(idx: np.ndarray, values: np.ndarray, shape) -> np.ndarray:
    """Row-wise scatter-add (a faster ``np.add.at`` for many duplicate rows)."""
    out = np.zeros(shape)
    if len(idx) == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    out[sidx[starts]] = np.add.reduceat(values[order], starts, axis=0)
    return out


def _walk_pairs(walk: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    n = len(walk)
    centers, contexts = [], []
    for off in range(1, window + 1):
        if off >= n:
            break
        centers.append(walk[:-off])
        contexts.append(walk[off:])
        centers.append(walk[off:])
        contexts.append(walk[:-off])
    if not centers:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def init_skipgram(n: int, dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    w_in = (rng.random((n, dim)) - 0.5) / dim
    w_out = np.zeros((n, dim))
    return w_in, w_out


def train_skipgram(corpus: WalkCorpus, dim: int = 64, window: int = 5, negatives: int = 5,
                   epochs: int = 5, lr: float = 0.025, seed: int = 0, min_lr: float = 1e-4) -> EmbeddingTable:
    """Skip-gram with negative sampling; one SGD step per walk, single-threaded.

    Negatives come from the unigram^0.75 distribution of the corpus; the
    learning rate decays linearly from ``lr`` to ``min_lr`` over all steps.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if not corpus.walks:
        raise DegenerateCorpus("empty corpus")
    vocab = sorted(set(corpus.node_ids) | {v for w in corpus.walks for v in w})
    index = {v: i for i, v in enumerate(vocab)}
    walks = [np.array([index[v] for v in w], dtype=np.int64) for w in corpus.walks]
    if not any(len(w) > 1 for w in walks) or window < 1:
        raise DegenerateCorpus("no (center, context) pair in corpus")

    counts = np.bincount(np.concatenate(walks), minlength=len(vocab)).astype(np.float64)
    noise = counts ** 0.75
    noise_cdf = np.cumsum(noise / noise.sum())
    noise_cdf[-1] = 1.0

    w_in, w_out = init_skipgram(len(vocab), dim, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    pairs = [_walk_pairs(w, window) for w in walks]
    total_steps = max(1, epochs * len(walks))
    step = 0
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(len(walks))
        loss_sum, n_pairs = 0.0, 0
        for wi in order:
            centers, contexts = pairs[wi]
            if len(centers) == 0:
                step += 1
                continue
            negs = np.searchsorted(noise_cdf, rng.random((len(centers), negatives)), side="right")
            negs = np.minimum(negs, len(vocab) - 1)
            loss, g_in, g_out = skipgram_loss_grad(w_in, w_out, centers, contexts, negs)
            alpha = lr - (lr - min_lr) * step / total_steps
            w_in -= alpha * g_in
            w_out -= alpha * g_out
            loss_sum += loss
            n_pairs += len(centers)
            step += 1
        epoch_losses.append(loss_sum / max(n_pairs, 1))
    return EmbeddingTable(dim, np.array(vocab, dtype=np.int64), w_in, epoch_losses)


def deepwalk(graph: ConceptGraph, dim: int = 64, walks_per_node: int = 10, walk_length: int = 20,
             window: int = 5, negatives: int = 5, epochs: int = 5, lr: float = 0.025, seed: int = 0) -> EmbeddingTable:
    corpus = generate_walks(graph, walks_per_node, walk_length, seed)
    return train_skipgram(corpus, dim=dim, window=window, negatives=negatives, epochs=epochs, lr=lr, seed=seed)


# ---------------------------------------------------------------------- pooling


def path_weights(path: LogicPath, vectors: np.ndarray, weighting: str = "uniform", tau: float = 1.0) -> np.ndarray:
    nodes = path.nodes
    if weighting == "uniform":
        return np.full(len(nodes), 1.0 / len(nodes))
    if weighting == "type_weighted":
        k = len(path.kws)
        w = np.array([TYPE_WEIGHTS.get(n.node_type, KW_TOTAL_WEIGHT / max(k, 1)) for n in nodes])
        return w / w.sum()
    if weighting == "softmax_sim":
        mean = vectors.mean(axis=0)
        logits = vectors @ mean / tau
        logits -= logits.max()
        w = np.exp(logits)
        return w / w.sum()
    raise ValueError(f"unknown weighting {weighting!r}")


def pool_path(path: LogicPath, table: EmbeddingTable, weighting: str = "uniform", tau: float = 1.0) -> np.ndarray:
    """Weighted sum of node vectors along the path.

    Weights sum to one over all slots; unseen slots keep their weight but
    contribute the zero vector, so missing concepts shrink the result rather
    than being renormalized away.
    """
    vectors = np.stack([table.lookup(n.node_id) for n in path.nodes])
    return path_weights(path, vectors, weighting, tau) @ vectors


# ------------------------------------------------------------------ text vectors

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _hash64(feature: str, salt: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8, salt=salt).digest(), "little")


def embed_text(text: str, dim: int = 64) -> np.ndarray:
    """Signed feature hashing of unigrams and adjacent bigrams, L2-normalized.

    Empty (token-free) text maps to the zero vector.
    """
    if dim < 8:
        raise ValueError("dim must be >= 8")
    tokens = tokenize(text or "")
    vec = np.zeros(dim)
    feats = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    for f in feats:
        bucket = _hash64(f, b"bucket") % dim
        sign = 1.0 if _hash64(f, b"sign") & 1 else -1.0
        vec[bucket] += sign
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
