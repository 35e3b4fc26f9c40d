"""Two-layer GraphSAGE (mean aggregator, sampled neighbours) over a transaction graph.

Edges join transactions that share an address.  Training only ever sees the
subgraph induced by the training nodes, so test nodes cannot influence the
learned parameters; at inference the full graph is used.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import NoLabeledNodes
from ..io import load_blob, save_blob
from .common import Adam, class_weights, glorot, sigmoid

LAYER_KEYS = ("Ws1", "Wn1", "b1", "Ws2", "Wn2", "b2", "w_head", "b_head")


@dataclass
class TxGraph:
    nodes: list[str]
    features: np.ndarray
    adjacency: list[list[int]]

    def __post_init__(self):
        self._pos = {n: i for i, n in enumerate(self.nodes)}

    def index(self, node: str) -> int:
        return self._pos[node]

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(self.nodes[i], self.nodes[j]) for i, nbrs in enumerate(self.adjacency) for j in nbrs if i < j]

    def subgraph(self, keep: Sequence[str]) -> "TxGraph":
        """Induced subgraph on ``keep``, preserving the original node order."""
        keep_set = set(keep)
        idx = [i for i, n in enumerate(self.nodes) if n in keep_set]
        remap = {old: new for new, old in enumerate(idx)}
        adj = [[remap[j] for j in self.adjacency[i] if j in remap] for i in idx]
        return TxGraph([self.nodes[i] for i in idx], self.features[idx], adj)


def build_tx_graph(transactions, features) -> TxGraph:
    """Undirected graph on transactions; an edge joins two distinct transactions sharing any address.

    ``features`` maps tx_id to its vector (or is a matrix aligned with ``transactions``).
    """
    ids = [t.tx_id for t in transactions]
    if isinstance(features, Mapping):
        X = np.stack([np.asarray(features[i], dtype=np.float64) for i in ids]) if ids else np.zeros((0, 0))
    else:
        X = np.asarray(features, dtype=np.float64)
    by_addr: dict[str, list[int]] = defaultdict(list)
    for i, t in enumerate(transactions):
        for a in {t.from_addr, t.to_addr}:
            by_addr[a].append(i)
    nbrs: list[set[int]] = [set() for _ in ids]
    for members in by_addr.values():
        for i in members:
            nbrs[i].update(members)
    adj = [sorted(s - {i}) for i, s in enumerate(nbrs)]
    return TxGraph(ids, X, adj)


def sample_neighbors(graph: TxGraph, sample_size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform sampling with replacement; returns (indices [n, s], has_neighbor [n])."""
    n = len(graph.nodes)
    idx = np.zeros((n, sample_size), dtype=np.int64)
    has = np.zeros(n)
    draws = rng.random((n, sample_size))
    for i, nb in enumerate(graph.adjacency):
        if nb:
            idx[i] = np.asarray(nb)[(draws[i] * len(nb)).astype(np.int64)]
            has[i] = 1.0
    return idx, has


def init_sage(input_dim: int, hidden_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {
        "Ws1": glorot(rng, input_dim, hidden_dim), "Wn1": glorot(rng, input_dim, hidden_dim),
        "b1": np.zeros(hidden_dim),
        "Ws2": glorot(rng, hidden_dim, hidden_dim), "Wn2": glorot(rng, hidden_dim, hidden_dim),
        "b2": np.zeros(hidden_dim),
        "w_head": glorot(rng, hidden_dim, 1)[:, 0], "b_head": np.zeros(1),
    }


def _aggregate(H: np.ndarray, samples: np.ndarray, has: np.ndarray) -> np.ndarray:
    return H[samples].mean(axis=1) * has[:, None]


def sage_forward(params, X, samples1, has1, samples2, has2):
    A1 = _aggregate(X, samples1, has1)
    Z1 = X @ params["Ws1"] + A1 @ params["Wn1"] + params["b1"]
    H1 = np.maximum(Z1, 0.0)
    A2 = _aggregate(H1, samples2, has2)
    Z2 = H1 @ params["Ws2"] + A2 @ params["Wn2"] + params["b2"]
    H2 = np.maximum(Z2, 0.0)
    logits = H2 @ params["w_head"] + params["b_head"][0]
    return logits, (A1, Z1, H1, A2, Z2, H2)


def _scatter_mean_grad(dA: np.ndarray, samples: np.ndarray, has: np.ndarray, n: int) -> np.ndarray:
    s = samples.shape[1]
    contrib = np.repeat(dA * (has[:, None] / s), s, axis=0)
    out = np.zeros((n, dA.shape[1]))
    np.add.at(out, samples.ravel(), contrib)
    return out


def sage_loss_and_grads(params, X, samples1, has1, samples2, has2, labeled: np.ndarray, y: np.ndarray,
                        w: np.ndarray | None = None):
    """Weighted mean BCE on the labeled node indices, with exact gradients for a fixed neighbour sample."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    logits, (A1, Z1, H1, A2, Z2, H2) = sage_forward(params, X, samples1, has1, samples2, has2)
    lg = logits[labeled]
    wsum = w.sum()
    loss = float((w * (np.logaddexp(0.0, lg) - y * lg)).sum() / wsum)
    dlogit = np.zeros(len(X))
    np.add.at(dlogit, labeled, w * (sigmoid(lg) - y) / wsum)
    g = {}
    g["w_head"] = H2.T @ dlogit
    g["b_head"] = np.array([dlogit.sum()])
    dZ2 = np.outer(dlogit, params["w_head"]) * (Z2 > 0)
    g["Ws2"] = H1.T @ dZ2
    g["Wn2"] = A2.T @ dZ2
    g["b2"] = dZ2.sum(axis=0)
    dH1 = dZ2 @ params["Ws2"].T + _scatter_mean_grad(dZ2 @ params["Wn2"].T, samples2, has2, len(X))
    dZ1 = dH1 * (Z1 > 0)
    g["Ws1"] = X.T @ dZ1
    g["Wn1"] = A1.T @ dZ1
    g["b1"] = dZ1.sum(axis=0)
    return loss, g


@dataclass
class SageModel:
    input_dim: int
    hidden_dim: int
    sample_size: int
    params: dict[str, np.ndarray]
    seed: int = 0
    hyper: dict = field(default_factory=dict)
    epoch_losses: list[float] = field(default_factory=list)

    def predict_proba(self, graph: TxGraph) -> np.ndarray:
        """Scores every node of ``graph`` using a neighbour sample fixed by the model seed."""
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(2,)))
        s1, h1 = sample_neighbors(graph, self.sample_size, rng)
        s2, h2 = sample_neighbors(graph, self.sample_size, rng)
        logits, _ = sage_forward(self.params, graph.features, s1, h1, s2, h2)
        return sigmoid(logits)

    def save(self, path: str | Path) -> Path:
        header = {"type": "sage", "input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                  "sample_size": self.sample_size, "seed": self.seed, "layers": 2,
                  "hyper": self.hyper, "epoch_losses": self.epoch_losses}
        return save_blob(path, header, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "SageModel":
        header, arrays = load_blob(path)
        if header.get("type") != "sage":
            raise ValueError(f"{path}: not a sage model")
        return cls(header["input_dim"], header["hidden_dim"], header["sample_size"], arrays,
                   header["seed"], header["hyper"], header["epoch_losses"])


def train_sage(graph: TxGraph, labels: Mapping[str, int], hidden_dim: int = 32, sample_size: int = 10,
               epochs: int = 100, lr: float = 1e-2, seed: int = 0, train_nodes: Sequence[str] | None = None,
               balance: bool = True) -> SageModel:
    """Fit on the subgraph induced by ``train_nodes`` (default: the labeled nodes)."""
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    if not labels:
        raise NoLabeledNodes("no labeled training nodes")
    keep = set(labels) if train_nodes is None else set(train_nodes) | set(labels)
    sub = graph.subgraph(keep)
    labeled_ids = [n for n in sub.nodes if n in labels]
    if not labeled_ids:
        raise NoLabeledNodes("labeled nodes are absent from the graph")
    labeled = np.array([sub.index(n) for n in labeled_ids])
    y = np.array([float(labels[n]) for n in labeled_ids])
    w = class_weights(y) if balance else np.ones_like(y)
    params = init_sage(sub.features.shape[1], hidden_dim, seed)
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    losses = []
    for _ in range(epochs):
        s1, h1 = sample_neighbors(sub, sample_size, rng)
        s2, h2 = sample_neighbors(sub, sample_size, rng)
        loss, grads = sage_loss_and_grads(params, sub.features, s1, h1, s2, h2, labeled, y, w)
        losses.append(loss)
        opt.step(params, grads)
    hyper = {"epochs": epochs, "lr": lr, "balance": balance, "n_train_nodes": len(sub.nodes)}
    return SageModel(sub.features.shape[1], hidden_dim, sample_size, params, seed, hyper, losses)
