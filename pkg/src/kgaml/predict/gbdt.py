"""Gradient-boosted regression trees on the logistic loss with histogram split search."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import SingleClassInput
from ..io import load_blob, save_blob
from .common import class_weights, sigmoid, weighted_logloss

N_BINS = 256


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    default_left: np.ndarray

    @property
    def depth(self) -> int:
        def d(i):
            return 0 if self.left[i] < 0 else 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index per row; ``x <= threshold`` goes left, NaN follows the majority child."""
        node = np.zeros(len(X), dtype=np.int64)
        active = self.left[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            x = X[rows, self.feature[n]]
            go_left = np.where(np.isnan(x), self.default_left[n], x <= self.threshold[n])
            node[rows] = np.where(go_left, self.left[n], self.right[n])
            active = self.left[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    @classmethod
    def stump(cls, feature: int, threshold: float, left_value: float, right_value: float) -> "Tree":
        return cls(np.array([feature, -1, -1]), np.array([threshold, 0.0, 0.0]), np.array([1, -1, -1]),
                   np.array([2, -1, -1]), np.array([0.0, left_value, right_value]), np.array([True, False, False]))


@dataclass
class GbdtModel:
    trees: list[Tree]
    learning_rate: float
    base_score: float
    max_depth: int = 6
    params: dict = field(default_factory=dict)
    train_losses: list[float] = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        f = np.full(len(X), self.base_score)
        for t in self.trees:
            f += self.learning_rate * t.predict(X)
        return f

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision_function(X))

    def save(self, path: str | Path) -> Path:
        arrays = {}
        for i, t in enumerate(self.trees):
            for name in ("feature", "threshold", "left", "right", "value", "default_left"):
                arrays[f"t{i}_{name}"] = getattr(t, name)
        header = {"type": "gbdt", "n_trees": len(self.trees), "learning_rate": self.learning_rate,
                  "base_score": self.base_score, "max_depth": self.max_depth, "params": self.params,
                  "train_losses": self.train_losses}
        return save_blob(path, header, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "GbdtModel":
        header, arrays = load_blob(path)
        if header.get("type") != "gbdt":
            raise ValueError(f"{path}: not a gbdt model")
        trees = [Tree(*(arrays[f"t{i}_{n}"] for n in ("feature", "threshold", "left", "right", "value", "default_left")))
                 for i in range(header["n_trees"])]
        return cls(trees, header["learning_rate"], header["base_score"], header["max_depth"],
                   header["params"], header["train_losses"])


def predict_gbdt(model: GbdtModel, feature) -> np.ndarray | float:
    X = np.asarray(feature, dtype=np.float64)
    p = model.predict_proba(X)
    return float(p[0]) if X.ndim == 1 else p


def bin_edges(column: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Candidate thresholds: midpoints of distinct values, or quantile cuts when there are too many."""
    u = np.unique(column)
    if len(u) <= n_bins:
        return (u[:-1] + u[1:]) / 2.0
    qs = np.quantile(column, np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
    cuts = np.unique(qs)
    return cuts[cuts < u[-1]]


def _split_gain(gl, hl, gr, hr, lam):
    return gl * gl / (hl + lam) + gr * gr / (hr + lam) - (gl + gr) ** 2 / (hl + hr + lam)


def _grow_tree(codes, cuts, g, h, max_depth, min_leaf, lam, min_gain):
    n_feat = codes.shape[1]
    offsets = np.arange(n_feat) * N_BINS
    n_cuts = np.array([len(c) for c in cuts])
    valid_bin = np.arange(N_BINS)[None, :] < n_cuts[:, None]

    feature, threshold, left, right, value, default_left = [], [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0), (default_left, False)):
            lst.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(g)), 0)]
    while stack:
        nid, idx, depth = stack.pop()
        G, H = g[idx].sum(), h[idx].sum()
        value[nid] = -G / (H + lam)
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            continue
        flat = (codes[idx] + offsets).ravel()
        gh = np.bincount(flat, weights=np.repeat(g[idx], n_feat), minlength=n_feat * N_BINS).reshape(n_feat, N_BINS)
        hh = np.bincount(flat, weights=np.repeat(h[idx], n_feat), minlength=n_feat * N_BINS).reshape(n_feat, N_BINS)
        ch = np.bincount(flat, minlength=n_feat * N_BINS).reshape(n_feat, N_BINS)
        gl, hl, cl = gh.cumsum(axis=1), hh.cumsum(axis=1), ch.cumsum(axis=1)
        gain = _split_gain(gl, hl, G - gl, H - hl, lam)
        ok = valid_bin & (cl >= min_leaf) & (len(idx) - cl >= min_leaf)
        gain = np.where(ok, gain, -np.inf)
        best = int(np.argmax(gain))
        f, b = divmod(best, N_BINS)
        if not gain[f, b] > min_gain:
            continue
        mask = codes[idx, f] <= b
        li, ri = idx[mask], idx[~mask]
        feature[nid], threshold[nid] = f, float(cuts[f][b])
        default_left[nid] = len(li) >= len(ri)
        lnode, rnode = new_node(), new_node()
        left[nid], right[nid] = lnode, rnode
        stack.append((rnode, ri, depth + 1))
        stack.append((lnode, li, depth + 1))
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                np.array(value), np.array(default_left))


def train_gbdt(X, y, rounds: int = 200, max_depth: int = 6, lr: float = 0.1, min_leaf: int = 20,
               seed: int = 0, reg_lambda: float = 1.0, min_gain: float = 1e-12,
               balance: bool = True) -> GbdtModel:
    """Fit ``rounds`` Newton-step trees to the (class-weighted) logistic loss.

    The prior logit is the unweighted positive rate.  A tree whose step would
    raise the training loss is shrunk by halving until it does not, so the
    recorded per-round loss never increases.  Training is deterministic;
    ``seed`` is recorded for provenance.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise SingleClassInput("training labels contain a single class")
    w = class_weights(y) if balance else np.ones_like(y)
    rate = y.mean()
    base = float(np.log(rate / (1 - rate)))
    cuts = [bin_edges(X[:, j]) for j in range(X.shape[1])]
    codes = np.stack([np.searchsorted(c, X[:, j], side="left") for j, c in enumerate(cuts)], axis=1).astype(np.int64)

    F = np.full(len(y), base)
    losses = [weighted_logloss(F, y, w)]
    trees = []
    for _ in range(rounds):
        p = sigmoid(F)
        g = w * (p - y)
        h = np.maximum(w * p * (1 - p), 1e-16)
        tree = _grow_tree(codes, cuts, g, h, max_depth, min_leaf, reg_lambda, min_gain)
        step = tree.predict(X)
        for _ in range(30):
            loss = weighted_logloss(F + lr * step, y, w)
            if loss <= losses[-1]:
                break
            tree.value = tree.value * 0.5
            step = step * 0.5
        else:
            tree.value = np.zeros_like(tree.value)
            step = np.zeros_like(step)
            loss = losses[-1]
        F = F + lr * step
        losses.append(loss)
        trees.append(tree)
    params = {"rounds": rounds, "max_depth": max_depth, "lr": lr, "min_leaf": min_leaf, "seed": seed,
              "reg_lambda": reg_lambda, "balance": balance, "n_features": int(X.shape[1])}
    return GbdtModel(trees, lr, base, max_depth, params, losses)
