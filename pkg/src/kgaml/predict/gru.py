"""Single-layer GRU over sliding windows, final hidden state -> sigmoid head.

Gradients are derived by hand (backpropagation through time); training is
full-batch Adam on the class-weighted binary cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..io import load_blob, save_blob
from .common import Adam, class_weights, glorot, sigmoid

GATES = ("z", "r", "n")


def make_windows(features: np.ndarray, labels: Sequence | None = None, window_len: int = 16, stride: int = 8):
    """Contiguous windows over time-ordered rows, each paired with the label of its last row.

    Returns a list of ``(sequence, label)``; there are
    ``(n - window_len) // stride + 1`` windows when ``n >= window_len``, else none.
    """
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be >= 1")
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    if n < window_len:
        return []
    out = []
    for start in range(0, n - window_len + 1, stride):
        end = start + window_len
        out.append((features[start:end], None if labels is None else labels[end - 1]))
    return out


def windows_ending_at(features: np.ndarray, positions: Sequence[int], window_len: int) -> np.ndarray:
    """One window per target position (time-ordered row index), left-padded with zeros."""
    features = np.asarray(features, dtype=np.float64)
    out = np.zeros((len(positions), window_len, features.shape[1]))
    for i, p in enumerate(positions):
        lo = max(0, p - window_len + 1)
        seq = features[lo: p + 1]
        out[i, window_len - len(seq):] = seq
    return out


def init_gru(input_dim: int, hidden_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p = {}
    for g in GATES:
        p[f"W{g}"] = glorot(rng, input_dim, hidden_dim)
        p[f"U{g}"] = glorot(rng, hidden_dim, hidden_dim)
        p[f"b{g}"] = np.zeros(hidden_dim)
    p["w_head"] = glorot(rng, hidden_dim, 1)[:, 0]
    p["b_head"] = np.zeros(1)
    return p


def gru_forward(params: dict[str, np.ndarray], X: np.ndarray):
    """Returns (logits, cache).  ``X`` has shape (batch, time, input_dim)."""
    B, T, _ = X.shape
    H = params["bz"].shape[0]
    h = np.zeros((B, H))
    cache = []
    for t in range(T):
        x = X[:, t]
        z = sigmoid(x @ params["Wz"] + h @ params["Uz"] + params["bz"])
        r = sigmoid(x @ params["Wr"] + h @ params["Ur"] + params["br"])
        n = np.tanh(x @ params["Wn"] + (r * h) @ params["Un"] + params["bn"])
        h_new = (1 - z) * n + z * h
        cache.append((x, h, z, r, n))
        h = h_new
    logits = h @ params["w_head"] + params["b_head"][0]
    return logits, (cache, h)


def gru_loss_and_grads(params: dict[str, np.ndarray], X: np.ndarray, y: np.ndarray, w: np.ndarray | None = None):
    """Weighted mean BCE over windows and its exact gradient via BPTT."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    logits, (cache, h_last) = gru_forward(params, X)
    wsum = w.sum()
    loss = float((w * (np.logaddexp(0.0, logits) - y * logits)).sum() / wsum)
    dlogit = w * (sigmoid(logits) - y) / wsum
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["w_head"] = h_last.T @ dlogit
    grads["b_head"] = np.array([dlogit.sum()])
    dh = np.outer(dlogit, params["w_head"])
    for x, h_prev, z, r, n in reversed(cache):
        dn = dh * (1 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        da_n = dn * (1 - n * n)
        rh = r * h_prev
        grads["Wn"] += x.T @ da_n
        grads["Un"] += rh.T @ da_n
        grads["bn"] += da_n.sum(axis=0)
        drh = da_n @ params["Un"].T
        dh_prev += drh * r
        da_r = drh * h_prev * r * (1 - r)
        grads["Wr"] += x.T @ da_r
        grads["Ur"] += h_prev.T @ da_r
        grads["br"] += da_r.sum(axis=0)
        dh_prev += da_r @ params["Ur"].T
        da_z = dz * z * (1 - z)
        grads["Wz"] += x.T @ da_z
        grads["Uz"] += h_prev.T @ da_z
        grads["bz"] += da_z.sum(axis=0)
        dh_prev += da_z @ params["Uz"].T
        dh = dh_prev
    return loss, grads


@dataclass
class GruModel:
    input_dim: int
    hidden_dim: int
    params: dict[str, np.ndarray]
    window_len: int = 16
    hyper: dict = field(default_factory=dict)
    epoch_losses: list[float] = field(default_factory=list)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        logits, _ = gru_forward(self.params, X)
        return sigmoid(logits)

    def save(self, path: str | Path) -> Path:
        header = {"type": "gru", "input_dim": self.input_dim, "hidden_dim": self.hidden_dim,
                  "window_len": self.window_len, "hyper": self.hyper, "epoch_losses": self.epoch_losses}
        return save_blob(path, header, self.params)

    @classmethod
    def load(cls, path: str | Path) -> "GruModel":
        header, arrays = load_blob(path)
        if header.get("type") != "gru":
            raise ValueError(f"{path}: not a gru model")
        return cls(header["input_dim"], header["hidden_dim"], arrays, header["window_len"],
                   header["hyper"], header["epoch_losses"])


def train_gru(windows, hidden_dim: int = 32, epochs: int = 50, lr: float = 1e-2, seed: int = 0,
              balance: bool = True) -> GruModel:
    """``windows`` is either a list of (sequence, label) or a pair (X, y) of stacked arrays."""
    if isinstance(windows, tuple) and len(windows) == 2 and isinstance(windows[0], np.ndarray) and windows[0].ndim == 3:
        X, y = windows
    else:
        if not windows:
            raise ValueError("need at least one window")
        X = np.stack([np.asarray(s, dtype=np.float64) for s, _ in windows])
        y = np.array([float(l) for _, l in windows])
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = class_weights(y) if balance else np.ones_like(y)
    params = init_gru(X.shape[2], hidden_dim, seed)
    opt = Adam(params, lr=lr)
    losses = []
    loss, grads = gru_loss_and_grads(params, X, y, w)
    for _ in range(epochs):
        losses.append(loss)
        before = {k: v.copy() for k, v in params.items()}
        opt.step(params, grads)
        # shrink an Adam step that would raise the full-batch loss
        for _ in range(20):
            new_loss, new_grads = gru_loss_and_grads(params, X, y, w)
            if new_loss <= loss:
                break
            for k in params:
                params[k] = before[k] + 0.5 * (params[k] - before[k])
        else:
            params.update(before)
            new_loss, new_grads = loss, grads
        loss, grads = new_loss, new_grads
    hyper = {"epochs": epochs, "lr": lr, "seed": seed, "balance": balance}
    return GruModel(X.shape[2], hidden_dim, params, X.shape[1], hyper, losses)
