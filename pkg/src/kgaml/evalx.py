"""Train/test splitting with leakage control, label-scarce sampling, and macro metrics."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import RateTooSmall, SingleClassLabels, SingleComponent
from .ingest import TransactionRecord
from .io import sha256_json, write_json

STRATEGIES = ("temporal", "address_disjoint", "combined")


@dataclass
class SplitManifest:
    train_ids: list[str]
    test_ids: list[str]
    strategy: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown split strategy {self.strategy!r}")
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"train and test overlap on {len(overlap)} ids")

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "params": self.params,
                "train_ids": list(self.train_ids), "test_ids": list(self.test_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(list(d["train_ids"]), list(d["test_ids"]), d["strategy"], dict(d.get("params", {})))

    @property
    def checksum(self) -> str:
        return sha256_json(self.to_dict())

    def save(self, path: str | Path) -> Path:
        return write_json(path, self.to_dict())


def _check_fraction(txs, fraction):
    if not 0.0 < fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(txs) < 2:
        raise ValueError("need at least two transactions to split")


def temporal_split(txs: Sequence[TransactionRecord], train_fraction: float = 0.8) -> SplitManifest:
    """Earliest ceil(fraction*n) transactions train; ties at the cut all go to train."""
    _check_fraction(txs, train_fraction)
    order = sorted(txs, key=lambda t: (t.timestamp, t.tx_id))
    cut = math.ceil(train_fraction * len(order))
    boundary = order[cut - 1].timestamp
    while cut < len(order) and order[cut].timestamp == boundary:
        cut += 1
    return SplitManifest([t.tx_id for t in order[:cut]], [t.tx_id for t in order[cut:]], "temporal",
                         {"train_fraction": train_fraction})


def address_components(txs: Sequence[TransactionRecord]) -> list[list[str]]:
    """Connected components of the transaction-address relation, as lists of tx_ids (input order)."""
    parent: dict[str, str] = {}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for t in txs:
        for a in (t.from_addr, t.to_addr):
            parent.setdefault(a, a)
        ra, rb = find(t.from_addr), find(t.to_addr)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, list[str]] = defaultdict(list)
    for t in txs:
        groups[find(t.from_addr)].append(t.tx_id)
    return list(groups.values())


def address_disjoint_split(txs: Sequence[TransactionRecord], train_fraction: float = 0.8, seed: int = 0) -> SplitManifest:
    """Whole address components go to train, largest first (seeded shuffle among equal sizes), until the fraction is met."""
    _check_fraction(txs, train_fraction)
    comps = address_components(txs)
    if len(comps) < 2:
        raise SingleComponent("all transactions form one address component; no disjoint split exists")
    rng = np.random.default_rng(seed)
    keys = rng.random(len(comps))
    order = sorted(range(len(comps)), key=lambda i: (-len(comps[i]), keys[i]))
    target = math.ceil(train_fraction * len(txs))
    train: list[str] = []
    test: list[str] = []
    for k, i in enumerate(order):
        last = k == len(order) - 1
        if len(train) < target and not (last and not test):
            train.extend(comps[i])
        else:
            test.extend(comps[i])
    pos = {t.tx_id: i for i, t in enumerate(txs)}
    train.sort(key=pos.__getitem__)
    test.sort(key=pos.__getitem__)
    return SplitManifest(train, test, "address_disjoint", {"train_fraction": train_fraction, "seed": seed})


def combined_split(txs: Sequence[TransactionRecord], train_fraction: float = 0.8) -> SplitManifest:
    """Temporal cut, then drop test transactions touching any train address."""
    base = temporal_split(txs, train_fraction)
    by_id = {t.tx_id: t for t in txs}
    train_addr = {a for i in base.train_ids for a in by_id[i].addresses}
    kept = [i for i in base.test_ids if not (set(by_id[i].addresses) & train_addr)]
    return SplitManifest(base.train_ids, kept, "combined",
                         {"train_fraction": train_fraction, "dropped": len(base.test_ids) - len(kept)})


def make_split(txs: Sequence[TransactionRecord], strategy: str, train_fraction: float = 0.8, seed: int = 0) -> SplitManifest:
    if strategy == "temporal":
        return temporal_split(txs, train_fraction)
    if strategy == "address_disjoint":
        return address_disjoint_split(txs, train_fraction, seed)
    if strategy == "combined":
        return combined_split(txs, train_fraction)
    raise ValueError(f"unknown split strategy {strategy!r}")


def addresses_of(txs: Sequence[TransactionRecord], ids) -> set[str]:
    ids = set(ids)
    return {a for t in txs if t.tx_id in ids for a in t.addresses}


def stratified_sample(txs: Sequence[TransactionRecord], rate: float, min_per_anomaly_type: int = 1,
                      seed: int = 0) -> list[str]:
    """Keep round(rate * count) per label class, then top up each anomaly type to the minimum.

    Returns the sampled tx_ids in input order.  Only labeled records take part.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError("rate must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    labeled = [t for t in txs if t.label is not None]
    chosen: set[str] = set()
    for cls in (0, 1):
        pool = [t.tx_id for t in labeled if t.label == cls]
        n = int(round(rate * len(pool)))
        if n:
            chosen.update(rng.choice(pool, size=n, replace=False).tolist())
    by_type: dict[str, list[str]] = defaultdict(list)
    for t in labeled:
        if t.label == 1:
            by_type[t.anomaly_type or "unknown"].append(t.tx_id)
    for atype in sorted(by_type):
        pool = by_type[atype]
        have = [i for i in pool if i in chosen]
        need = min(min_per_anomaly_type, len(pool)) - len(have)
        if need > 0:
            rest = [i for i in pool if i not in chosen]
            chosen.update(rng.choice(rest, size=need, replace=False).tolist())
    for cls in (0, 1):
        present = any(t.label == cls for t in labeled)
        if present and not any(t.label == cls and t.tx_id in chosen for t in labeled):
            raise RateTooSmall(f"class {cls} rounds to zero at rate {rate} and no top-up covers it")
    return [t.tx_id for t in txs if t.tx_id in chosen]


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    auc_roc: float | None
    confusion: dict[str, int]
    n: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_precision": self.macro_precision,
                "macro_recall": self.macro_recall, "macro_f1": self.macro_f1, "auc_roc": self.auc_roc,
                "confusion": dict(self.confusion), "n": self.n}


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def auc_pairs(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC: fraction of (pos, neg) pairs ordered correctly, ties worth half."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClassLabels("AUC needs both classes")
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    upto = np.searchsorted(neg_sorted, pos, side="right")
    twice = int((2 * below + (upto - below)).sum())
    return twice / (2 * len(pos) * len(neg))


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Threshold at 0.5 (score >= threshold is positive); macro averages over both classes."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pred = (s >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    p1, r1 = _safe_div(tp, tp + fp), _safe_div(tp, tp + fn)
    p0, r0 = _safe_div(tn, tn + fn), _safe_div(tn, tn + fp)
    f1 = _safe_div(2 * p1 * r1, p1 + r1)
    f0 = _safe_div(2 * p0 * r0, p0 + r0)
    try:
        auc = auc_pairs(s, y)
    except SingleClassLabels:
        auc = None
    return MetricsReport(
        accuracy=_safe_div(tp + tn, len(y)), macro_precision=(p0 + p1) / 2, macro_recall=(r0 + r1) / 2,
        macro_f1=(f0 + f1) / 2, auc_roc=auc, confusion={"tp": tp, "tn": tn, "fp": fp, "fn": fn}, n=len(y),
    )
