"""Unified input representation ``[numeric | one-hot | concept | context]``.

All three modes share one width: blocks a mode does not use are zero-filled.
The annotation's anomaly type is never one-hot encoded here; it only reaches
the predictors through the pooled concept embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from .embed import EmbeddingTable, pool_path
from .errors import DimMismatch, EmptyTrain, LeakageError
from .ingest import TransactionRecord
from .kg import LogicPath
from .rgc import RetrievedContext

MODES = ("feature_only", "kg", "kg_cs")
NUMERIC_NAMES = ("usd_z", "log1p_usd_z", "year_offset_z", "dow_sin", "dow_cos", "tod_sin", "tod_cos")
N_STANDARDIZED = 3


def _raw_numeric(tx: TransactionRecord, base_year: int) -> np.ndarray:
    dt = datetime.fromtimestamp(tx.timestamp, tz=timezone.utc)
    dow = 2 * math.pi * dt.weekday() / 7.0
    tod = 2 * math.pi * (dt.hour * 3600 + dt.minute * 60 + dt.second) / 86400.0
    return np.array([
        tx.abs_usd_value, math.log1p(tx.abs_usd_value), float(tx.year - base_year),
        math.sin(dow), math.cos(dow), math.sin(tod), math.cos(tod),
    ])


@dataclass
class FeatureEncoder:
    base_year: int
    means: np.ndarray
    stds: np.ndarray
    directions: list[str]
    coins: list[str]
    self_flags: list[bool]
    concept_dim: int = 64
    context_dim: int = 64

    @property
    def numeric_width(self) -> int:
        return len(NUMERIC_NAMES)

    @property
    def categorical_width(self) -> int:
        return len(self.directions) + len(self.coins) + len(self.self_flags)

    @property
    def width(self) -> int:
        return self.numeric_width + self.categorical_width + self.concept_dim + self.context_dim

    def numeric(self, tx: TransactionRecord) -> np.ndarray:
        x = _raw_numeric(tx, self.base_year)
        x[:N_STANDARDIZED] = (x[:N_STANDARDIZED] - self.means) / self.stds
        return x

    def categorical(self, tx: TransactionRecord) -> np.ndarray:
        blocks = []
        for vocab, value in ((self.directions, tx.direction), (self.coins, tx.coin), (self.self_flags, tx.is_self_transfer)):
            b = np.zeros(len(vocab))
            if value in vocab:
                b[vocab.index(value)] = 1.0
            blocks.append(b)
        return np.concatenate(blocks)

    def block_slices(self) -> dict[str, slice]:
        a = self.numeric_width
        b = a + self.categorical_width
        c = b + self.concept_dim
        return {"numeric": slice(0, a), "categorical": slice(a, b), "concept": slice(b, c),
                "context": slice(c, c + self.context_dim)}

    def to_dict(self) -> dict:
        return {"base_year": self.base_year, "means": self.means.tolist(), "stds": self.stds.tolist(),
                "directions": self.directions, "coins": self.coins, "self_flags": self.self_flags,
                "concept_dim": self.concept_dim, "context_dim": self.context_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureEncoder":
        return cls(d["base_year"], np.array(d["means"]), np.array(d["stds"]), list(d["directions"]),
                   list(d["coins"]), [bool(x) for x in d["self_flags"]], d["concept_dim"], d["context_dim"])


def fit_encoder(train_txs: Sequence[TransactionRecord], concept_dim: int = 64, context_dim: int = 64) -> FeatureEncoder:
    """Standardization statistics and category vocabularies from train-tagged records only."""
    if not train_txs:
        raise EmptyTrain("no training transactions")
    bad = [t.tx_id for t in train_txs if t.split != "train"]
    if bad:
        raise LeakageError(f"{len(bad)} non-train transactions passed to fit_encoder (first: {bad[0]})")
    base_year = min(t.year for t in train_txs)
    raw = np.stack([_raw_numeric(t, base_year)[:N_STANDARDIZED] for t in train_txs])
    means = raw.mean(axis=0)
    stds = raw.std(axis=0)
    stds[stds < 1e-12] = 1.0
    return FeatureEncoder(
        base_year=base_year, means=means, stds=stds,
        directions=sorted({t.direction for t in train_txs}),
        coins=sorted({t.coin for t in train_txs}),
        self_flags=sorted({t.is_self_transfer for t in train_txs}),
        concept_dim=concept_dim, context_dim=context_dim,
    )


@dataclass(frozen=True)
class UnifiedFeature:
    tx_id: str
    mode: str
    numeric: np.ndarray
    categorical_onehot: np.ndarray
    concept: np.ndarray
    context: np.ndarray
    r: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "r", np.concatenate([self.numeric, self.categorical_onehot, self.concept, self.context]))


def build_unified(tx: TransactionRecord, path: LogicPath | None, table: EmbeddingTable | None,
                  ctx: RetrievedContext | None, mode: str, encoder: FeatureEncoder,
                  weighting: str = "uniform") -> UnifiedFeature:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    concept = np.zeros(encoder.concept_dim)
    context = np.zeros(encoder.context_dim)
    if mode in ("kg", "kg_cs"):
        if path is None or table is None:
            raise ValueError(f"mode {mode} needs a logic path and an embedding table")
        if table.dim != encoder.concept_dim:
            raise DimMismatch(f"embedding dim {table.dim} != encoder concept dim {encoder.concept_dim}")
        concept = pool_path(path, table, weighting)
    if mode == "kg_cs":
        if ctx is None:
            raise ValueError("mode kg_cs needs a retrieved context")
        if len(ctx.context_vector) != encoder.context_dim:
            raise DimMismatch(f"context dim {len(ctx.context_vector)} != {encoder.context_dim}")
        context = np.asarray(ctx.context_vector, dtype=np.float64)
    return UnifiedFeature(tx.tx_id, mode, encoder.numeric(tx), encoder.categorical(tx), concept, context)


def feature_matrix(features: Sequence[UnifiedFeature]) -> np.ndarray:
    return np.stack([f.r for f in features]) if features else np.zeros((0, 0))


def features_to_rows(features: Sequence[UnifiedFeature]) -> list[dict]:
    return [{"tx_id": f.tx_id, "mode": f.mode, "r": [float(v) for v in f.r]} for f in features]
