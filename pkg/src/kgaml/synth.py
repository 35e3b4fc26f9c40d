"""Seeded generator of labeled transaction corpora with laundering motifs.

Besides transactions it emits gold annotations for every anomalous
transaction, event documents (typology alerts, market-wide surges and
neutral background news) and the expert knowledge chunks that the rule-based
annotator retrieves.  Benign regime shifts are bursts of high-value traffic
among established addresses, each explained by an event dated at the spike.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotate import TypologyRule, default_rules, save_rules
from .errors import InvalidSpec
from .ingest import AnnotationRecord, EventDoc, KnowledgeChunk, TransactionRecord, write_table

KINDS = ("fan_out", "layering_chain", "mixing_round", "self_transfer_burst", "benign_baseline", "benign_regime_shift")
ANOMALOUS = ("fan_out", "layering_chain", "mixing_round", "self_transfer_burst")
COINS = ("btc", "eth", "usdt")

# which shipped rule each anomalous motif corresponds to
MOTIF_RULE = {"fan_out": 0, "layering_chain": 1, "mixing_round": 2, "self_transfer_burst": 3}
BENIGN_RULE = 4

FILES = {"tx": "transactions.csv", "annotation": "annotations.csv", "event": "events.csv", "chunk": "chunks.csv"}


@dataclass(frozen=True)
class MotifSpec:
    """``count`` motif instances, each with ``size`` transactions (fan width, chain depth, participants...).

    Values are log-normal around ``value_median`` with log-sd ``value_sigma``;
    ``window_s`` bounds the spread of one instance's timestamps.  For the
    benign baseline ``count`` is the number of transactions and ``size`` the
    address-pool size.
    """

    kind: str
    count: int
    size: int = 1
    value_median: float = 300.0
    value_sigma: float = 1.0
    window_s: int = 4 * 3600
    transfers_per_participant: int = 3

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise InvalidSpec(f"unknown motif kind {self.kind!r}")
        if self.count < 0:
            raise InvalidSpec(f"{self.kind}: count must be >= 0")
        if self.kind == "fan_out" and self.size < 2:
            raise InvalidSpec("fan_out needs width >= 2")
        if self.kind == "layering_chain" and self.size < 3:
            raise InvalidSpec("layering_chain needs depth >= 3")
        if self.kind in ("mixing_round", "self_transfer_burst", "benign_regime_shift") and self.size < 2:
            raise InvalidSpec(f"{self.kind} needs size >= 2")
        if self.kind == "benign_baseline" and self.size < 2:
            raise InvalidSpec("benign_baseline needs an address pool of at least 2")
        if self.value_median <= 0 or self.value_sigma < 0 or self.window_s < 1:
            raise InvalidSpec(f"{self.kind}: invalid value or window parameters")

    @property
    def n_transactions(self) -> int:
        if self.kind == "benign_baseline":
            return self.count
        if self.kind == "benign_regime_shift":
            return self.count * self.size * self.transfers_per_participant
        return self.count * self.size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthCorpus:
    transactions: list[TransactionRecord]
    annotations: list[AnnotationRecord]
    events: list[EventDoc]
    chunks: list[KnowledgeChunk]
    labels: dict[str, int]
    rules: list[TypologyRule] = field(default_factory=default_rules)
    motif_of: dict[str, str] = field(default_factory=dict)

    def ids_of(self, kind: str) -> list[str]:
        return [t for t, k in self.motif_of.items() if k == kind]


def default_specs(n_total: int = 5000, anomaly_rate: float = 0.01) -> list[MotifSpec]:
    """Corpus with ``anomaly_rate * n_total`` anomalous transactions split across the four motifs."""
    n_anom = int(round(anomaly_rate * n_total))
    # fixed widths; instance counts absorb the budget, a narrower fan-out takes any remainder
    sizes = {"fan_out": 4, "layering_chain": 3, "mixing_round": 4, "self_transfer_burst": 5}
    share = {"fan_out": 0.32, "layering_chain": 0.24, "mixing_round": 0.24, "self_transfer_burst": 0.20}
    counts = {k: int(np.floor(round(share[k] * n_anom / sizes[k], 9))) for k in sizes}
    remaining = n_anom - sum(counts[k] * sizes[k] for k in sizes)
    while remaining >= min(sizes.values()):
        for k in sizes:
            if sizes[k] <= remaining:
                counts[k] += 1
                remaining -= sizes[k]
    extra_fan = 0
    if remaining == 1:
        donor = next((k for k in ("layering_chain", "fan_out") if counts[k]), None)
        if donor is None:
            raise InvalidSpec(f"cannot split {n_anom} anomalous transactions into motifs exactly")
        counts[donor] -= 1
        extra_fan = remaining + sizes[donor]
    elif remaining == 2:
        extra_fan = 2
    fan = dict(value_median=60_000.0, value_sigma=0.5, window_s=3 * 3600)
    specs = [
        MotifSpec("fan_out", counts["fan_out"], sizes["fan_out"], **fan),
        MotifSpec("layering_chain", counts["layering_chain"], sizes["layering_chain"], value_median=40_000.0,
                  value_sigma=0.5, window_s=3 * 3600),
        MotifSpec("mixing_round", counts["mixing_round"], sizes["mixing_round"], value_median=10_000.0,
                  value_sigma=0.0, window_s=2 * 3600),
        MotifSpec("self_transfer_burst", counts["self_transfer_burst"], sizes["self_transfer_burst"],
                  value_median=2_000.0, value_sigma=0.8, window_s=3 * 3600),
    ]
    if extra_fan:
        specs.append(MotifSpec("fan_out", 1, extra_fan, **fan))
    shift = MotifSpec("benign_regime_shift", 5, 8, value_median=60_000.0, value_sigma=0.5, window_s=4 * 3600,
                      transfers_per_participant=3)
    base = n_total - n_anom - shift.n_transactions
    if base < 2:
        raise InvalidSpec("n_total too small for the default motif mix")
    specs += [shift, MotifSpec("benign_baseline", base, 600, value_median=300.0, value_sigma=1.0)]
    return specs


# ------------------------------------------------------------------ text corpora

_CHUNK_TEXT = {
    0: "Placement dispersal typology: a single source performs splitting of proceeds across many fresh wallets "
       "within hours. Analysts flag dispersal fanout burst patterns as early-stage laundering.",
    1: "Layering typology: value moves through an intermediary chain, each hop forwarding most of the amount. "
       "Peel chain layering with chain forwarding hop patterns obscures origin.",
    2: "Mixing service typology: participants join a coinjoin round sending the same denomination; "
       "tornado style mixing equal denomination round breaks traceability.",
    3: "Wash activity typology: an address repeats self transfer cycling to inflate volume; "
       "a self transfer cycling burst signals wash trading.",
    4: "Routine activity: ordinary retail payments between a known counterparty pair; routine activity "
       "without clustering signals is expected behaviour.",
}

_ALERT_TEXT = {
    "fan_out": ("Dispersal alert", "investigators report splitting of stolen funds into fresh wallets, a dispersal fanout burst"),
    "layering_chain": ("Layering alert", "funds traced through an intermediary peel chain with layering chain forwarding hop"),
    "mixing_round": ("Mixing alert", "coinjoin mixing round observed with equal denomination outputs"),
    "self_transfer_burst": ("Wash trading alert", "self transfer cycling burst used to inflate volume in wash trades"),
}

_SURGE_TEXT = ("{coin} market volume surge", "exchange rally drives a market volume surge as {coin} whales rebalance "
               "large holdings; listing news and strong inflows lift activity")

_NEUTRAL = (
    ("Protocol upgrade", "developers ship a scheduled network upgrade"),
    ("Conference week", "industry conference announces new wallet features"),
    ("Regulatory consultation", "regulator opens a consultation on custody standards"),
    ("Fee update", "network fees settle after a quiet period"),
    ("Exchange maintenance", "planned maintenance window for deposits"),
)


def expert_chunks(rules: Sequence[TypologyRule] | None = None) -> list[KnowledgeChunk]:
    rules = list(rules or default_rules())
    out = []
    for i, rule in enumerate(rules):
        text = _CHUNK_TEXT.get(i) or f"{rule.at} {rule.sf} {rule.st}: " + " ".join(rule.trigger_keywords)
        out.append(KnowledgeChunk(f"chunk{i:03d}", text, "typologies", i))
    return out


# -------------------------------------------------------------------- generator


class _Builder:
    def __init__(self, seed: int, start: int, end: int):
        self.rng = np.random.default_rng(seed)
        self.start, self.end = start, end
        self.fresh = 0
        self.txs: list[TransactionRecord] = []
        self.motif: dict[str, str] = {}
        self.pool: list[str] = []

    def fresh_addr(self) -> str:
        self.fresh += 1
        return f"fr{self.fresh:07d}"

    def value(self, spec: MotifSpec) -> float:
        v = spec.value_median * float(np.exp(spec.value_sigma * self.rng.standard_normal())) if spec.value_sigma else spec.value_median
        return round(v, 2)

    def direction(self, is_self: bool) -> str:
        return "internal" if is_self else ("out" if self.rng.random() < 0.5 else "in")

    def coin(self) -> str:
        return COINS[int(self.rng.integers(len(COINS)))]

    def anchor(self, lo_frac: float = 0.0, hi_frac: float = 1.0, margin: int = 86400) -> int:
        lo = self.start + int(lo_frac * (self.end - self.start))
        hi = self.start + int(hi_frac * (self.end - self.start)) - margin
        return int(self.rng.integers(lo, max(lo + 1, hi)))

    def add(self, ts, src, dst, value, coin, label, kind, is_self=False):
        year = datetime.fromtimestamp(ts, tz=timezone.utc).year
        tx = TransactionRecord(
            tx_id="", timestamp=int(ts), from_addr=src, to_addr=dst, abs_usd_value=float(value),
            direction=self.direction(is_self), is_self_transfer=is_self, coin=coin, year=year,
            label=label, anomaly_type=(kind if label else None), extras={"motif": kind},
        )
        self.txs.append(tx)
        return tx


def _emit(b: _Builder, spec: MotifSpec, alerts: list, surges: list) -> None:
    kind, rng = spec.kind, b.rng
    if kind == "benign_baseline":
        while len(b.pool) < spec.size:
            b.pool.append(f"pl{len(b.pool):06d}")
        pool = b.pool[: spec.size]
        for _ in range(spec.count):
            ts = b.anchor(margin=0)
            src = pool[int(rng.integers(len(pool)))]
            is_self = rng.random() < 0.02
            dst = src if is_self else pool[int(rng.integers(len(pool)))]
            if dst == src and not is_self:
                dst = pool[(pool.index(src) + 1) % len(pool)]
            b.add(ts, src, dst, b.value(spec), b.coin(), 0, kind, is_self)
        return
    for inst in range(spec.count):
        coin = b.coin()
        if kind == "benign_regime_shift":
            # spread episodes over the span so later ones land after a temporal cut
            lo = (inst + 0.1) / spec.count
            t0 = b.anchor(lo, min(1.0, lo + 0.8 / spec.count))
        else:
            t0 = b.anchor()
        offs = np.sort(rng.integers(0, spec.window_s, size=max(spec.size, 1) * spec.transfers_per_participant))
        if kind == "fan_out":
            src = b.fresh_addr()
            for j in range(spec.size):
                b.add(t0 + offs[j], src, b.fresh_addr(), b.value(spec), coin, 1, kind)
        elif kind == "layering_chain":
            chain = [b.fresh_addr() for _ in range(spec.size + 1)]
            v = b.value(spec)
            step = spec.window_s // (spec.size + 1)
            for j in range(spec.size):
                ts = t0 + j * step + int(rng.integers(1, max(2, step)))
                b.add(ts, chain[j], chain[j + 1], v, coin, 1, kind)
                v = round(v * float(rng.uniform(0.95, 0.99)), 2)
        elif kind == "mixing_round":
            v = b.value(spec)
            for j in range(spec.size):
                b.add(t0 + offs[j], b.fresh_addr(), b.fresh_addr(), v, coin, 1, kind)
        elif kind == "self_transfer_burst":
            addr = b.fresh_addr()
            for j in range(spec.size):
                b.add(t0 + offs[j], addr, addr, b.value(spec), coin, 1, kind, is_self=True)
        elif kind == "benign_regime_shift":
            if len(b.pool) < 2 * spec.size:
                b.pool.extend(f"pl{len(b.pool) + i:06d}" for i in range(2 * spec.size - len(b.pool)))
            members = rng.choice(len(b.pool), size=2 * spec.size, replace=False)
            senders = [b.pool[i] for i in members[: spec.size]]
            receivers = [b.pool[i] for i in members[spec.size:]]
            k = 0
            for s in senders:
                for r_i in rng.choice(len(receivers), size=spec.transfers_per_participant, replace=False):
                    b.add(t0 + offs[k], s, receivers[int(r_i)], b.value(spec), coin, 0, kind)
                    k += 1
            surges.append((t0, coin))
            continue
        alerts.append((t0, coin, kind))


def _day(ts: int) -> date:
    return datetime.fromtimestamp(ts, tz=timezone.utc).date()


def generate_corpus(specs: Sequence[MotifSpec], seed: int = 7, start: str = "2020-01-01",
                    end: str = "2024-12-31", rules: Sequence[TypologyRule] | None = None,
                    n_background_events: int = 40) -> SynthCorpus:
    """Deterministic corpus for ``specs``; needs at least one benign and one anomalous spec."""
    for s in specs:
        s.validate()
    kinds = {s.kind for s in specs if s.count > 0}
    if not kinds & set(ANOMALOUS) or not kinds - set(ANOMALOUS):
        raise InvalidSpec("need at least one benign and one anomalous motif")
    rules = list(rules or default_rules())
    t_start = int(datetime.fromisoformat(start).replace(tzinfo=timezone.utc).timestamp())
    t_end = int(datetime.fromisoformat(end).replace(tzinfo=timezone.utc).timestamp())
    if t_end <= t_start + 86400:
        raise InvalidSpec("time span must exceed one day")
    b = _Builder(seed, t_start, t_end)
    # baseline first so the pool exists for regime shifts
    ordered = sorted(specs, key=lambda s: s.kind != "benign_baseline")
    alerts: list = []
    surges: list = []
    for spec in ordered:
        _emit(b, spec, alerts, surges)

    order = sorted(range(len(b.txs)), key=lambda i: (b.txs[i].timestamp, i))
    width = max(4, len(str(len(order))))
    txs = []
    motif_of = {}
    for rank, i in enumerate(order):
        t = b.txs[i]
        tx = TransactionRecord(f"tx{rank:0{width}d}", t.timestamp, t.from_addr, t.to_addr, t.abs_usd_value,
                               t.direction, t.is_self_transfer, t.coin, t.year, t.label, t.anomaly_type, t.extras)
        txs.append(tx)
        motif_of[tx.tx_id] = t.extras["motif"]

    anns = []
    for tx in txs:
        if tx.label != 1:
            continue
        rule = rules[MOTIF_RULE[tx.anomaly_type]] if len(rules) > MOTIF_RULE[tx.anomaly_type] else rules[0]
        kws = tuple(rule.trigger_keywords[:5]) or (rule.st,)
        text = f"Gold typology {rule.at} > {rule.sf} > {rule.st} for a {tx.anomaly_type.replace('_', ' ')} motif."
        anns.append(AnnotationRecord(tx.tx_id, rule.at, rule.sf, rule.st, kws, text, None))

    events = []
    for t0, coin, kind in alerts:
        title, desc = _ALERT_TEXT[kind]
        events.append(EventDoc("", _day(t0), title, desc, coin, True))
    for t0, coin in surges:
        events.append(EventDoc("", _day(t0), _SURGE_TEXT[0].format(coin=coin), _SURGE_TEXT[1].format(coin=coin), coin, False))
    for _ in range(n_background_events):
        title, desc = _NEUTRAL[int(b.rng.integers(len(_NEUTRAL)))]
        events.append(EventDoc("", _day(b.anchor(margin=0)), title, desc, b.coin(), False))
    events.sort(key=lambda e: (e.event_date, e.title, e.coin or ""))
    events = [EventDoc(f"ev{i:04d}", e.event_date, e.title, e.description, e.coin, e.is_anomaly_context)
              for i, e in enumerate(events)]

    return SynthCorpus(txs, anns, events, expert_chunks(rules), {t.tx_id: int(t.label) for t in txs}, rules, motif_of)


def write_corpus(corpus: SynthCorpus, out_dir: str | Path, specs: Sequence[MotifSpec] | None = None,
                 seed: int | None = None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "tx": write_table(corpus.transactions, out / FILES["tx"]),
        "annotation": write_table(corpus.annotations, out / FILES["annotation"]),
        "event": write_table(corpus.events, out / FILES["event"]),
        "chunk": write_table(corpus.chunks, out / FILES["chunk"]),
        "rules": save_rules(corpus.rules, out / "rules.json"),
    }
    if specs is not None:
        meta = {"seed": seed, "specs": [s.to_dict() for s in specs]}
        p = out / "corpus.json"
        p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["config"] = p
    return paths


def load_specs(path: str | Path) -> tuple[list[MotifSpec], int | None]:
    """Reads ``{"specs": [...], "seed": ...}`` or ``{"n_total": N, "anomaly_rate": r}`` documents."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "specs" in doc:
        try:
            specs = [MotifSpec(**d) for d in doc["specs"]]
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc
    else:
        specs = default_specs(int(doc.get("n_total", 5000)), float(doc.get("anomaly_rate", 0.01)))
    return specs, doc.get("seed")
