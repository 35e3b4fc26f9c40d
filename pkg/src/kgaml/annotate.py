"""Structured transaction annotation.

The rule-based annotator is the deterministic, offline path: every typology
rule is scored by how many of its trigger keywords occur in the retrieved
knowledge texts plus how many of its guards hold, and the best rule (first
listed on ties) supplies the AT/SF/ST levels and keywords.

The remote path posts one JSON request per transaction to a generic endpoint
and validates the reply; any persistent failure degrades to the rule-based
record tagged ``llm_raw="fallback"``.
"""

from __future__ import annotations

import json
import logging
import operator
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

from .errors import EndpointError, SchemaError
from .ingest import MAX_KEYWORDS, AnnotationRecord, EventDoc, KnowledgeChunk, TransactionRecord

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "KGAML_ANNOTATOR_URL"

_OPS = {
    ">=": operator.ge, "<=": operator.le, ">": operator.gt, "<": operator.lt,
    "==": operator.eq, "!=": operator.ne,
}


@dataclass(frozen=True)
class Guard:
    """A predicate over a transaction field, or over the cluster context when ``field == "context"``."""

    field: str
    op: str
    value: Any

    def holds(self, tx: TransactionRecord, cluster_context: str = "") -> bool:
        if self.field == "context":
            return _contains_phrase(cluster_context.lower(), str(self.value).lower())
        actual = getattr(tx, self.field)
        if self.op not in _OPS:
            raise ValueError(f"unknown guard op {self.op!r}")
        return bool(_OPS[self.op](actual, self.value))


@dataclass(frozen=True)
class TypologyRule:
    at: str
    sf: str
    st: str
    trigger_keywords: tuple[str, ...] = ()
    numeric_guards: tuple[Guard, ...] = ()

    def __post_init__(self):
        if not (self.at.strip() and self.sf.strip() and self.st.strip()):
            raise ValueError("rule levels must be non-empty")
        if not self.trigger_keywords and not self.numeric_guards:
            raise ValueError("rule needs at least one trigger keyword or guard")
        if any(not k.strip() for k in self.trigger_keywords):
            raise ValueError("trigger keywords must be non-empty")


UNKNOWN_RULE = TypologyRule("unknown", "unknown", "unknown", ("unmatched",))


def _contains_phrase(text: str, phrase: str) -> bool:
    return re.search(r"(?<![a-z0-9])" + re.escape(phrase) + r"(?![a-z0-9])", text) is not None


def rule_score(rule: TypologyRule, tx: TransactionRecord, evidence: str, cluster_context: str = "") -> tuple[int, list[str], list[Guard]]:
    matched = [k for k in rule.trigger_keywords if _contains_phrase(evidence, k.lower())]
    guards = [g for g in rule.numeric_guards if g.holds(tx, cluster_context)]
    return len(matched) + len(guards), matched, guards


def annotate_rule_based(tx: TransactionRecord, chunks: Sequence[KnowledgeChunk], events: Sequence[EventDoc],
                        rules: Sequence[TypologyRule], cluster_context: str = "") -> AnnotationRecord:
    if not rules:
        raise ValueError("rules must be non-empty")
    evidence = " ".join([c.text for c in chunks] + [e.text for e in events]).lower()
    best = None
    for rule in rules:
        score, matched, guards = rule_score(rule, tx, evidence, cluster_context)
        if best is None or score > best[0]:
            best = (score, rule, matched, guards)
    score, rule, matched, guards = best
    if score == 0:
        rule, matched, guards = UNKNOWN_RULE, [], []
    keywords = list(matched[:MAX_KEYWORDS])
    for k in rule.trigger_keywords:
        if len(keywords) >= MAX_KEYWORDS:
            break
        if k not in keywords:
            keywords.append(k)
    if not keywords:
        keywords = [rule.st]
    evidence_ids = [c.chunk_id for c in chunks] + [e.event_id for e in events]
    text = (
        f"Typology {rule.at} > {rule.sf} > {rule.st} (score {score}). "
        f"Matched evidence: {', '.join(matched) if matched else 'none'}. "
        f"Guards: {', '.join(f'{g.field} {g.op} {g.value}' for g in guards) if guards else 'none'}. "
        f"Sources: {', '.join(evidence_ids) if evidence_ids else 'none'}."
    )
    return AnnotationRecord(tx.tx_id, rule.at, rule.sf, rule.st, tuple(keywords), text)


# -------------------------------------------------------------------- rule files


def rule_to_dict(rule: TypologyRule) -> dict:
    d = asdict(rule)
    d["trigger_keywords"] = list(rule.trigger_keywords)
    d["numeric_guards"] = [asdict(g) for g in rule.numeric_guards]
    return d


def rule_from_dict(d: dict) -> TypologyRule:
    return TypologyRule(
        at=d["at"], sf=d["sf"], st=d["st"],
        trigger_keywords=tuple(d.get("trigger_keywords", ())),
        numeric_guards=tuple(Guard(**g) for g in d.get("numeric_guards", ())),
    )


def save_rules(rules: Sequence[TypologyRule], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([rule_to_dict(r) for r in rules], indent=2) + "\n", encoding="utf-8")
    return path


def load_rules(path: str | Path) -> list[TypologyRule]:
    return [rule_from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


def default_rules() -> list[TypologyRule]:
    """Typology catalogue shipped with the synthetic corpus."""

    def ctx(phrase):
        return (Guard("context", "has", phrase),)

    return [
        TypologyRule("laundering", "placement dispersal", "fan out",
                     ("dispersal", "fanout", "fresh wallets", "splitting"), ctx("dispersal fanout")),
        TypologyRule("laundering", "layering", "peel chain",
                     ("layering", "forwarding", "intermediary", "peel chain"), ctx("layering chain")),
        TypologyRule("obfuscation", "mixing service", "coinjoin round",
                     ("mixing", "denomination", "coinjoin", "tornado"), ctx("mixing equal")),
        TypologyRule("wash activity", "self cycling", "self transfer burst",
                     ("self transfer", "cycling", "wash", "inflate"), ctx("self transfer cycling")),
        TypologyRule("benign", "routine activity", "ordinary transfer",
                     ("routine", "ordinary", "retail", "counterparty"), ctx("routine activity")),
    ]


# ------------------------------------------------------------------ remote path

REQUIRED_REPLY_FIELDS = ("anomaly_type", "subtype_family", "subtype", "keywords", "annotation")


@dataclass
class RemoteConfig:
    endpoint: str
    template: str = ""
    timeout_s: float = 10.0
    attempts: int = 3
    backoff_s: float = 0.5
    max_in_flight: int = 4


class _Blank(dict):
    def __missing__(self, key):
        return ""


def render_prompt(template: str, tx: TransactionRecord, cluster_context: str,
                  chunks: Sequence[KnowledgeChunk], events: Sequence[EventDoc]) -> str:
    fields = _Blank({k: v for k, v in asdict(tx).items() if not isinstance(v, dict)})
    fields.update(
        cluster_context=cluster_context,
        chunks="\n".join(f"- {c.text}" for c in chunks),
        events="\n".join(f"- {e.event_date.isoformat()} {e.title}: {e.description}" for e in events),
    )
    return template.format_map(fields)


def parse_reply(tx_id: str, reply: Any) -> AnnotationRecord:
    if not isinstance(reply, dict):
        raise SchemaError("<root>")
    for name in REQUIRED_REPLY_FIELDS:
        if name not in reply:
            raise SchemaError(name)
    levels = {}
    for name in ("anomaly_type", "subtype_family", "subtype"):
        v = reply[name]
        if not isinstance(v, str) or not v.strip():
            raise SchemaError(name)
        levels[name] = v.strip()
    kws = reply["keywords"]
    if not isinstance(kws, list) or not 1 <= len(kws) <= MAX_KEYWORDS:
        raise SchemaError("keywords")
    kws = [str(k).strip() for k in kws]
    if any(not k for k in kws):
        raise SchemaError("keywords")
    return AnnotationRecord(tx_id, levels["anomaly_type"], levels["subtype_family"], levels["subtype"],
                            tuple(kws), str(reply["annotation"]), llm_raw=json.dumps(reply, sort_keys=True))


def request_annotation(cfg: RemoteConfig, tx: TransactionRecord, prompt: str) -> AnnotationRecord:
    """Single POST round trip; raises ``EndpointError`` or ``SchemaError``."""
    body = json.dumps({"prompt": prompt, "fields": {"tx_id": tx.tx_id, "coin": tx.coin,
                                                     "direction": tx.direction,
                                                     "abs_usd_value": tx.abs_usd_value,
                                                     "is_self_transfer": tx.is_self_transfer,
                                                     "year": tx.year}}).encode("utf-8")
    req = urllib.request.Request(cfg.endpoint, data=body, headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=cfg.timeout_s) as resp:
            payload = resp.read()
    except urllib.error.HTTPError as exc:
        raise EndpointError(exc.code, str(exc.reason)) from exc
    except (urllib.error.URLError, TimeoutError, OSError) as exc:
        raise EndpointError("unreachable", str(exc)) from exc
    try:
        reply = json.loads(payload)
    except json.JSONDecodeError:
        raise SchemaError("<json>") from None
    return parse_reply(tx.tx_id, reply)


def annotate_remote(tx: TransactionRecord, cluster_context: str, chunks: Sequence[KnowledgeChunk],
                    events: Sequence[EventDoc], cfg: RemoteConfig,
                    rules: Sequence[TypologyRule] | None = None) -> AnnotationRecord:
    prompt = render_prompt(cfg.template, tx, cluster_context, chunks, events)
    delay = cfg.backoff_s
    for attempt in range(1, cfg.attempts + 1):
        try:
            return request_annotation(cfg, tx, prompt)
        except SchemaError as exc:
            logger.warning("annotator reply for %s rejected: %s", tx.tx_id, exc)
            break
        except EndpointError as exc:
            logger.warning("annotator attempt %d/%d for %s failed: %s", attempt, cfg.attempts, tx.tx_id, exc)
            if attempt < cfg.attempts:
                time.sleep(delay)
                delay *= 2
    fallback = annotate_rule_based(tx, chunks, events, rules or default_rules(), cluster_context)
    return AnnotationRecord(fallback.tx_id, fallback.anomaly_type, fallback.subtype_family, fallback.subtype,
                            fallback.keywords, fallback.annotation_text, llm_raw="fallback")


def annotate_remote_batch(items: Sequence[tuple[TransactionRecord, str, Sequence[KnowledgeChunk], Sequence[EventDoc]]],
                          cfg: RemoteConfig, rules: Sequence[TypologyRule] | None = None) -> list[AnnotationRecord]:
    with ThreadPoolExecutor(max_workers=max(1, cfg.max_in_flight)) as pool:
        return list(pool.map(lambda it: annotate_remote(*it, cfg=cfg, rules=rules), items))
