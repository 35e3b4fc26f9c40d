"""Parsing and validation of the four input tables.

Each table is either comma-delimited text (``.csv``) or JSON lines
(``.jsonl`` / ``.ndjson``); the format is picked from the file extension.
Rows that fail validation are collected as rejects rather than aborting the
load, so that ``len(records) + len(rejects)`` always equals the row count.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .errors import DuplicateId, KgamlError, MissingColumn, ParseError

DIRECTIONS = ("in", "out", "internal")
MAX_KEYWORDS = 5


@dataclass(frozen=True)
class TransactionRecord:
    tx_id: str
    timestamp: int
    from_addr: str
    to_addr: str
    abs_usd_value: float
    direction: str
    is_self_transfer: bool
    coin: str
    year: int
    label: int | None = None
    anomaly_type: str | None = None
    extras: dict[str, str] = field(default_factory=dict)
    # train/test tag attached by the splitter; not part of the record identity
    split: str | None = field(default=None, compare=False)

    @property
    def addresses(self) -> tuple[str, str]:
        return (self.from_addr, self.to_addr)


@dataclass(frozen=True)
class AnnotationRecord:
    tx_id: str
    anomaly_type: str
    subtype_family: str
    subtype: str
    keywords: tuple[str, ...]
    annotation_text: str = ""
    llm_raw: str | None = None
    extras: dict[str, str] = field(default_factory=dict)
    split: str | None = field(default=None, compare=False)


@dataclass(frozen=True)
class EventDoc:
    event_id: str
    event_date: date
    title: str
    description: str
    coin: str | None = None
    is_anomaly_context: bool = False
    extras: dict[str, str] = field(default_factory=dict)

    @property
    def text(self) -> str:
        parts = [self.title, self.description]
        if self.coin:
            parts.append(self.coin)
        parts.append(str(self.event_date.year))
        return " ".join(parts)


@dataclass(frozen=True)
class KnowledgeChunk:
    chunk_id: str
    chunk_text: str
    source_sheet: str = ""
    row_idx: int = 0
    extras: dict[str, str] = field(default_factory=dict)

    @property
    def text(self) -> str:
        return self.chunk_text


@dataclass
class LoadResult:
    kind: str
    records: list
    rejects: list[KgamlError]
    n_rows: int

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def tag_split(records: Iterable, split: str) -> list:
    return [replace(r, split=split) for r in records]


# ---------------------------------------------------------------- field parsers


def parse_timestamp(value: Any) -> int:
    """Epoch seconds (int) from an epoch number or an ISO-8601 string; naive times are UTC."""
    if isinstance(value, bool):
        raise ValueError("boolean timestamp")
    if isinstance(value, (int, float)):
        return int(value)
    s = str(value).strip()
    if not s:
        raise ValueError("empty timestamp")
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return int(float(s))
    except ValueError:
        pass
    if s.endswith("Z") or s.endswith("z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def parse_date(value: Any) -> date:
    if isinstance(value, date):
        return value
    s = str(value).strip()
    if not s:
        raise ValueError("empty date")
    try:
        return date.fromisoformat(s[:10])
    except ValueError:
        return datetime.fromtimestamp(parse_timestamp(s), tz=timezone.utc).date()


def parse_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    s = str(value).strip().lower()
    if s in ("1", "true", "t", "yes", "y"):
        return True
    if s in ("0", "false", "f", "no", "n"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def parse_label(value: Any) -> int | None:
    if value is None:
        return None
    if isinstance(value, bool):
        raise ValueError("boolean label")
    s = str(value).strip().lower()
    if s in ("", "unlabeled", "none", "null", "nan"):
        return None
    if s in ("0", "0.0", "normal"):
        return 0
    if s in ("1", "1.0", "anomalous", "anomaly"):
        return 1
    raise ValueError(f"bad label {value!r}")


def _usd(value: Any) -> float:
    try:
        d = Decimal(str(value).strip())
    except InvalidOperation as exc:
        raise ValueError(f"not a number: {value!r}") from exc
    if not d.is_finite():
        raise ValueError("non-finite value")
    if d < 0:
        raise ValueError("negative value")
    return float(d)


def _text(value: Any) -> str:
    return "" if value is None else str(value)


def _nonempty(value: Any) -> str:
    s = _text(value).strip()
    if not s:
        raise ValueError("empty")
    return s


# --------------------------------------------------------------------- schemas


@dataclass(frozen=True)
class _Schema:
    required: tuple[str, ...]
    optional: tuple[str, ...]
    aliases: dict[str, str]
    id_field: str


SCHEMAS: dict[str, _Schema] = {
    "tx": _Schema(
        required=("tx_id", "timestamp", "from_addr", "to_addr", "abs_usd_value", "direction", "coin"),
        optional=("is_self_transfer", "year", "label", "anomaly_type"),
        aliases={"_dt": "timestamp", "coin_infer": "coin"},
        id_field="tx_id",
    ),
    "annotation": _Schema(
        required=("tx_id", "anomaly_type", "subtype_family", "subtype"),
        optional=("keywords", "annotation_text", "llm_raw")
        + tuple(f"keyword{i}" for i in range(1, 10)),
        aliases={"annotation": "annotation_text"},
        id_field="tx_id",
    ),
    "event": _Schema(
        required=("event_id", "event_date", "title", "description"),
        optional=("coin", "is_anomaly_context"),
        aliases={"event_title": "title", "is_anomaly": "is_anomaly_context"},
        id_field="event_id",
    ),
    "chunk": _Schema(
        required=("chunk_id", "chunk_text"),
        optional=("source_sheet", "row_idx"),
        aliases={"sheet_name": "source_sheet"},
        id_field="chunk_id",
    ),
}
KIND_ALIASES = {"ann": "annotation", "annotations": "annotation", "events": "event", "chunks": "chunk", "txs": "tx"}


def _canonical_kind(kind: str) -> str:
    kind = KIND_ALIASES.get(kind, kind)
    if kind not in SCHEMAS:
        raise ValueError(f"unknown table kind {kind!r}")
    return kind


def _normalize_keys(row: dict[str, Any], schema: _Schema) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in row.items():
        if key is None:
            continue
        key = key.strip()
        canon = schema.aliases.get(key, key)
        if canon in out and key != canon:
            continue
        out[canon] = value
    return out


def _check_header(columns: Iterable[str], schema: _Schema) -> None:
    present = {schema.aliases.get(c.strip(), c.strip()) for c in columns if c is not None}
    for name in schema.required:
        if name not in present:
            raise MissingColumn(name)


def _extras(row: dict[str, Any], schema: _Schema) -> dict[str, str]:
    known = set(schema.required) | set(schema.optional)
    return {k: _text(v) for k, v in row.items() if k not in known}


def _build_tx(row: dict[str, Any], n: int) -> TransactionRecord:
    schema = SCHEMAS["tx"]

    def field_(name, fn):
        try:
            return fn(row.get(name))
        except (ValueError, TypeError) as exc:
            raise ParseError(n, name, str(exc)) from None

    tx_id = field_("tx_id", _nonempty)
    ts = field_("timestamp", parse_timestamp)
    src = field_("from_addr", _nonempty)
    dst = field_("to_addr", _nonempty)
    value = field_("abs_usd_value", _usd)
    direction = field_("direction", lambda v: _nonempty(v).lower())
    if direction not in DIRECTIONS:
        raise ParseError(n, "direction", f"not one of {DIRECTIONS}")
    coin = field_("coin", lambda v: _nonempty(v).lower())
    same = src == dst
    raw_self = row.get("is_self_transfer")
    if raw_self is None or _text(raw_self).strip() == "":
        is_self = same
    else:
        is_self = field_("is_self_transfer", parse_bool)
        if is_self != same:
            raise ParseError(n, "is_self_transfer", "inconsistent with addresses")
    raw_year = row.get("year")
    if raw_year is None or _text(raw_year).strip() == "":
        year = datetime.fromtimestamp(ts, tz=timezone.utc).year
    else:
        year = field_("year", lambda v: int(str(v).strip()))
    label = field_("label", parse_label)
    atype = _text(row.get("anomaly_type")).strip() or None
    return TransactionRecord(
        tx_id=tx_id, timestamp=ts, from_addr=src, to_addr=dst, abs_usd_value=value,
        direction=direction, is_self_transfer=is_self, coin=coin, year=year,
        label=label, anomaly_type=atype, extras=_extras(row, schema),
    )


def _build_annotation(row: dict[str, Any], n: int) -> AnnotationRecord:
    schema = SCHEMAS["annotation"]
    try:
        tx_id = _nonempty(row.get("tx_id"))
    except ValueError:
        raise ParseError(n, "tx_id", "empty") from None
    levels = {}
    for name in ("anomaly_type", "subtype_family", "subtype"):
        try:
            levels[name] = _nonempty(row.get(name))
        except ValueError:
            raise ParseError(n, name, "empty") from None
    raw_kw = row.get("keywords")
    if isinstance(raw_kw, str):
        raw_kw = [k for k in raw_kw.split("|")]
    if raw_kw is not None:
        if not isinstance(raw_kw, (list, tuple)):
            raise ParseError(n, "keywords", "not a list")
        keywords = [str(k).strip() for k in raw_kw if str(k).strip()]
        if len(keywords) > MAX_KEYWORDS:
            raise ParseError(n, "keywords", f"more than {MAX_KEYWORDS} keywords")
    else:
        keywords = []
        for i in range(1, 10):
            v = _text(row.get(f"keyword{i}")).strip()
            if not v:
                continue
            if i > MAX_KEYWORDS:
                raise ParseError(n, f"keyword{i}", f"more than {MAX_KEYWORDS} keywords")
            keywords.append(v)
    if not keywords:
        raise ParseError(n, "keywords", "at least one keyword required")
    llm_raw = row.get("llm_raw")
    return AnnotationRecord(
        tx_id=tx_id,
        anomaly_type=levels["anomaly_type"],
        subtype_family=levels["subtype_family"],
        subtype=levels["subtype"],
        keywords=tuple(keywords),
        annotation_text=_text(row.get("annotation_text")),
        llm_raw=None if llm_raw in (None, "") else str(llm_raw),
        extras=_extras(row, schema),
    )


def _build_event(row: dict[str, Any], n: int) -> EventDoc:
    schema = SCHEMAS["event"]
    try:
        event_id = _nonempty(row.get("event_id"))
    except ValueError:
        raise ParseError(n, "event_id", "empty") from None
    try:
        d = parse_date(row.get("event_date"))
    except (ValueError, TypeError) as exc:
        raise ParseError(n, "event_date", str(exc)) from None
    try:
        desc = _nonempty(row.get("description"))
    except ValueError:
        raise ParseError(n, "description", "empty") from None
    raw_flag = row.get("is_anomaly_context")
    try:
        flag = False if raw_flag in (None, "") else parse_bool(raw_flag)
    except ValueError as exc:
        raise ParseError(n, "is_anomaly_context", str(exc)) from None
    coin = _text(row.get("coin")).strip().lower() or None
    return EventDoc(event_id=event_id, event_date=d, title=_text(row.get("title")).strip(),
                    description=desc, coin=coin, is_anomaly_context=flag, extras=_extras(row, schema))


def _build_chunk(row: dict[str, Any], n: int) -> KnowledgeChunk:
    schema = SCHEMAS["chunk"]
    try:
        chunk_id = _nonempty(row.get("chunk_id"))
    except ValueError:
        raise ParseError(n, "chunk_id", "empty") from None
    try:
        text = _nonempty(row.get("chunk_text"))
    except ValueError:
        raise ParseError(n, "chunk_text", "empty") from None
    raw_idx = row.get("row_idx")
    try:
        idx = 0 if raw_idx in (None, "") else int(str(raw_idx).strip())
    except ValueError:
        raise ParseError(n, "row_idx", "not an integer") from None
    return KnowledgeChunk(chunk_id=chunk_id, chunk_text=text,
                          source_sheet=_text(row.get("source_sheet")), row_idx=idx,
                          extras=_extras(row, schema))


_BUILDERS = {"tx": _build_tx, "annotation": _build_annotation, "event": _build_event, "chunk": _build_chunk}


# ----------------------------------------------------------------------- loading


def _is_jsonl(path: Path) -> bool:
    return path.suffix.lower() in (".jsonl", ".ndjson", ".json")


def _iter_rows(path: Path, schema: _Schema) -> Iterator[tuple[int, dict[str, Any] | KgamlError]]:
    if _is_jsonl(path):
        checked = False
        with path.open(encoding="utf-8") as fh:
            n = 0
            for line in fh:
                if not line.strip():
                    continue
                n += 1
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    yield n, ParseError(n, "<json>", str(exc))
                    continue
                if not isinstance(obj, dict):
                    yield n, ParseError(n, "<json>", "not an object")
                    continue
                if not checked:
                    _check_header(obj.keys(), schema)
                    checked = True
                yield n, obj
    else:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            _check_header(reader.fieldnames or [], schema)
            for n, row in enumerate(reader, start=1):
                yield n, row


def parse_rows(kind: str, rows: Iterable[tuple[int, dict[str, Any] | KgamlError]]) -> LoadResult:
    kind = _canonical_kind(kind)
    schema = SCHEMAS[kind]
    build = _BUILDERS[kind]
    records, rejects, seen = [], [], set()
    n_rows = 0
    for n, row in rows:
        n_rows += 1
        if isinstance(row, KgamlError):
            rejects.append(row)
            continue
        try:
            rec = build(_normalize_keys(row, schema), n)
        except ParseError as exc:
            rejects.append(exc)
            continue
        rid = getattr(rec, schema.id_field)
        if rid in seen:
            err = DuplicateId(rid)
            err.row = n
            rejects.append(err)
            continue
        seen.add(rid)
        records.append(rec)
    return LoadResult(kind=kind, records=records, rejects=rejects, n_rows=n_rows)


def load_table(kind: str, path: str | Path) -> LoadResult:
    """Load and validate one table; raises ``MissingColumn`` on a bad header."""
    kind = _canonical_kind(kind)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return parse_rows(kind, _iter_rows(path, SCHEMAS[kind]))


def validate_consistency(txs: Sequence[TransactionRecord], annotations: Sequence[AnnotationRecord]) -> dict[str, int]:
    tx_ids = {t.tx_id for t in txs}
    ann_ids = {a.tx_id for a in annotations}
    return {
        "orphan_annotations": sum(1 for a in annotations if a.tx_id not in tx_ids),
        "unannotated": sum(1 for t in txs if t.tx_id not in ann_ids),
    }


# ------------------------------------------------------------------ serializing


def record_to_row(rec) -> dict[str, Any]:
    """Flat JSON-compatible dict that ``load_table`` parses back to an equal record."""
    if isinstance(rec, TransactionRecord):
        row = {
            "tx_id": rec.tx_id, "timestamp": rec.timestamp, "from_addr": rec.from_addr,
            "to_addr": rec.to_addr, "abs_usd_value": repr(rec.abs_usd_value),
            "direction": rec.direction, "is_self_transfer": "true" if rec.is_self_transfer else "false",
            "coin": rec.coin, "year": rec.year,
            "label": "" if rec.label is None else rec.label,
            "anomaly_type": rec.anomaly_type or "",
        }
    elif isinstance(rec, AnnotationRecord):
        row = {"tx_id": rec.tx_id, "anomaly_type": rec.anomaly_type,
               "subtype_family": rec.subtype_family, "subtype": rec.subtype}
        for i in range(MAX_KEYWORDS):
            row[f"keyword{i + 1}"] = rec.keywords[i] if i < len(rec.keywords) else ""
        row["annotation_text"] = rec.annotation_text
        row["llm_raw"] = rec.llm_raw or ""
    elif isinstance(rec, EventDoc):
        row = {"event_id": rec.event_id, "event_date": rec.event_date.isoformat(), "title": rec.title,
               "description": rec.description, "coin": rec.coin or "",
               "is_anomaly_context": "true" if rec.is_anomaly_context else "false"}
    elif isinstance(rec, KnowledgeChunk):
        row = {"chunk_id": rec.chunk_id, "chunk_text": rec.chunk_text,
               "source_sheet": rec.source_sheet, "row_idx": rec.row_idx}
    else:
        raise TypeError(f"unsupported record type {type(rec).__name__}")
    row.update(rec.extras)
    return row


def write_table(records: Sequence, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [record_to_row(r) for r in records]
    if _is_jsonl(path):
        with path.open("w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=False) + "\n")
    else:
        fieldnames: list[str] = []
        for row in rows:
            for k in row:
                if k not in fieldnames:
                    fieldnames.append(k)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    return path
