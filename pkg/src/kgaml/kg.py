"""Train-only concept hierarchy (AT -> SF -> ST -> KW) and per-transaction logic paths."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyInput, LeakageError, MalformedAnnotation
from .ingest import MAX_KEYWORDS, AnnotationRecord

NODE_TYPES = ("AT", "SF", "ST", "KW")
ALLOWED_EDGES = frozenset({("AT", "SF"), ("SF", "ST"), ("ST", "KW")})

_WS = re.compile(r"\s+")


def normalize_name(name: str) -> str:
    return _WS.sub(" ", name.strip().lower())


@dataclass(frozen=True)
class ConceptNode:
    node_id: int
    name: str
    node_type: str
    parents: tuple[str, ...] = ()

    @property
    def key(self) -> tuple:
        return (self.node_type, self.name, self.parents)


@dataclass
class ConceptGraph:
    nodes: list[ConceptNode]
    edges: set[tuple[int, int]]
    provenance: str = "train"
    _by_key: dict[tuple, ConceptNode] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._by_key = {n.key: n for n in self.nodes}

    def __len__(self):
        return len(self.nodes)

    def node(self, node_id: int) -> ConceptNode:
        node = self.nodes[node_id]
        assert node.node_id == node_id
        return node

    def lookup(self, node_type: str, name: str, parents: tuple[str, ...]) -> ConceptNode | None:
        return self._by_key.get((node_type, normalize_name(name), parents))

    def children(self, node_id: int) -> list[int]:
        return sorted(dst for src, dst in self.edges if src == node_id)

    def adjacency(self) -> dict[int, list[int]]:
        """Undirected adjacency with sorted neighbor lists."""
        adj: dict[int, set[int]] = {n.node_id: set() for n in self.nodes}
        for src, dst in self.edges:
            adj[src].add(dst)
            adj[dst].add(src)
        return {k: sorted(v) for k, v in adj.items()}

    def spines(self) -> list[tuple[ConceptNode, ConceptNode, ConceptNode]]:
        """Every complete AT -> SF -> ST chain present in the edge set."""
        out = []
        for at in self.nodes:
            if at.node_type != "AT":
                continue
            for sf_id in self.children(at.node_id):
                sf = self.node(sf_id)
                if sf.node_type != "SF":
                    continue
                for st_id in self.children(sf_id):
                    st = self.node(st_id)
                    if st.node_type == "ST":
                        out.append((at, sf, st))
        return out

    def concept_names(self) -> set[tuple[str, str]]:
        return {(n.node_type, n.name) for n in self.nodes}


@dataclass(frozen=True)
class PathNode:
    name: str
    node_type: str
    node_id: int | None

    @property
    def unseen(self) -> bool:
        return self.node_id is None


@dataclass(frozen=True)
class LogicPath:
    tx_id: str
    at: PathNode
    sf: PathNode
    st: PathNode
    kws: tuple[PathNode, ...]

    @property
    def nodes(self) -> tuple[PathNode, ...]:
        return (self.at, self.sf, self.st) + self.kws

    @property
    def n_unseen(self) -> int:
        return sum(n.unseen for n in self.nodes)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n.name for n in self.nodes)


def _levels(ann: AnnotationRecord) -> tuple[str, str, str, list[str]]:
    try:
        at, sf, st = (normalize_name(x) for x in (ann.anomaly_type, ann.subtype_family, ann.subtype))
    except AttributeError:
        raise MalformedAnnotation(getattr(ann, "tx_id", "?"), "missing hierarchy level") from None
    if not (at and sf and st):
        raise MalformedAnnotation(ann.tx_id, "empty hierarchy level")
    kws = []
    for k in ann.keywords:
        k = normalize_name(k)
        if k and k not in kws:
            kws.append(k)
    if not 1 <= len(ann.keywords) <= MAX_KEYWORDS or not kws:
        raise MalformedAnnotation(ann.tx_id, "keyword count out of range")
    return at, sf, st, kws


def build_concept_graph(train_annotations: Sequence[AnnotationRecord]) -> ConceptGraph:
    """Build the typed hierarchy from annotations tagged ``split="train"``.

    Node identity is (type, normalized name, parent-chain names); ids follow
    first appearance so identical input order gives identical ids.
    """
    if not train_annotations:
        raise EmptyInput("no training annotations")
    nodes: list[ConceptNode] = []
    by_key: dict[tuple, int] = {}
    edges: set[tuple[int, int]] = set()

    def intern(node_type: str, name: str, parents: tuple[str, ...]) -> int:
        key = (node_type, name, parents)
        if key not in by_key:
            by_key[key] = len(nodes)
            nodes.append(ConceptNode(len(nodes), name, node_type, parents))
        return by_key[key]

    for ann in train_annotations:
        if getattr(ann, "split", None) != "train":
            raise LeakageError(f"annotation {ann.tx_id} is tagged {ann.split!r}, expected 'train'")
        at, sf, st, kws = _levels(ann)
        a = intern("AT", at, ())
        s = intern("SF", sf, (at,))
        t = intern("ST", st, (at, sf))
        edges.add((a, s))
        edges.add((s, t))
        for kw in kws:
            edges.add((t, intern("KW", kw, (at, sf, st))))
    return ConceptGraph(nodes=nodes, edges=edges, provenance="train")


def induce_logic_path(annotation: AnnotationRecord, graph: ConceptGraph) -> LogicPath:
    at, sf, st, kws = _levels(annotation)

    def slot(node_type, name, parents):
        node = graph.lookup(node_type, name, parents)
        return PathNode(name, node_type, None if node is None else node.node_id)

    return LogicPath(
        tx_id=annotation.tx_id,
        at=slot("AT", at, ()),
        sf=slot("SF", sf, (at,)),
        st=slot("ST", st, (at, sf)),
        kws=tuple(slot("KW", k, (at, sf, st)) for k in kws),
    )


def assert_hierarchy(graph: ConceptGraph) -> list[tuple[int, int]]:
    """Edges whose endpoint types are not one of AT->SF, SF->ST, ST->KW."""
    types = {n.node_id: n.node_type for n in graph.nodes}
    return sorted(e for e in graph.edges if (types.get(e[0]), types.get(e[1])) not in ALLOWED_EDGES)


def path_from_spine(tx_id: str, graph: ConceptGraph, at: ConceptNode, sf: ConceptNode, st: ConceptNode) -> LogicPath:
    kws = tuple(
        PathNode(graph.node(k).name, "KW", k) for k in graph.children(st.node_id) if graph.node(k).node_type == "KW"
    )
    return LogicPath(
        tx_id=tx_id,
        at=PathNode(at.name, "AT", at.node_id),
        sf=PathNode(sf.name, "SF", sf.node_id),
        st=PathNode(st.name, "ST", st.node_id),
        kws=kws,
    )


# ------------------------------------------------------------------ persistence


def save_graph(graph: ConceptGraph, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "meta", "provenance": graph.provenance}) + "\n")
        for n in graph.nodes:
            fh.write(json.dumps({"kind": "node", "node_id": n.node_id, "name": n.name,
                                 "node_type": n.node_type, "parents": list(n.parents)}) + "\n")
        for src, dst in sorted(graph.edges):
            fh.write(json.dumps({"kind": "edge", "src": src, "dst": dst}) + "\n")
    return path


def load_graph(path: str | Path) -> ConceptGraph:
    nodes, edges, provenance = [], set(), "train"
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj["kind"] == "meta":
                provenance = obj["provenance"]
            elif obj["kind"] == "node":
                nodes.append(ConceptNode(obj["node_id"], obj["name"], obj["node_type"], tuple(obj["parents"])))
            else:
                edges.add((obj["src"], obj["dst"]))
    nodes.sort(key=lambda n: n.node_id)
    return ConceptGraph(nodes=nodes, edges=edges, provenance=provenance)


def graph_from_edges(node_specs: Iterable[tuple[str, str]], edges: Iterable[tuple[int, int]]) -> ConceptGraph:
    """Small helper for hand-built graphs: ``node_specs`` are (name, type) in id order."""
    nodes = [ConceptNode(i, normalize_name(name), t) for i, (name, t) in enumerate(node_specs)]
    return ConceptGraph(nodes=nodes, edges=set(edges))
