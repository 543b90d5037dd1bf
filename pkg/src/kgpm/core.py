"""Event logs, knowledge graphs and sample construction.

File formats
------------
Triple file (UTF-8, tab separated)::

    # comment
    @node isolated-node-id
    head<TAB>relation<TAB>tail

Event log file (UTF-8 CSV with header)::

    case,type,timestamp,<attribute>,<attribute>,...

Every column besides the three mandatory ones is an attribute; a non-empty
cell holds the id of a knowledge-graph node.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

TRIPLE_FORMATS = ("tsv",)
MANDATORY_COLUMNS = ("case", "type", "timestamp")
TYPE_ATTRIBUTE = "__type"

Triple = tuple[str, str, str]
PathLike = Union[str, Path]


@dataclass(frozen=True)
class GraphIndex:
    """Dense integer view of a knowledge graph used by the encoder."""

    n_nodes: int
    n_relations: int
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray

    @cached_property
    def out_degree(self) -> np.ndarray:
        return np.bincount(self.heads, minlength=self.n_nodes)

    @cached_property
    def in_degree(self) -> np.ndarray:
        return np.bincount(self.tails, minlength=self.n_nodes)

    @property
    def n_edges(self) -> int:
        return len(self.heads)


@dataclass(frozen=True)
class KnowledgeGraph:
    """Directed multi-relational graph (nodes, relation types, triples).

    Use :meth:`build` to construct from raw triples; it deduplicates and puts
    everything into canonical (sorted) order so that node and relation
    indices are stable across runs.
    """

    nodes: tuple[str, ...] = ()
    relations: tuple[str, ...] = ()
    edges: tuple[Triple, ...] = ()

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise DataError("duplicate node identifiers")
        if len(set(self.relations)) != len(self.relations):
            raise DataError("duplicate relation identifiers")
        nodes, rels = set(self.nodes), set(self.relations)
        for h, r, t in self.edges:
            if h not in nodes or t not in nodes:
                raise DataError(f"edge ({h}, {r}, {t}) references an unknown node")
            if r not in rels:
                raise DataError(f"edge ({h}, {r}, {t}) references an unknown relation")

    @classmethod
    def build(
        cls,
        edges: Iterable[Triple] = (),
        nodes: Iterable[str] = (),
        relations: Iterable[str] = (),
    ) -> "KnowledgeGraph":
        edge_set = {tuple(e) for e in edges}
        node_set = set(nodes)
        rel_set = set(relations)
        for h, r, t in edge_set:
            node_set.update((h, t))
            rel_set.add(r)
        return cls(tuple(sorted(node_set)), tuple(sorted(rel_set)), tuple(sorted(edge_set)))

    def with_nodes(self, extra: Iterable[str]) -> "KnowledgeGraph":
        """Return a copy with ``extra`` added as (isolated) nodes."""
        extra = set(extra) - set(self.nodes)
        if not extra:
            return self
        return KnowledgeGraph.build(self.edges, set(self.nodes) | extra, self.relations)

    @cached_property
    def node_index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.nodes)}

    @cached_property
    def relation_index(self) -> dict[str, int]:
        return {r: i for i, r in enumerate(self.relations)}

    @cached_property
    def index(self) -> GraphIndex:
        ni, ri = self.node_index, self.relation_index
        arr = np.array(
            [(ni[h], ri[r], ni[t]) for h, r, t in self.edges], dtype=np.int64
        ).reshape(-1, 3)
        return GraphIndex(len(self.nodes), len(self.relations), arr[:, 0], arr[:, 1], arr[:, 2])

    def isolated_nodes(self) -> list[str]:
        touched = {h for h, _, _ in self.edges} | {t for _, _, t in self.edges}
        return [v for v in self.nodes if v not in touched]


def load_knowledge_graph(path: PathLike, format: str = "tsv") -> KnowledgeGraph:
    """Read a triple file; duplicate triples are collapsed."""
    if format not in TRIPLE_FORMATS:
        raise DataError(f"unknown triple format {format!r}; expected one of {TRIPLE_FORMATS}")
    edges: list[Triple] = []
    declared: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            if line.startswith("@node"):
                rest = line[len("@node"):]
                node = rest.strip()
                if not node or not rest[0].isspace():
                    raise DataError(f"{path}:{lineno}: malformed @node declaration")
                declared.append(node)
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise DataError(
                    f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}"
                )
            edges.append((parts[0], parts[1], parts[2]))
    return KnowledgeGraph.build(edges, declared)


def save_knowledge_graph(graph: KnowledgeGraph, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for node in graph.isolated_nodes():
            fh.write(f"@node {node}\n")
        for h, r, t in graph.edges:
            fh.write(f"{h}\t{r}\t{t}\n")


@dataclass(frozen=True)
class Event:
    """One log record. ``attributes`` is stored as name-sorted (name, node) pairs."""

    case_id: str
    event_type: str
    timestamp: int
    attributes: tuple[tuple[str, str], ...] = ()
    order: int = field(default=0, compare=False)

    def __post_init__(self):
        attrs = self.attributes
        if isinstance(attrs, Mapping):
            attrs = attrs.items()
        attrs = tuple(sorted((str(k), str(v)) for k, v in attrs))
        names = [k for k, _ in attrs]
        if len(set(names)) != len(names):
            raise DataError(f"event of case {self.case_id!r} repeats an attribute name")
        if isinstance(self.timestamp, bool) or not isinstance(self.timestamp, (int, np.integer)):
            raise DataError(f"timestamp must be an integer, got {self.timestamp!r}")
        if self.timestamp < 0:
            raise DataError(f"timestamp must be non-negative, got {self.timestamp}")
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def attribute_map(self) -> dict[str, str]:
        return dict(self.attributes)

    @property
    def attribute_nodes(self) -> list[str]:
        return [v for _, v in self.attributes]


@dataclass(frozen=True)
class EventLog:
    """Events plus the (possibly extended) graph their attributes refer to.

    ``cases`` keeps first-appearance order; ``types`` and ``attribute_names``
    are sorted.
    """

    events: tuple[Event, ...]
    graph: KnowledgeGraph
    cases: tuple[str, ...] = ()
    types: tuple[str, ...] = ()
    attribute_names: tuple[str, ...] = ()

    @classmethod
    def from_events(cls, events: Iterable[Event], graph: KnowledgeGraph) -> "EventLog":
        events = tuple(events)
        cases = tuple(dict.fromkeys(e.case_id for e in events))
        types = tuple(sorted({e.event_type for e in events}))
        names = tuple(sorted({k for e in events for k, _ in e.attributes}))
        return cls(events, graph, cases, types, names)

    def __post_init__(self):
        nodes = self.graph.node_index
        case_set, type_set, name_set = set(self.cases), set(self.types), set(self.attribute_names)
        for e in self.events:
            if e.case_id not in case_set or e.event_type not in type_set:
                raise DataError(f"event {e} is not covered by the log's case/type sets")
            for k, v in e.attributes:
                if k not in name_set:
                    raise DataError(f"undeclared attribute {k!r}")
                if v not in nodes:
                    raise DataError(f"attribute value {v!r} is not a graph node")
        if case_set - {e.case_id for e in self.events}:
            raise DataError("every case needs at least one event")

    @cached_property
    def by_case(self) -> dict[str, list[Event]]:
        out: dict[str, list[Event]] = {c: [] for c in self.cases}
        for e in self.events:
            out[e.case_id].append(e)
        return out

    def subset(self, cases: Iterable[str]) -> "EventLog":
        keep = set(cases)
        return EventLog.from_events([e for e in self.events if e.case_id in keep], self.graph)


def load_event_log(
    path: PathLike,
    graph: KnowledgeGraph | None = None,
    isolated_node_policy: str = "create",
) -> EventLog:
    """Read an event CSV and resolve its attribute cells against ``graph``.

    With ``isolated_node_policy="create"`` unknown values become isolated
    nodes of the returned ``log.graph``; with ``"reject"`` they are errors.
    """
    if isolated_node_policy not in ("create", "reject"):
        raise ValueError(f"unknown isolated_node_policy {isolated_node_policy!r}")
    graph = graph if graph is not None else KnowledgeGraph()
    known = graph.node_index
    events: list[Event] = []
    unseen: set[str] = set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        missing = [c for c in MANDATORY_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing mandatory column(s) {', '.join(missing)}")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        pos = {c: header.index(c) for c in MANDATORY_COLUMNS}
        attr_cols = [(i, c) for i, c in enumerate(header) if c not in MANDATORY_COLUMNS]
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{rowno}: expected {len(header)} cells, got {len(row)}")
            try:
                ts = int(row[pos["timestamp"]])
            except ValueError:
                raise DataError(
                    f"{path}:{rowno}: timestamp {row[pos['timestamp']]!r} is not an integer"
                ) from None
            attrs = {}
            for i, name in attr_cols:
                value = row[i]
                if value == "":
                    continue
                if value not in known:
                    if isolated_node_policy == "reject":
                        raise DataError(
                            f"{path}:{rowno}: attribute {name}={value!r} is not a node of the graph"
                        )
                    unseen.add(value)
                attrs[name] = value
            try:
                events.append(
                    Event(row[pos["case"]], row[pos["type"]], ts, attrs, order=len(events))
                )
            except DataError as exc:
                raise DataError(f"{path}:{rowno}: {exc}") from None
    if unseen:
        logger.info("added %d isolated nodes for unseen attribute values", len(unseen))
        graph = graph.with_nodes(unseen)
    return EventLog.from_events(events, graph)


def save_event_log(log: EventLog, path: PathLike) -> None:
    names = list(log.attribute_names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*MANDATORY_COLUMNS, *names])
        for e in log.events:
            amap = e.attribute_map
            writer.writerow([e.case_id, e.event_type, e.timestamp, *(amap.get(n, "") for n in names)])


def case_sequence(log: EventLog, case: str, cutoff: int | None = None) -> list[Event]:
    """Chronological events of ``case`` strictly before ``cutoff`` (all if None)."""
    try:
        events = log.by_case[case]
    except KeyError:
        raise DataError(f"unknown case id {case!r}") from None
    ordered = sorted(events, key=lambda e: (e.timestamp, e.order))
    if cutoff is None:
        return ordered
    return [e for e in ordered if e.timestamp < cutoff]


@dataclass(frozen=True)
class Sample:
    case_id: str
    events: tuple[Event, ...]
    target: float | int | None = None


def prefix_expand(
    log: EventLog, cases: Sequence[str] | None = None
) -> tuple[list[Sample], int]:
    """Next-event samples from every proper prefix of every case.

    Returns ``(samples, skipped)`` where ``skipped`` counts cases with fewer
    than two events. Restrict ``cases`` to one split at a time so prefixes
    never straddle split boundaries.
    """
    samples: list[Sample] = []
    skipped = 0
    for case in log.cases if cases is None else cases:
        seq = case_sequence(log, case)
        if len(seq) < 2:
            skipped += 1
            continue
        for i in range(1, len(seq)):
            samples.append(Sample(case, tuple(seq[:i]), seq[i].event_type))
    if skipped:
        logger.warning("prefix expansion skipped %d case(s) with fewer than 2 events", skipped)
    return samples, skipped


def load_labels(path: PathLike) -> dict[str, str]:
    """Read a ``case,label`` CSV into a dict."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"case", "label"} <= set(reader.fieldnames):
            raise DataError(f"{path}: labels file needs 'case' and 'label' columns")
        for rowno, row in enumerate(reader, start=2):
            if row["case"] in out:
                raise DataError(f"{path}:{rowno}: duplicate label for case {row['case']!r}")
            out[row["case"]] = row["label"]
    return out


def save_labels(labels: Mapping[str, object], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case", "label"])
        for case, label in labels.items():
            writer.writerow([case, label])
