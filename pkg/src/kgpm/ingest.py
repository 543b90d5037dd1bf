"""Extract an event log and a knowledge graph from a directory of CSV tables.

The schema mapping is a YAML document::

    options:
      dangling_fk: skip          # or: fail
      case_info_timestamp: zero  # or: first (timestamp for events without a time column)
      default_bins: 10
    tables:
      - name: loan
        file: loan.csv
        key: loan_id
        node_prefix: "loan:"     # default "<name>:"
        fk_edges:
          - {column: account_id, relation: of_account, target: account}
        categorical_attrs:
          - {column: status, relation: has_status}
          - {column: purpose, relation: [has_purpose, purpose_of]}   # one edge per relation
        numeric_attrs:
          - {column: amount, relation: has_amount, bins: 4}
        event:
          case: loan_id
          type: case info
          timestamp: null        # pseudo-event
          attributes: [account_id, status]

Every row becomes node ``<prefix><key>``. Categorical cells become nodes
``<prefix><column>=<value>``, numeric cells are discretized into
equal-frequency bins with nodes ``<prefix><column>#bin<i>``. Events carry an
attribute named after the table pointing to the row node, plus one attribute
per listed column.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import yaml

from .core import Event, EventLog, KnowledgeGraph
from .errors import DataError

logger = logging.getLogger(__name__)

MISSING = -1
MISSING_BIN = "__missing"


def discretize(values: Sequence[Optional[float]], bin_count: int) -> tuple[list[int], list[float]]:
    """Equal-frequency binning.

    Boundaries are the empirical ``j/bin_count`` quantiles (linear
    interpolation) of the non-missing values, deduplicated and restricted to
    values below the maximum. A value equal to a boundary goes to the lower
    bin. Missing values (None/NaN) get index ``MISSING``.
    """
    if bin_count < 2:
        raise ValueError("bin_count must be >= 2")
    if len(values) == 0:
        raise ValueError("cannot discretize an empty column")
    arr = np.array([np.nan if v is None else v for v in values], dtype=np.float64)
    present = ~np.isnan(arr)
    if not present.any():
        logger.warning("all values missing; everything goes to the %s bin", MISSING_BIN)
        return [MISSING] * len(arr), []
    observed = arr[present]
    qs = np.quantile(observed, np.arange(1, bin_count) / bin_count)
    top = observed.max()
    boundaries = sorted({float(q) for q in qs if q < top})
    idx = np.searchsorted(np.array(boundaries), arr, side="left")
    return [int(i) if ok else MISSING for i, ok in zip(idx, present)], boundaries


@dataclass
class EdgeSpec:
    column: str
    relations: list[str]
    target: Optional[str] = None
    bins: int = 10


@dataclass
class EventSpec:
    case: str
    type: str
    timestamp: Optional[str] = None
    attributes: list[str] = field(default_factory=list)


@dataclass
class TableSpec:
    name: str
    file: str
    key: str
    node_prefix: str
    fk_edges: list[EdgeSpec] = field(default_factory=list)
    categorical_attrs: list[EdgeSpec] = field(default_factory=list)
    numeric_attrs: list[EdgeSpec] = field(default_factory=list)
    event: Optional[EventSpec] = None


@dataclass
class SchemaMapping:
    tables: list[TableSpec]
    dangling_fk: str = "skip"
    case_info_timestamp: str = "zero"

    def __post_init__(self):
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise DataError("table names must be unique")
        prefixes = [t.node_prefix for t in self.tables]
        if len(set(prefixes)) != len(prefixes):
            raise DataError("node_prefix values must be pairwise distinct")
        if self.dangling_fk not in ("skip", "fail"):
            raise DataError("dangling_fk must be 'skip' or 'fail'")
        if self.case_info_timestamp not in ("zero", "first"):
            raise DataError("case_info_timestamp must be 'zero' or 'first'")
        for t in self.tables:
            for fk in t.fk_edges:
                if fk.target not in names:
                    raise DataError(f"{t.name}.{fk.column}: fk target {fk.target!r} is not a declared table")
            for na in t.numeric_attrs:
                if na.bins < 2:
                    raise DataError(f"{t.name}.{na.column}: bins must be >= 2")
            if t.event is not None:
                declared = {e.column for e in t.fk_edges + t.categorical_attrs + t.numeric_attrs}
                for col in t.event.attributes:
                    if col not in declared:
                        raise DataError(
                            f"{t.name}: event attribute {col!r} is not a declared fk/categorical/numeric column"
                        )


def _relations(raw, where: str) -> list[str]:
    rels = [raw] if isinstance(raw, str) else list(raw or [])
    if not rels or not all(isinstance(r, str) and r for r in rels):
        raise DataError(f"{where}: relation must be a name or a list of names")
    return rels


def parse_schema(doc: dict) -> SchemaMapping:
    if not isinstance(doc, dict) or not isinstance(doc.get("tables"), list):
        raise DataError("schema needs a 'tables' list")
    options = doc.get("options") or {}
    default_bins = int(options.get("default_bins", 10))
    tables = []
    for i, t in enumerate(doc["tables"]):
        try:
            name = t["name"]

            def edges(section, with_target=False, numeric=False):
                out = []
                for e in t.get(section) or []:
                    where = f"{name}.{section}.{e.get('column')}"
                    out.append(EdgeSpec(
                        e["column"], _relations(e.get("relation"), where),
                        e["target"] if with_target else None,
                        int(e.get("bins", default_bins)) if numeric else default_bins,
                    ))
                return out

            ev = t.get("event")
            tables.append(TableSpec(
                name=name,
                file=t["file"],
                key=t["key"],
                node_prefix=t.get("node_prefix", f"{name}:"),
                fk_edges=edges("fk_edges", with_target=True),
                categorical_attrs=edges("categorical_attrs"),
                numeric_attrs=edges("numeric_attrs", numeric=True),
                event=None if ev is None else EventSpec(
                    ev["case"], str(ev["type"]), ev.get("timestamp"), list(ev.get("attributes") or [])
                ),
            ))
        except KeyError as exc:
            raise DataError(f"schema table #{i}: missing key {exc.args[0]!r}") from None
    return SchemaMapping(
        tables,
        dangling_fk=options.get("dangling_fk", "skip"),
        case_info_timestamp=options.get("case_info_timestamp", "zero"),
    )


def load_schema(path) -> SchemaMapping:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read schema {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: invalid YAML: {exc}") from None
    return parse_schema(doc)


def _read_table(path: Path, spec: TableSpec) -> list[dict[str, str]]:
    if not path.is_file():
        raise DataError(f"table file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        columns = set(reader.fieldnames or [])
        needed = {spec.key} | {e.column for e in spec.fk_edges + spec.categorical_attrs + spec.numeric_attrs}
        if spec.event is not None:
            needed.add(spec.event.case)
            if spec.event.timestamp:
                needed.add(spec.event.timestamp)
        missing = sorted(needed - columns)
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        rows = list(reader)
    seen = set()
    for lineno, row in enumerate(rows, start=2):
        key = row[spec.key]
        if key in seen:
            raise DataError(f"{path}:{lineno}: duplicate primary key {key!r}")
        seen.add(key)
    return rows


def _parse_number(cell: str) -> Optional[float]:
    try:
        x = float(cell)
    except ValueError:
        return None
    return None if math.isnan(x) else x


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Extraction(NamedTuple):
    log: EventLog
    graph: KnowledgeGraph
    manifest: dict


def extract(mapping: SchemaMapping, data_dir) -> Extraction:
    """Build the graph and event log described by ``mapping``."""
    data_dir = Path(data_dir)
    tables = {t.name: _read_table(data_dir / t.file, t) for t in mapping.tables}
    specs = {t.name: t for t in mapping.tables}
    row_node = lambda spec, key: f"{spec.node_prefix}{key}"

    nodes: set[str] = set()
    edges: set[tuple[str, str, str]] = set()
    bins_manifest: dict[str, list[float]] = {}
    dangling = 0
    # per table: column -> {row key -> node id} for use by events
    cell_nodes: dict[str, dict[str, dict[str, str]]] = {}

    for spec in mapping.tables:
        rows = tables[spec.name]
        col_nodes: dict[str, dict[str, str]] = {}
        for row in rows:
            nodes.add(row_node(spec, row[spec.key]))
        for fk in spec.fk_edges:
            target = specs[fk.target]
            target_keys = {r[target.key] for r in tables[fk.target]}
            col_nodes[fk.column] = {}
            for lineno, row in enumerate(rows, start=2):
                value = row[fk.column]
                if value == "":
                    continue
                if value not in target_keys:
                    if mapping.dangling_fk == "fail":
                        raise DataError(
                            f"{spec.file}:{lineno}: {fk.column}={value!r} has no row in {fk.target}"
                        )
                    dangling += 1
                    continue
                tail = row_node(target, value)
                col_nodes[fk.column][row[spec.key]] = tail
                for rel in fk.relations:
                    edges.add((row_node(spec, row[spec.key]), rel, tail))
        for cat in spec.categorical_attrs:
            col_nodes[cat.column] = {}
            for row in rows:
                value = row[cat.column]
                if value == "":
                    continue
                tail = f"{spec.node_prefix}{cat.column}={value}"
                nodes.add(tail)
                col_nodes[cat.column][row[spec.key]] = tail
                for rel in cat.relations:
                    edges.add((row_node(spec, row[spec.key]), rel, tail))
        for num in spec.numeric_attrs:
            col_nodes[num.column] = {}
            cells = [(row[spec.key], row[num.column]) for row in rows if row[num.column] != ""]
            if not cells:
                bins_manifest[f"{spec.name}.{num.column}"] = []
                continue
            indices, boundaries = discretize([_parse_number(c) for _, c in cells], num.bins)
            bins_manifest[f"{spec.name}.{num.column}"] = boundaries
            for (key, _), b in zip(cells, indices):
                label = MISSING_BIN if b == MISSING else f"bin{b}"
                tail = f"{spec.node_prefix}{num.column}#{label}"
                nodes.add(tail)
                col_nodes[num.column][key] = tail
                for rel in num.relations:
                    edges.add((row_node(spec, key), rel, tail))
        cell_nodes[spec.name] = col_nodes

    if dangling:
        logger.warning("skipped %d dangling foreign key reference(s)", dangling)
    graph = KnowledgeGraph.build(edges, nodes)

    raw_events: list[tuple[str, str, Optional[int], dict[str, str]]] = []
    skipped_timestamps = 0
    for spec in mapping.tables:
        if spec.event is None:
            continue
        ev = spec.event
        for lineno, row in enumerate(tables[spec.name], start=2):
            case = row[ev.case]
            if case == "":
                raise DataError(f"{spec.file}:{lineno}: empty case id in column {ev.case!r}")
            ts: Optional[int] = None
            if ev.timestamp:
                cell = row[ev.timestamp]
                if cell == "":
                    skipped_timestamps += 1
                    continue
                try:
                    ts = int(cell)
                except ValueError:
                    raise DataError(f"{spec.file}:{lineno}: timestamp {cell!r} is not an integer") from None
            attrs = {spec.name: row_node(spec, row[spec.key])}
            for col in ev.attributes:
                node = cell_nodes[spec.name][col].get(row[spec.key])
                if node is not None:
                    attrs[col] = node
            raw_events.append((case, ev.type, ts, attrs))
    if skipped_timestamps:
        logger.warning("skipped %d event row(s) with an empty timestamp", skipped_timestamps)

    first_time: dict[str, int] = {}
    for case, _, ts, _ in raw_events:
        if ts is not None:
            first_time[case] = min(ts, first_time.get(case, ts))
    events = []
    for case, etype, ts, attrs in raw_events:
        if ts is None:
            ts = first_time.get(case, 0) if mapping.case_info_timestamp == "first" else 0
        events.append(Event(case, etype, ts, attrs, order=len(events)))
    log = EventLog.from_events(events, graph)

    manifest = {
        "nodes": len(graph.nodes),
        "edges": len(graph.edges),
        "relations": len(graph.relations),
        "events": len(log.events),
        "cases": len(log.cases),
        "bin_boundaries": bins_manifest,
        "skipped": {"dangling_fk": dangling, "empty_timestamp": skipped_timestamps},
        "inputs": {t.file: _sha256(data_dir / t.file) for t in mapping.tables},
    }
    return Extraction(log, graph, manifest)
