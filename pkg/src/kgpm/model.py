"""The end-to-end model: graph encoder, event embeddings and sequence head."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .core import TYPE_ATTRIBUTE, EventLog, KnowledgeGraph, Sample, case_sequence
from .errors import ConfigMismatch, DataError
from .events import TimestampEmbedder, pool_attributes
from .gnn import GnnConfig, GnnParams, encode, init_gnn_params, uniform_init
from .head import HeadParams, TaskKind, head_forward, init_head_params

logger = logging.getLogger(__name__)

BINARY_LABELS = {"0": 0, "1": 1, "false": 0, "true": 1}


def type_node(event_type: str) -> str:
    return f"{TYPE_ATTRIBUTE}:{event_type}"


def graph_fingerprint(graph: KnowledgeGraph) -> str:
    h = hashlib.sha256()
    for part in (graph.nodes, graph.relations):
        h.update(json.dumps(part).encode())
    h.update(json.dumps([list(e) for e in graph.edges]).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class TimeConfig:
    mode: str = "zero"
    key: str = "abs"
    base: float = 10000.0
    time_scale: float = 1.0
    bucket_size: int = 1
    max_buckets: int = 64


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a model's architecture (not its weights)."""

    dim: int
    task: TaskKind
    gnn: GnnConfig = field(default_factory=GnnConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    classes: tuple[str, ...] = ()
    bias: bool = False
    type_nodes: bool = True
    allow_empty: bool = False
    graph_fingerprint: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        d = dict(d)
        d["task"] = TaskKind(**d["task"])
        d["gnn"] = GnnConfig(**d["gnn"])
        d["time"] = TimeConfig(**d["time"])
        d["classes"] = tuple(d.get("classes", ()))
        return cls(**d)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def model_graph(log_or_graph, types: Iterable[str] = (), type_nodes: bool = True) -> KnowledgeGraph:
    """The log's graph, plus one isolated node per event type when enabled."""
    graph = log_or_graph.graph if isinstance(log_or_graph, EventLog) else log_or_graph
    if isinstance(log_or_graph, EventLog):
        types = log_or_graph.types
    if not type_nodes:
        return graph
    return graph.with_nodes(type_node(t) for t in types)


def class_vocabulary(labels: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(labels)))


def encode_target(label, task: TaskKind, classes: Sequence[str] = ()):
    if task.kind == "binary":
        if isinstance(label, (int, np.integer)) and label in (0, 1):
            return int(label)
        try:
            return BINARY_LABELS[str(label).strip().lower()]
        except KeyError:
            raise DataError(f"binary label must be 0/1, got {label!r}") from None
    if task.kind == "multiclass":
        try:
            return list(classes).index(str(label))
        except ValueError:
            raise DataError(f"label {label!r} outside the class vocabulary") from None
    try:
        return float(label)
    except (TypeError, ValueError):
        raise DataError(f"regression target must be numeric, got {label!r}") from None


def build_samples(
    log: EventLog,
    labels: Mapping[str, object],
    task: TaskKind,
    classes: Sequence[str] = (),
    cases: Sequence[str] | None = None,
    cutoff: int | None = None,
) -> list[Sample]:
    """One sample per labelled case; cases missing a label are skipped."""
    out = []
    missing = 0
    for case in log.cases if cases is None else cases:
        if case not in labels:
            missing += 1
            continue
        seq = case_sequence(log, case, cutoff)
        out.append(Sample(case, tuple(seq), encode_target(labels[case], task, classes)))
    if missing:
        logger.warning("%d case(s) have no label and were skipped", missing)
    return out


@dataclass
class EventBatch:
    """Flat integer arrays describing a batch of samples."""

    n_samples: int
    n_events: int
    attr_nodes: np.ndarray
    attr_owner: np.ndarray
    timestamps: np.ndarray
    positions: np.ndarray
    event_owner: np.ndarray
    targets: np.ndarray
    case_ids: list[str]
    dropped_attributes: int = 0


def compile_batch(
    samples: Sequence[Sample], node_index: Mapping[str, int], type_nodes: bool = True
) -> EventBatch:
    attr_nodes, attr_owner, times, positions, owners, targets = [], [], [], [], [], []
    dropped = 0
    ev = 0
    for s, sample in enumerate(samples):
        for pos, event in enumerate(sample.events):
            nodes = event.attribute_nodes
            if type_nodes:
                nodes = [*nodes, type_node(event.event_type)]
            idx = []
            for v in nodes:
                i = node_index.get(v)
                if i is None:
                    dropped += 1
                else:
                    idx.append(i)
            idx.sort()
            attr_nodes.extend(idx)
            attr_owner.extend([ev] * len(idx))
            times.append(event.timestamp)
            positions.append(pos)
            owners.append(s)
            ev += 1
        targets.append(np.nan if sample.target is None else sample.target)
    if dropped:
        logger.warning("dropped %d attribute reference(s) to unknown nodes", dropped)
    as_int = lambda xs: np.asarray(xs, dtype=np.int64)
    return EventBatch(
        len(samples), ev, as_int(attr_nodes), as_int(attr_owner), as_int(times),
        as_int(positions), as_int(owners), np.asarray(targets, dtype=np.float64),
        [s.case_id for s in samples], dropped,
    )


class ProcessModel:
    """Parameters plus the forward pass mapping samples to predictions."""

    def __init__(self, spec: ModelSpec, graph: KnowledgeGraph, gnn: GnnParams,
                 head: HeadParams, time_table: Optional[Value] = None):
        if spec.graph_fingerprint and spec.graph_fingerprint != graph_fingerprint(graph):
            raise ConfigMismatch("graph does not match the model's graph fingerprint")
        self.spec = spec
        self.graph = graph
        self.gnn = gnn
        self.head = head
        self.time_table = time_table
        self.embedder = TimestampEmbedder(
            mode=spec.time.mode, dim=spec.dim, key=spec.time.key, base=spec.time.base,
            time_scale=spec.time.time_scale, bucket_size=spec.time.bucket_size,
            max_buckets=spec.time.max_buckets, table=time_table,
        )

    @classmethod
    def create(cls, spec: ModelSpec, graph: KnowledgeGraph, seed: int = 0) -> "ProcessModel":
        if not spec.graph_fingerprint:
            spec = replace(spec, graph_fingerprint=graph_fingerprint(graph))
        rng = np.random.default_rng(seed)
        gnn = init_gnn_params(len(graph.nodes), len(graph.relations), spec.dim, spec.gnn, rng)
        table = None
        if spec.time.mode == "parameterized":
            table = uniform_init(rng, (spec.time.max_buckets, spec.dim), spec.dim, "time.table")
        head = init_head_params(spec.dim, spec.task.output_dim, rng, bias=spec.bias)
        return cls(spec, graph, gnn, head, table)

    def parameters(self) -> dict[str, Value]:
        params = {"node_table": self.gnn.node_table, "relation_table": self.gnn.relation_table}
        for i, layer in enumerate(self.gnn.layers, start=1):
            params[f"gc{i}.w_self"] = layer.w_self
            params[f"gc{i}.w_adj"] = layer.w_adj
            params[f"gc{i}.w_rel"] = layer.w_rel
            if layer.w_adj_fwd is not None:
                params[f"gc{i}.w_adj_fwd"] = layer.w_adj_fwd
        if self.time_table is not None:
            params["time.table"] = self.time_table
        for name in ("w1", "w2", "w3", "b1", "b2", "b3"):
            value = getattr(self.head, name)
            if value is not None:
                params[f"head.{name}"] = value
        return params

    def weight_matrices(self) -> list[Value]:
        """Weights subject to the default l2 penalty (no tables, no biases)."""
        out = [w for layer in self.gnn.layers for w in layer.weights()]
        return out + self.head.weights()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ConfigMismatch(f"checkpoint is missing tensors: {', '.join(missing)}")
        for name, value in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != value.shape:
                raise ConfigMismatch(f"tensor {name}: checkpoint shape {arr.shape} != model shape {value.shape}")
            value.data[...] = arr

    def compile(self, samples: Sequence[Sample]) -> EventBatch:
        return compile_batch(samples, self.graph.node_index, self.spec.type_nodes)

    def node_embeddings(self, dropout: Callable[[Value], Value] | None = None) -> Value:
        return encode(self.graph, self.gnn, self.spec.gnn, dropout)

    def forward(
        self,
        batch: EventBatch,
        dropout: Callable[[Value], Value] | None = None,
        H: Value | None = None,
    ) -> Value:
        """Predictions for ``batch``, shape (n_samples, o)."""
        if H is None:
            H = self.node_embeddings(dropout)
        phi = pool_attributes(H, batch.attr_nodes, batch.attr_owner, batch.n_events)
        t = self.embedder.embed(batch.timestamps, batch.positions)
        if t is not None:
            phi = ad.add(phi, t)
        return head_forward(
            phi, self.head, self.spec.task, batch.event_owner, batch.n_samples,
            dropout=dropout, allow_empty=self.spec.allow_empty,
        )

    def predict(self, samples: Sequence[Sample], chunk: int = 1024) -> np.ndarray:
        """Inference-mode predictions as an (n, o) array."""
        if not samples:
            return np.zeros((0, self.spec.task.output_dim))
        H = self.node_embeddings()
        parts = []
        for start in range(0, len(samples), chunk):
            batch = self.compile(samples[start:start + chunk])
            parts.append(self.forward(batch, H=H).data)
        return np.vstack(parts)
