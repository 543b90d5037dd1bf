"""Event embeddings: mean of attribute-node embeddings plus a time embedding."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .core import Event
from .errors import DataError, ShapeError

logger = logging.getLogger(__name__)

TIME_MODES = ("zero", "sinusoidal", "parameterized")
TIME_KEYS = ("abs", "pos")


@dataclass
class TimestampEmbedder:
    """Maps a timestamp (or sequence position, see ``key``) to a d-vector.

    ``sinusoidal`` divides the input by ``time_scale`` before applying the
    usual sin/cos frequency ladder; ``parameterized`` looks up row
    ``input // bucket_size`` of a trainable table, clamped to the last row.
    """

    mode: str
    dim: int
    key: str = "abs"
    base: float = 10000.0
    time_scale: float = 1.0
    bucket_size: int = 1
    max_buckets: int = 64
    table: Optional[Value] = None

    def __post_init__(self):
        if self.mode not in TIME_MODES:
            raise ValueError(f"time embedding mode must be one of {TIME_MODES}")
        if self.key not in TIME_KEYS:
            raise ValueError(f"time key must be one of {TIME_KEYS}")
        if self.mode == "parameterized":
            if self.bucket_size < 1 or self.max_buckets < 1:
                raise ValueError("bucket_size and max_buckets must be positive")
            if self.table is None:
                raise ValueError("parameterized time embedding needs a table")
            if self.table.shape != (self.max_buckets, self.dim):
                raise ShapeError(f"time table shape {self.table.shape} != ({self.max_buckets}, {self.dim})")

    def keys_for(self, timestamps: Sequence[int], positions: Sequence[int]) -> np.ndarray:
        raw = positions if self.key == "pos" else timestamps
        t = np.asarray(raw, dtype=np.int64).reshape(-1)
        if t.size and t.min() < 0:
            raise DataError("timestamps must be non-negative")
        return t

    def embed(self, timestamps: Sequence[int], positions: Sequence[int] | None = None) -> Value | None:
        """Time embeddings for a batch of events; ``None`` in zero mode."""
        if positions is None:
            positions = np.zeros(len(timestamps), dtype=np.int64)
        t = self.keys_for(timestamps, positions)
        if self.mode == "zero":
            return None
        if self.mode == "sinusoidal":
            return Value(sinusoid(t / self.time_scale, self.dim, self.base))
        buckets = np.minimum(t // self.bucket_size, self.max_buckets - 1)
        return ad.gather_rows(self.table, buckets)


def sinusoid(t: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Rows ``[sin(t/base^(0/d)), cos(t/base^(0/d)), sin(t/base^(2/d)), ...]``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    pair = np.arange(dim) // 2
    angle = t / base ** (2 * pair / dim)
    return np.where(np.arange(dim) % 2 == 0, np.sin(angle), np.cos(angle))


def pool_attributes(H: Value, attr_nodes, attr_owner, n_events: int) -> Value:
    """Mean of ``H[attr_nodes]`` grouped by ``attr_owner``; empty groups give zero rows."""
    attr_nodes = np.asarray(attr_nodes, dtype=np.int64)
    attr_owner = np.asarray(attr_owner, dtype=np.int64)
    counts = np.bincount(attr_owner, minlength=n_events).astype(np.float64)
    summed = ad.scatter_add_rows((n_events, H.shape[1]), attr_owner, ad.gather_rows(H, attr_nodes))
    with np.errstate(divide="ignore"):
        inv = np.where(counts > 0, 1.0 / counts, 0.0)
    return ad.scale_rows(summed, inv)


def _event_nodes(event: Event, node_index: Mapping[str, int], n_nodes: int) -> list[int]:
    try:
        nodes = sorted(node_index[v] for v in event.attribute_nodes)
    except KeyError as exc:
        raise DataError(f"attribute node {exc.args[0]!r} has no embedding") from None
    if any(i >= n_nodes for i in nodes):
        raise DataError("attribute node index outside the embedding table")
    return nodes


def aggregate_attributes(event: Event, H: Value, node_index: Mapping[str, int]) -> Value:
    """Mean of the embeddings of ``event``'s attribute nodes, shape (1, d)."""
    nodes = _event_nodes(event, node_index, H.shape[0])
    if not nodes:
        logger.debug("event of case %s has no attributes; using a zero vector", event.case_id)
    return pool_attributes(H, nodes, np.zeros(len(nodes), dtype=np.int64), 1)


def embed_timestamp(tau: int, embedder: TimestampEmbedder, position: int = 0) -> Value:
    """Time embedding of one event, shape (1, d)."""
    out = embedder.embed([tau], [position])
    return Value(np.zeros((1, embedder.dim))) if out is None else out


def embed_event(
    event: Event,
    H: Value,
    embedder: TimestampEmbedder,
    node_index: Mapping[str, int],
    position: int = 0,
) -> Value:
    beta = aggregate_attributes(event, H, node_index)
    t = embedder.embed([event.timestamp], [position])
    return beta if t is None else ad.add(beta, t)
