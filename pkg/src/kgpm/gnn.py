"""Simplified compGCN encoder producing one embedding per graph node.

Node and relation embeddings are stored as rows, so a weight matrix ``W``
acting on a column vector ``h`` is applied to a table ``H`` as ``H @ W.T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .core import GraphIndex, KnowledgeGraph
from .errors import ShapeError

COMPOSITIONS = ("multiply", "add")
FLOWS = ("backward", "bidirectional")
NORMALIZATIONS = ("none", "mean")


@dataclass(frozen=True)
class GnnConfig:
    layers: int = 1
    composition: str = "multiply"
    flow: str = "backward"
    neighbor_normalization: str = "none"

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"composition must be one of {COMPOSITIONS}")
        if self.flow not in FLOWS:
            raise ValueError(f"flow must be one of {FLOWS}")
        if self.neighbor_normalization not in NORMALIZATIONS:
            raise ValueError(f"neighbor_normalization must be one of {NORMALIZATIONS}")


@dataclass
class LayerParams:
    w_self: Value
    w_adj: Value
    w_rel: Value
    w_adj_fwd: Optional[Value] = None

    def weights(self) -> list[Value]:
        return [w for w in (self.w_self, self.w_adj, self.w_rel, self.w_adj_fwd) if w is not None]


@dataclass
class GnnParams:
    node_table: Value
    relation_table: Value
    layers: list[LayerParams] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.node_table.shape[1]


def uniform_init(rng: np.random.Generator, shape, dim: int, name: str) -> Value:
    bound = 1.0 / np.sqrt(dim)
    return Value(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def init_gnn_params(
    n_nodes: int, n_relations: int, dim: int, config: GnnConfig, rng: np.random.Generator
) -> GnnParams:
    """Draw all tables and matrices from uniform(-1/sqrt(d), 1/sqrt(d))."""
    nodes = uniform_init(rng, (n_nodes, dim), dim, "node_table")
    rels = uniform_init(rng, (n_relations, dim), dim, "relation_table")
    layers = []
    for i in range(1, config.layers + 1):
        layer = LayerParams(
            uniform_init(rng, (dim, dim), dim, f"gc{i}.w_self"),
            uniform_init(rng, (dim, dim), dim, f"gc{i}.w_adj"),
            uniform_init(rng, (dim, dim), dim, f"gc{i}.w_rel"),
        )
        if config.flow == "bidirectional":
            layer.w_adj_fwd = uniform_init(rng, (dim, dim), dim, f"gc{i}.w_adj_fwd")
        layers.append(layer)
    return GnnParams(nodes, rels, layers)


def compose(h_r: Value, h_v: Value, mode: str) -> Value:
    """Combine relation and neighbor embeddings (row-wise for matrices)."""
    if h_r.shape != h_v.shape:
        raise ShapeError(f"compose: dimension mismatch {h_r.shape} vs {h_v.shape}")
    if mode == "multiply":
        return ad.hadamard(h_r, h_v)
    if mode == "add":
        return ad.add(h_r, h_v)
    raise ValueError(f"unknown composition {mode!r}")


def _index(graph: Union[KnowledgeGraph, GraphIndex]) -> GraphIndex:
    return graph.index if isinstance(graph, KnowledgeGraph) else graph


def _neighbor_sum(H, R, rels, src, dst, degree, n_nodes, config):
    """Sum of cmp(h_r, h_src) over edges, accumulated into row dst."""
    msg = compose(ad.gather_rows(R, rels), ad.gather_rows(H, src), config.composition)
    agg = ad.scatter_add_rows((n_nodes, H.shape[1]), dst, msg)
    if config.neighbor_normalization == "mean":
        agg = ad.scale_rows(agg, 1.0 / np.maximum(degree, 1))
    return agg


def layer_forward(
    H: Value,
    R: Value,
    graph: Union[KnowledgeGraph, GraphIndex],
    layer: LayerParams,
    config: GnnConfig,
) -> tuple[Value, Value]:
    """One graph-convolution layer; returns (next node table, next relation table).

    Each node aggregates over its outgoing edges (v, r, v'), i.e. messages
    travel from tail to head. Bidirectional flow adds an independently
    weighted aggregation over incoming edges.
    """
    idx = _index(graph)
    if H.shape[0] != idx.n_nodes or R.shape[0] != idx.n_relations:
        raise ShapeError(
            f"tables sized ({H.shape[0]}, {R.shape[0]}) for graph with "
            f"({idx.n_nodes}, {idx.n_relations}) nodes/relations"
        )
    pre = ad.matmul(H, ad.transpose(layer.w_self))
    if idx.n_edges:
        agg = _neighbor_sum(H, R, idx.relations, idx.tails, idx.heads, idx.out_degree, idx.n_nodes, config)
        pre = ad.add(pre, ad.matmul(agg, ad.transpose(layer.w_adj)))
        if config.flow == "bidirectional":
            if layer.w_adj_fwd is None:
                raise ValueError("bidirectional flow needs w_adj_fwd")
            agg_f = _neighbor_sum(H, R, idx.relations, idx.heads, idx.tails, idx.in_degree, idx.n_nodes, config)
            pre = ad.add(pre, ad.matmul(agg_f, ad.transpose(layer.w_adj_fwd)))
    H_next = ad.relu(pre)
    R_next = ad.matmul(R, ad.transpose(layer.w_rel))
    return H_next, R_next


def encode(
    graph: Union[KnowledgeGraph, GraphIndex],
    params: GnnParams,
    config: GnnConfig,
    dropout: Callable[[Value], Value] | None = None,
) -> Value:
    """Node embeddings after ``config.layers`` convolutions (node table if 0).

    ``dropout`` is applied to every layer's node output.
    """
    if len(params.layers) != config.layers:
        raise ShapeError(f"{len(params.layers)} parameter layers for a {config.layers}-layer config")
    H, R = params.node_table, params.relation_table
    for layer in params.layers:
        H, R = layer_forward(H, R, graph, layer, config)
        if dropout is not None:
            H = dropout(H)
    return H
