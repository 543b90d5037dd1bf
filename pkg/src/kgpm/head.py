"""Feed-forward sequence model on top of event embeddings.

Per event ``W1 @ phi``, mean over the case's events, ``relu(W2 @ .)``, then
``g(W3 @ .)`` with ``g`` chosen by the task (sigmoid / softmax / identity).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .errors import DataError
from .gnn import uniform_init

TASKS = ("binary", "multiclass", "regression")


@dataclass(frozen=True)
class TaskKind:
    kind: str
    n_classes: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.kind == "multiclass" and self.n_classes < 2:
            raise ValueError("multiclass tasks need at least 2 classes")

    @classmethod
    def binary(cls) -> "TaskKind":
        return cls("binary")

    @classmethod
    def multiclass(cls, n_classes: int) -> "TaskKind":
        return cls("multiclass", n_classes)

    @classmethod
    def regression(cls) -> "TaskKind":
        return cls("regression")

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.kind == "multiclass" else 1

    @property
    def is_classification(self) -> bool:
        return self.kind != "regression"


@dataclass
class HeadParams:
    w1: Value
    w2: Value
    w3: Value
    b1: Optional[Value] = None
    b2: Optional[Value] = None
    b3: Optional[Value] = None

    @property
    def output_dim(self) -> int:
        return self.w3.shape[0]

    def weights(self) -> list[Value]:
        return [self.w1, self.w2, self.w3]

    def biases(self) -> list[Value]:
        return [b for b in (self.b1, self.b2, self.b3) if b is not None]


def init_head_params(dim: int, output_dim: int, rng: np.random.Generator, bias: bool = False) -> HeadParams:
    params = HeadParams(
        uniform_init(rng, (dim, dim), dim, "head.w1"),
        uniform_init(rng, (dim, dim), dim, "head.w2"),
        uniform_init(rng, (output_dim, dim), dim, "head.w3"),
    )
    if bias:
        params.b1 = Value(np.zeros((1, dim)), requires_grad=True, name="head.b1")
        params.b2 = Value(np.zeros((1, dim)), requires_grad=True, name="head.b2")
        params.b3 = Value(np.zeros((1, output_dim)), requires_grad=True, name="head.b3")
    return params


def _linear(x: Value, w: Value, b: Optional[Value]) -> Value:
    out = ad.matmul(x, ad.transpose(w))
    if b is not None:
        out = ad.add(out, ad.gather_rows(b, np.zeros(out.shape[0], dtype=np.int64)))
    return out


def output_activation(logits: Value, task: TaskKind) -> Value:
    if task.kind == "binary":
        return ad.sigmoid(logits)
    if task.kind == "multiclass":
        return ad.softmax_rows(logits)
    return logits


def head_forward(
    phi: Value,
    params: HeadParams,
    task: TaskKind,
    segments=None,
    n_segments: int | None = None,
    dropout: Callable[[Value], Value] | None = None,
    allow_empty: bool = False,
) -> Value:
    """Predictions ``P`` for one case (``segments=None``) or a batch.

    ``phi`` holds one event embedding per row; ``segments[i]`` names the case
    of row ``i``. Returns shape (cases, o). ``dropout`` acts on the hidden
    layer output.
    """
    transformed = _linear(phi, params.w1, params.b1)
    if segments is None:
        if phi.shape[0] == 0:
            if not allow_empty:
                raise DataError("head_forward on a case without events")
            pooled = Value(np.zeros((1, phi.shape[1])))
        else:
            pooled = ad.mean_rows(transformed)
    else:
        pooled = ad.segment_mean(transformed, segments, n_segments, allow_empty=allow_empty)
    hidden = ad.relu(_linear(pooled, params.w2, params.b2))
    if dropout is not None:
        hidden = dropout(hidden)
    return output_activation(_linear(hidden, params.w3, params.b3), task)
