"""Losses, dropout, optimizers, checkpoints and the training loop."""
from __future__ import annotations

import base64
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .core import Sample
from .errors import ConfigMismatch, DataError, NumericalError, TrainingDiverged
from .head import TaskKind
from .metrics import MetricsReport, accuracy, evaluate_predictions, rmse
from .model import ModelSpec, ProcessModel

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
CHECKPOINT_FORMAT = "kgpm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 200
    embedding_dim: int = 100
    batch_size: int = 32
    dropout_rate: float = 0.0
    l2_weight: float = 0.0
    l2_scope: str = "weights"
    optimizer: str = "adam"
    seed: int = 0
    selection_metric: str = "val_accuracy"
    workers: int = 1

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.selection_metric not in ("val_accuracy", "val_rmse"):
            raise ValueError("selection_metric must be 'val_accuracy' or 'val_rmse'")
        if self.l2_scope not in ("weights", "all"):
            raise ValueError("l2_scope must be 'weights' or 'all'")
        if self.batch_size < 1 or self.epochs < 0 or self.workers < 1:
            raise ValueError("batch_size and workers must be positive, epochs non-negative")


# -- loss and regularisation ----------------------------------------------------

def loss(P, y, task: TaskKind) -> Value:
    """Mean per-sample loss: cross-entropy for classification, squared error otherwise."""
    P = P if isinstance(P, Value) else Value(P)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = P.shape[0]
    if len(y) != n:
        raise DataError(f"{len(y)} targets for {n} predictions")
    if task.kind == "binary":
        if P.shape[1] != 1:
            raise DataError("binary predictions must have one column")
        if not np.isin(y, (0.0, 1.0)).all():
            raise DataError("binary targets must be 0 or 1")
        yv = Value(y.reshape(-1, 1))
        ones = Value(np.ones((n, 1)))
        log_p = ad.log(P, PROB_CLAMP)
        log_q = ad.log(ad.sub(ones, P), PROB_CLAMP)
        ll = ad.add(ad.hadamard(yv, log_p), ad.hadamard(ad.sub(ones, yv), log_q))
        return ad.scale(ad.sum_all(ll), -1.0 / n)
    if task.kind == "multiclass":
        if np.any(y < 0) or np.any(y >= P.shape[1]) or np.any(y != np.round(y)):
            raise DataError(f"class label outside 0..{P.shape[1] - 1}")
        picked = ad.take(P, y.astype(np.int64))
        return ad.scale(ad.sum_all(ad.log(picked, PROB_CLAMP)), -1.0 / n)
    diff = ad.sub(P, Value(y.reshape(-1, 1)))
    return ad.scale(ad.sum_all(ad.hadamard(diff, diff)), 1.0 / n)


def l2_penalty(weights: Sequence[Value], weight: float) -> Value:
    total = ad.sum_all(ad.hadamard(weights[0], weights[0]))
    for w in weights[1:]:
        total = ad.add(total, ad.sum_all(ad.hadamard(w, w)))
    return ad.scale(total, weight)


def apply_dropout(x: Value, rate: float, training: bool, rng: np.random.Generator) -> Value:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.hadamard(x, Value(mask))


# -- optimizers -------------------------------------------------------------------

class SGD:
    def __init__(self, params: Sequence[Value], lr: float = 0.01):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Value], lr: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: Sequence[Value], lr: float):
    return Adam(params, lr) if name == "adam" else SGD(params, lr)


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    epoch: int
    val_metric: Optional[float]
    config_hash: str
    spec: dict
    history: list[dict] = field(default_factory=list, compare=False)

    def model_spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.spec)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Deterministic JSON container; tensors are base64 little-endian float64."""
    tensors = {}
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        tensors[name] = {
            "shape": list(arr.shape),
            "dtype": "float64",
            "data": base64.b64encode(arr.tobytes()).decode("ascii"),
        }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "val_metric": ckpt.val_metric,
        "spec": ckpt.spec,
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a kgpm checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {doc.get('version')}")
    tensors = {}
    for name, t in doc["tensors"].items():
        raw = base64.b64decode(t["data"])
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
    ckpt = Checkpoint(tensors, doc["epoch"], doc["val_metric"], doc["config_hash"], doc["spec"])
    if ckpt.model_spec().config_hash != ckpt.config_hash:
        raise ConfigMismatch(f"{path}: stored config hash does not match its model spec")
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint, graph) -> ProcessModel:
    spec = ckpt.model_spec()
    model = ProcessModel.create(spec, graph, seed=0)
    model.load_state(ckpt.tensors)
    return model


# -- training -------------------------------------------------------------------

def _selection_value(model: ProcessModel, batch, task: TaskKind, metric: str) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        preds = model.forward(batch).data
    if metric == "val_rmse":
        return rmse(preds, batch.targets)
    return accuracy(preds, batch.targets, task)


def _chunk_grads(model, params, batch_samples, n_total, config, dropout_rng, with_l2):
    batch = model.compile(batch_samples)
    drop = None
    if config.dropout_rate > 0:
        drop = lambda x: apply_dropout(x, config.dropout_rate, True, dropout_rng)
    # overflow surfaces as NumericalError from the finiteness checks
    with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
        P = model.forward(batch, dropout=drop)
        L = ad.scale(loss(P, batch.targets, model.spec.task), len(batch_samples) / n_total)
        if with_l2 and config.l2_weight > 0:
            scope = list(params.values()) if config.l2_scope == "all" else model.weight_matrices()
            L = ad.add(L, l2_penalty(scope, config.l2_weight))
        grads = tape.backward(L, accumulate=False)
    return float(L.data[0, 0]), grads


def train(
    model: ProcessModel,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Minibatch training; returns the checkpoint with the best validation metric.

    The graph is re-encoded at every step. With ``workers > 1`` each batch is
    split into that many chunks whose gradients are computed on separate
    threads and summed in chunk order. On divergence the best checkpoint so
    far travels with the raised :class:`TrainingDiverged`.
    """
    if not train_samples:
        raise DataError("no training samples")
    if model.spec.dim != config.embedding_dim:
        raise ConfigMismatch(
            f"model dimension {model.spec.dim} != configured embedding_dim {config.embedding_dim}"
        )
    task = model.spec.task
    if config.selection_metric == "val_accuracy" and not task.is_classification:
        raise ValueError("val_accuracy selection needs a classification task; use val_rmse")
    params = model.parameters()
    plist = list(params.values())
    optimizer = make_optimizer(config.optimizer, plist, config.learning_rate)
    shuffle_rng = np.random.default_rng(config.seed)
    higher_is_better = config.selection_metric == "val_accuracy"
    select_samples = val_samples if val_samples else train_samples
    if not val_samples:
        logger.warning("no validation samples; selecting on the training set")
    select_batch = model.compile(select_samples)
    spec_dict, chash = model.spec.to_dict(), model.spec.config_hash

    best: Checkpoint | None = None
    history: list[dict] = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = shuffle_rng.permutation(len(train_samples))
            losses = []
            for step, start in enumerate(range(0, len(order), config.batch_size)):
                batch_samples = [train_samples[i] for i in order[start:start + config.batch_size]]
                try:
                    if pool is None:
                        rng = np.random.default_rng([config.seed, epoch, step])
                        parts = [_chunk_grads(model, params, batch_samples, len(batch_samples),
                                              config, rng, True)]
                    else:
                        chunks = [c for c in np.array_split(np.arange(len(batch_samples)), config.workers) if len(c)]
                        futures = [
                            pool.submit(
                                _chunk_grads, model, params, [batch_samples[i] for i in c],
                                len(batch_samples), config,
                                np.random.default_rng([config.seed, epoch, step, k]), k == 0,
                            )
                            for k, c in enumerate(chunks)
                        ]
                        parts = [f.result() for f in futures]
                except NumericalError as exc:
                    raise TrainingDiverged(
                        f"non-finite values at epoch {epoch}, step {step}: {exc}", best, history
                    ) from exc
                for p in plist:
                    p.grad = np.zeros_like(p.data)
                for _, grads in parts:
                    for p in plist:
                        g = grads.get(id(p))
                        if g is not None:
                            p.grad += g
                optimizer.step()
                losses.append(sum(l for l, _ in parts))
            train_loss = float(np.mean(losses))
            if not np.isfinite(train_loss) or not all(np.isfinite(p.data).all() for p in plist):
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", best, history)
            try:
                metric = _selection_value(model, select_batch, task, config.selection_metric)
            except NumericalError as exc:
                raise TrainingDiverged(f"non-finite validation output at epoch {epoch}", best, history) from exc
            record = {"epoch": epoch, "train_loss": train_loss, config.selection_metric: metric}
            history.append(record)
            logger.info("epoch %d loss %.6f %s %.6f", epoch, train_loss, config.selection_metric, metric)
            if on_epoch is not None:
                on_epoch(record)
            improved = best is None or (
                metric > best.val_metric if higher_is_better else metric < best.val_metric
            )
            if improved:
                best = Checkpoint(model.state(), epoch, metric, chash, spec_dict)
    finally:
        if pool is not None:
            pool.shutdown()

    if best is None:
        # zero epochs: the initial parameters are the only candidate
        metric = _selection_value(model, select_batch, task, config.selection_metric)
        best = Checkpoint(model.state(), 0, metric, chash, spec_dict)
    best.history = history
    model.load_state(best.tensors)
    return best


def evaluate_model(
    model: ProcessModel, samples: Sequence[Sample], split_name: str = "", epoch: int | None = None
) -> MetricsReport:
    if not samples:
        raise DataError(f"no samples to evaluate in split {split_name!r}")
    preds = model.predict(samples)
    targets = np.array([s.target for s in samples])
    return evaluate_predictions(
        preds, targets, model.spec.task, model.spec.classes,
        config_hash=model.spec.config_hash, checkpoint_epoch=epoch, split=split_name,
    )
