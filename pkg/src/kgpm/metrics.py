"""Case-level splits and evaluation metrics (accuracy, AUC, RMSE)."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import Sample
from .errors import DataError
from .head import TaskKind

logger = logging.getLogger(__name__)

SPLIT_STRATEGIES = ("uniform", "stratified", "temporal_latest")
REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SplitSpec:
    strategy: str = "uniform"
    val_fraction: float = 0.2
    test_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in SPLIT_STRATEGIES:
            raise ValueError(f"split strategy must be one of {SPLIT_STRATEGIES}")
        for f in (self.val_fraction, self.test_fraction):
            if not 0 <= f < 1:
                raise ValueError("split fractions must lie in [0, 1)")
        if self.val_fraction + self.test_fraction >= 1:
            raise ValueError("val_fraction + test_fraction must be < 1")


def _cases_in_order(samples: Sequence[Sample]) -> list[str]:
    return list(dict.fromkeys(s.case_id for s in samples))


def split_cases(
    cases: Sequence[str],
    spec: SplitSpec,
    targets: dict[str, object] | None = None,
    end_times: dict[str, int] | None = None,
) -> tuple[list[str], list[str], list[str]]:
    """Partition case ids into (train, val, test).

    Split sizes are ``round(fraction * n)``. ``stratified`` applies that rule
    per class, ``temporal_latest`` puts the cases ending last into test.
    """
    cases = list(cases)
    n = len(cases)
    rng = np.random.default_rng(spec.seed)
    n_val = round(spec.val_fraction * n)
    n_test = round(spec.test_fraction * n)

    if spec.strategy == "uniform":
        order = [cases[i] for i in rng.permutation(n)]
        test, val, train = order[:n_test], order[n_test:n_test + n_val], order[n_test + n_val:]
    elif spec.strategy == "stratified":
        if targets is None:
            raise DataError("stratified split needs categorical targets")
        by_class: dict[object, list[str]] = defaultdict(list)
        for c in cases:
            by_class[targets[c]].append(c)
        needed = 1 + (spec.val_fraction > 0) + (spec.test_fraction > 0)
        train, val, test = [], [], []
        for label in sorted(by_class, key=str):
            members = by_class[label]
            if len(members) < needed:
                raise DataError(
                    f"class {label!r} has {len(members)} case(s), fewer than the {needed} splits"
                )
            members = [members[i] for i in rng.permutation(len(members))]
            k_test = round(spec.test_fraction * len(members))
            k_val = round(spec.val_fraction * len(members))
            test += members[:k_test]
            val += members[k_test:k_test + k_val]
            train += members[k_test + k_val:]
    else:
        if end_times is None:
            raise DataError("temporal_latest split needs case end times")
        position = {c: i for i, c in enumerate(cases)}
        by_time = sorted(cases, key=lambda c: (end_times[c], position[c]))
        test = by_time[n - n_test:] if n_test else []
        rest = by_time[:n - n_test]
        rest = [rest[i] for i in rng.permutation(len(rest))]
        val, train = rest[:n_val], rest[n_val:]

    if not train or (spec.val_fraction > 0 and not val) or (spec.test_fraction > 0 and not test):
        raise DataError(f"not enough cases ({n}) for a non-empty {spec.strategy} split")
    return train, val, test


def split(
    samples: Sequence[Sample], spec: SplitSpec
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Partition full-case samples by case (never by event)."""
    cases = _cases_in_order(samples)
    targets = {s.case_id: s.target for s in samples} if spec.strategy == "stratified" else None
    end_times = None
    if spec.strategy == "temporal_latest":
        end_times = {s.case_id: max((e.timestamp for e in s.events), default=0) for s in samples}
    train, val, test = split_cases(cases, spec, targets, end_times)
    member = {c: 0 for c in train} | {c: 1 for c in val} | {c: 2 for c in test}
    parts: tuple[list, list, list] = ([], [], [])
    for s in samples:
        parts[member[s.case_id]].append(s)
    return parts


def predicted_classes(preds, task: TaskKind) -> np.ndarray:
    """Binary: ``P >= 0.5``; multiclass: argmax (lowest index wins ties)."""
    p = np.asarray(preds, dtype=np.float64)
    if task.kind == "binary":
        return (p.reshape(-1) >= 0.5).astype(np.int64)
    return np.argmax(p.reshape(len(p), -1), axis=1)


def accuracy(preds, targets, task: TaskKind) -> float:
    targets = np.asarray(targets).reshape(-1)
    if len(targets) == 0:
        raise DataError("accuracy of an empty prediction set")
    classes = predicted_classes(preds, task)
    if len(classes) != len(targets):
        raise DataError(f"{len(classes)} predictions for {len(targets)} targets")
    return float(np.mean(classes == targets.astype(np.int64)))


def auc(scores, targets) -> Optional[float]:
    """ROC AUC via the Mann-Whitney rank statistic with midranks.

    Returns ``None`` (and logs a warning) if only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(targets).reshape(-1).astype(np.int64)
    if len(scores) != len(y):
        raise DataError(f"{len(scores)} scores for {len(y)} targets")
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        logger.warning("AUC undefined: only one class present")
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def rmse(preds, targets) -> float:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(t) == 0:
        raise DataError("rmse of an empty prediction set")
    if len(p) != len(t):
        raise DataError(f"{len(p)} predictions for {len(t)} targets")
    return math.sqrt(float(np.mean((p - t) ** 2)))


@dataclass
class MetricsReport:
    sample_count: int
    accuracy: Optional[float] = None
    auc: Optional[float] = None
    rmse: Optional[float] = None
    class_counts: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    checkpoint_epoch: Optional[int] = None
    split: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def evaluate_predictions(
    preds, targets, task: TaskKind, classes: Sequence[str] = (), **meta
) -> MetricsReport:
    """Exactly the metrics that apply to ``task``."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets)
    report = MetricsReport(sample_count=len(targets), **meta)
    if task.kind == "regression":
        report.rmse = rmse(preds, targets)
        return report
    report.accuracy = accuracy(preds, targets, task)
    names = list(classes) if classes else (["0", "1"] if task.kind == "binary" else [])
    counts = Counter(int(t) for t in targets)
    report.class_counts = {
        (names[k] if k < len(names) else str(k)): v for k, v in sorted(counts.items())
    }
    if task.kind == "binary":
        report.auc = auc(preds.reshape(-1), targets)
    return report
