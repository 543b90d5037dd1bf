import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import auc_pairs
from kgpm.core import Event, EventLog, KnowledgeGraph, Sample, prefix_expand
from kgpm.errors import DataError
from kgpm.head import TaskKind
from kgpm.metrics import (
    SplitSpec, accuracy, auc, evaluate_predictions, predicted_classes, rmse, split, split_cases,
)

scores_labels = st.integers(2, 200).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 12).map(lambda k: k / 4), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
))


@settings(max_examples=200, deadline=None)
@given(data=scores_labels)
def test_auc_equals_pair_counting(data):
    scores, labels = data
    if len(set(labels)) < 2:
        assert auc(scores, labels) is None
    else:
        assert auc(scores, labels) == auc_pairs(scores, labels)


@settings(max_examples=100, deadline=None)
@given(data=scores_labels)
def test_auc_invariant_under_monotone_transform(data):
    scores, labels = data
    if len(set(labels)) < 2:
        return
    transformed = [np.exp(3 * s) - 7 for s in scores]
    assert auc(transformed, labels) == auc(scores, labels)


def test_auc_known_values():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.5, 0.5], [0, 1]) == 0.5


def test_binary_threshold_is_inclusive():
    assert predicted_classes([0.5, 0.4999, 0.9], TaskKind.binary()).tolist() == [1, 0, 1]


def test_argmax_ties_pick_lowest_index():
    p = [[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]]
    assert predicted_classes(p, TaskKind.multiclass(3)).tolist() == [0, 1]


# values on a 1/64 grid so that squared differences cannot underflow
grid = st.integers(-64_000, 64_000).map(lambda k: k / 64)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(grid, grid), min_size=1, max_size=40))
def test_rmse_properties(pairs):
    p, t = zip(*pairs)
    value = rmse(p, t)
    assert value >= 0
    assert (value == 0) == (list(p) == list(t))
    assert rmse(p, p) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_accuracy_range(pairs):
    p, t = zip(*pairs)
    assert 0 <= accuracy(p, t, TaskKind.binary()) <= 1


def test_report_has_only_applicable_metrics():
    binary = evaluate_predictions([[0.7], [0.2]], [1, 0], TaskKind.binary())
    assert binary.accuracy == 1.0 and binary.auc == 1.0 and binary.rmse is None
    multi = evaluate_predictions([[0.7, 0.3], [0.2, 0.8]], [0, 0], TaskKind.multiclass(2), ["x", "y"])
    assert multi.accuracy == 0.5 and multi.auc is None and multi.class_counts == {"x": 2}
    reg = evaluate_predictions([[1.0], [3.0]], [1.0, 1.0], TaskKind.regression())
    assert reg.rmse == pytest.approx(np.sqrt(2)) and reg.accuracy is None
    doc = json.loads(reg.to_json())
    assert doc["schema_version"] == 1


def cases_strategy():
    return st.integers(20, 80).map(lambda n: [f"c{i}" for i in range(n)])


@settings(max_examples=100, deadline=None)
@given(cases=cases_strategy(), seed=st.integers(0, 1000),
       strategy=st.sampled_from(["uniform", "stratified", "temporal_latest"]))
def test_splits_are_case_disjoint_and_sized(cases, seed, strategy):
    spec = SplitSpec(strategy, 0.2, 0.1, seed)
    targets = {c: i % 2 for i, c in enumerate(cases)}
    ends = {c: (i * 7) % 13 for i, c in enumerate(cases)}
    train, val, test = split_cases(cases, spec, targets, ends)
    assert sorted(train + val + test) == sorted(cases)
    assert not (set(train) & set(val) or set(train) & set(test) or set(val) & set(test))
    if strategy != "stratified":
        assert len(test) == round(0.1 * len(cases)) and len(val) == round(0.2 * len(cases))
    if strategy == "temporal_latest":
        assert min(ends[c] for c in test) >= max(ends[c] for c in train + val)


def test_stratified_keeps_class_proportions():
    cases = [f"c{i}" for i in range(100)]
    targets = {c: int(i < 30) for i, c in enumerate(cases)}
    train, val, test = split_cases(cases, SplitSpec("stratified", 0.2, 0.1, 0), targets)
    assert sum(targets[c] for c in val) == 6 and sum(targets[c] for c in test) == 3
    with pytest.raises(DataError):
        split_cases(cases[:3], SplitSpec("stratified", 0.2, 0.1), {c: i for i, c in enumerate(cases[:3])})


def test_split_is_seeded():
    cases = [f"c{i}" for i in range(50)]
    assert split_cases(cases, SplitSpec(seed=4)) == split_cases(cases, SplitSpec(seed=4))
    assert split_cases(cases, SplitSpec(seed=4)) != split_cases(cases, SplitSpec(seed=5))


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(val_fraction=0.6, test_fraction=0.5)
    with pytest.raises(ValueError):
        SplitSpec(strategy="random")
    with pytest.raises(DataError):
        split_cases(["a", "b"], SplitSpec(val_fraction=0.4, test_fraction=0.4))


def test_prefix_samples_never_straddle_splits():
    rng = np.random.default_rng(0)
    events = [Event(f"c{c}", "AB"[int(rng.integers(2))], t, order=10 * c + t)
              for c in range(30) for t in range(int(rng.integers(1, 6)))]
    log = EventLog.from_events(events, KnowledgeGraph())
    parts = split_cases(list(log.cases), SplitSpec(seed=1))
    seen = {}
    for name, cases in zip("tvs", parts):
        samples, _ = prefix_expand(log, cases)
        for s in samples:
            assert seen.setdefault(s.case_id, name) == name


def test_sample_split_groups_by_case():
    samples = [Sample(f"c{i % 10}", (), i % 2) for i in range(40)]
    train, val, test = split(samples, SplitSpec(val_fraction=0.2, test_fraction=0.1))
    ids = [{s.case_id for s in part} for part in (train, val, test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert len(train) + len(val) + len(test) == 40
