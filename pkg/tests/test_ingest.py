import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from kgpm.core import save_event_log, save_knowledge_graph
from kgpm.errors import DataError
from kgpm.ingest import MISSING, discretize, extract, load_schema, parse_schema

FIXTURE = Path(__file__).parent / "fixtures" / "two_tables"

# Counted by hand from fixtures/two_tables:
#   nodes: 4 accounts + 6 loans + 3 regions + 2 balance bins + 2 statuses + 2 amount bins = 19
#   edges: 4 region + 3 balance + 5 of_account (l4 dangles) + 6 status + 5 amount = 23
#   events: 4 case-info + 6 loan = 10, over cases a1 a2 a3 a4 a9
HAND = {"nodes": 19, "edges": 23, "relations": 5, "events": 10, "cases": 5}


def test_fixture_counts_match_hand_count():
    result = extract(load_schema(FIXTURE / "schema.yaml"), FIXTURE)
    assert {k: result.manifest[k] for k in HAND} == HAND
    assert result.manifest["skipped"]["dangling_fk"] == 1
    assert result.manifest["bin_boundaries"] == {"account.balance": [200.0], "loan.amount": [30.0]}


def test_fixture_node_ids_and_event_attributes():
    result = extract(load_schema(FIXTURE / "schema.yaml"), FIXTURE)
    g = result.graph
    assert ("loan:l1", "of_account", "account:a1") in g.edges
    assert ("account:a2", "has_balance", "account:balance#bin0") in g.edges
    assert ("account:a4", "has_balance", "account:balance#bin1") in g.edges
    assert ("loan:l3", "has_amount", "loan:amount#bin0") in g.edges
    by_case = result.log.by_case
    info = [e for e in by_case["a1"] if e.event_type == "case info"][0]
    assert info.timestamp == 0
    assert info.attribute_map == {"account": "account:a1", "balance": "account:balance#bin0",
                                  "region": "account:region=north"}
    l5 = [e for e in by_case["a4"] if e.event_type == "loan"][0]
    assert "amount" not in l5.attribute_map
    nodes = set(g.nodes)
    assert all(v in nodes for e in result.log.events for v in e.attribute_nodes)


def test_case_info_timestamp_first(tmp_path):
    doc = yaml.safe_load((FIXTURE / "schema.yaml").read_text())
    doc["options"]["case_info_timestamp"] = "first"
    result = extract(parse_schema(doc), FIXTURE)
    info = {e.case_id: e.timestamp for e in result.log.events if e.event_type == "case info"}
    # a1 loans at 5 and 8; a3 has l6 at 4; a4 has l5 at 2; a2 has l2 at 3
    assert info == {"a1": 5, "a2": 3, "a3": 4, "a4": 2}


def test_dangling_fk_can_fail():
    doc = yaml.safe_load((FIXTURE / "schema.yaml").read_text())
    doc["options"]["dangling_fk"] = "fail"
    with pytest.raises(DataError, match="a9"):
        extract(parse_schema(doc), FIXTURE)


def test_extraction_is_byte_deterministic(tmp_path):
    outputs = []
    for run in range(2):
        result = extract(load_schema(FIXTURE / "schema.yaml"), FIXTURE)
        d = tmp_path / str(run)
        d.mkdir()
        save_knowledge_graph(result.graph, d / "g.tsv")
        save_event_log(result.log, d / "e.csv")
        (d / "m.json").write_text(json.dumps(result.manifest, sort_keys=True))
        outputs.append([(d / f).read_bytes() for f in ("g.tsv", "e.csv", "m.json")])
    assert outputs[0] == outputs[1]


def test_discretize_median_split():
    assert discretize([10, 20, 30, 40], 2) == ([0, 0, 1, 1], [25.0])


def test_discretize_boundary_values_go_low_and_missing_is_flagged():
    idx, bounds = discretize([1, 2, 2, 2, 3, None, float("nan")], 2)
    assert bounds == [2.0]
    assert idx == [0, 0, 0, 0, 1, MISSING, MISSING]
    # constant column collapses to a single bin
    assert discretize([5, 5, 5], 4) == ([0, 0, 0], [])


@settings(max_examples=100, deadline=None)
@given(values=st.lists(st.integers(-50, 50), min_size=1, max_size=60), bins=st.integers(2, 8))
def test_discretize_bins_are_ordered_and_roughly_equal(values, bins):
    idx, bounds = discretize(values, bins)
    assert len(bounds) <= bins - 1 and bounds == sorted(set(bounds))
    for v, i in zip(values, idx):
        assert 0 <= i <= len(bounds)
        # bin i covers (bounds[i-1], bounds[i]]
        if i > 0:
            assert v > bounds[i - 1]
        if i < len(bounds):
            assert v <= bounds[i]
    order = np.argsort(values, kind="stable")
    assert [idx[k] for k in order] == sorted(idx)


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


@settings(max_examples=40, deadline=None)
@given(
    parents=st.lists(st.tuples(st.sampled_from(["x", "y", "z", ""]), st.integers(0, 9) | st.none()),
                     min_size=1, max_size=12),
    children=st.lists(st.integers(0, 15), max_size=12),
)
def test_node_count_matches_brute_force(tmp_path_factory, parents, children):
    d = tmp_path_factory.mktemp("t")
    write_table(d / "p.csv", ["pid", "cat", "num"],
                [(f"p{i}", c, "" if n is None else n) for i, (c, n) in enumerate(parents)])
    write_table(d / "c.csv", ["cid", "parent"], [(f"c{i}", f"p{j}") for i, j in enumerate(children)])
    doc = {"tables": [
        {"name": "p", "file": "p.csv", "key": "pid",
         "categorical_attrs": [{"column": "cat", "relation": ["is", "has"]}],
         "numeric_attrs": [{"column": "num", "relation": "val", "bins": 3}],
         "event": {"case": "pid", "type": "open", "attributes": ["cat"]}},
        {"name": "c", "file": "c.csv", "key": "cid",
         "fk_edges": [{"column": "parent", "relation": "child_of", "target": "p"}]},
    ]}
    result = extract(parse_schema(doc), d)
    nums = [n for _, n in parents if n is not None]
    realized = len(set(discretize(nums, 3)[0])) if nums else 0
    cats = len({c for c, _ in parents if c})
    assert len(result.graph.nodes) == len(parents) + len(children) + cats + realized
    n_valid_fk = sum(j < len(parents) for j in children)
    expected_edges = 2 * sum(1 for c, _ in parents if c) + len(nums) + n_valid_fk
    assert len(result.graph.edges) == expected_edges
    assert result.manifest["skipped"]["dangling_fk"] == len(children) - n_valid_fk
    nodes = set(result.graph.nodes)
    assert all(v in nodes for e in result.log.events for v in e.attribute_nodes)


@pytest.mark.parametrize("doc, msg", [
    ({}, "tables"),
    ({"tables": [{"name": "a", "file": "a.csv"}]}, "key"),
    ({"tables": [{"name": "a", "file": "a.csv", "key": "k",
                  "fk_edges": [{"column": "x", "relation": "r", "target": "nope"}]}]}, "nope"),
    ({"tables": [{"name": "a", "file": "a.csv", "key": "k",
                  "event": {"case": "k", "type": "t", "attributes": ["undeclared"]}}]}, "undeclared"),
    ({"tables": [{"name": "a", "file": "a.csv", "key": "k",
                  "categorical_attrs": [{"column": "x"}]}]}, "relation"),
    ({"options": {"dangling_fk": "maybe"}, "tables": []}, "dangling_fk"),
])
def test_schema_errors(doc, msg):
    with pytest.raises(DataError, match=msg):
        parse_schema(doc)


def test_missing_file_and_column(tmp_path):
    doc = {"tables": [{"name": "a", "file": "a.csv", "key": "k"}]}
    with pytest.raises(DataError, match="not found"):
        extract(parse_schema(doc), tmp_path)
    write_table(tmp_path / "a.csv", ["id"], [("1",)])
    with pytest.raises(DataError, match="missing column"):
        extract(parse_schema(doc), tmp_path)
