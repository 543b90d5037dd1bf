"""Synthetic datasets whose label signal sits several hops away in the graph.

Each case owns a private chain ``entity -> hop1 -> ... -> signal`` of length
``kg_depth``; only the final signal nodes are shared between cases. The clean
label is ``signal_index % 2`` and is flipped with probability ``noise``.
Events reference the case's entity node (the "case info" event) and shared,
uninformative resource nodes. Because entity and hop nodes are private, a
model can only generalise to unseen cases by propagating information over at
least ``kg_depth`` graph-convolution layers.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Event, EventLog, KnowledgeGraph, save_event_log, save_knowledge_graph, save_labels
from .metrics import auc


@dataclass
class SynthData:
    graph: KnowledgeGraph
    log: EventLog
    labels: dict[str, str]
    signal_of: dict[str, int]


def generate(
    cases: int = 2000,
    kg_depth: int = 2,
    noise: float = 0.1,
    seed: int = 0,
    n_signals: int = 4,
    n_resources: int = 10,
) -> SynthData:
    if cases < 20:
        raise ValueError("synthetic datasets need at least 20 cases")
    if kg_depth < 0 or not 0 <= noise <= 1:
        raise ValueError("kg_depth must be >= 0 and noise in [0, 1]")
    rng = np.random.default_rng(seed)
    width = len(str(cases - 1))
    edges = []
    events: list[Event] = []
    labels: dict[str, str] = {}
    signal_of: dict[str, int] = {}
    resources = [f"res{j}" for j in range(n_resources)]
    for c in range(cases):
        case = f"case{c:0{width}d}"
        s = int(rng.integers(n_signals))
        flip = rng.random() < noise
        signal_of[case] = s
        labels[case] = str((s % 2) ^ int(flip))
        chain = [f"ent{c}"] + [f"hop{c}_{h}" for h in range(1, kg_depth)] + [f"signal{s}"]
        chain = chain[-(kg_depth + 1):]
        for h, (a, b) in enumerate(zip(chain, chain[1:]), start=1):
            edges.append((a, f"link{h}", b))
        entity = chain[0]
        if kg_depth > 0:
            edges.append((entity, "near", resources[int(rng.integers(n_resources))]))
        events.append(Event(case, "case info", 0, {"entity": entity}, order=len(events)))
        t = 0
        for _ in range(int(rng.integers(1, 4))):
            t += int(rng.integers(1, 10))
            etype = "ABC"[int(rng.integers(3))]
            res = resources[int(rng.integers(n_resources))]
            events.append(Event(case, etype, t, {"resource": res}, order=len(events)))
    graph = KnowledgeGraph.build(edges, resources + [f"signal{s}" for s in range(n_signals)])
    return SynthData(graph, EventLog.from_events(events, graph), labels, signal_of)


def write(data: SynthData, out_dir, spec: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_knowledge_graph(data.graph, out / "graph.tsv")
    save_event_log(data.log, out / "events.csv")
    save_labels(data.labels, out / "labels.csv")
    manifest = {
        "spec": spec or {},
        "nodes": len(data.graph.nodes),
        "edges": len(data.graph.edges),
        "events": len(data.log.events),
        "cases": len(data.log.cases),
    }
    (out / "synth_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def hop_features(graph: KnowledgeGraph, log: EventLog, hops: int) -> dict[str, frozenset[str]]:
    """Nodes reachable in exactly ``hops`` outgoing steps from each case's attribute nodes."""
    out_edges = defaultdict(set)
    for h, _, t in graph.edges:
        out_edges[h].add(t)
    feats = {}
    for case, events in log.by_case.items():
        frontier = {v for e in events for v in e.attribute_nodes}
        for _ in range(hops):
            frontier = {t for v in frontier for t in out_edges[v]}
        feats[case] = frozenset(frontier)
    return feats


def bayes_auc(
    features: dict[str, frozenset[str]],
    labels: dict[str, str],
    train_cases: Iterable[str],
    test_cases: Sequence[str],
) -> float:
    """Test AUC of the empirical Bayes classifier P(y=1 | feature) fit on ``train_cases``.

    Unseen features fall back to the training prior.
    """
    pos, tot = Counter(), Counter()
    train_cases = list(train_cases)
    for c in train_cases:
        tot[features[c]] += 1
        pos[features[c]] += int(labels[c])
    prior = sum(int(labels[c]) for c in train_cases) / len(train_cases)
    scores = [pos[features[c]] / tot[features[c]] if tot[features[c]] else prior for c in test_cases]
    return auc(scores, [int(labels[c]) for c in test_cases])
