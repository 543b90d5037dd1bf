"""Full-model gradient check on a small random instance."""
from __future__ import annotations

import numpy as np

from .autodiff import GradCheckReport, grad_check_report
from .core import Event, EventLog, KnowledgeGraph, Sample, case_sequence
from .gnn import GnnConfig
from .head import TaskKind
from .model import ModelSpec, ProcessModel, TimeConfig, model_graph
from .train import loss


def toy_instance(
    seed: int = 0,
    n_nodes: int = 10,
    n_relations: int = 3,
    n_cases: int = 5,
    n_edges: int = 18,
) -> tuple[KnowledgeGraph, EventLog, list[Sample]]:
    rng = np.random.default_rng(seed)
    nodes = [f"n{i}" for i in range(n_nodes)]
    rels = [f"r{i}" for i in range(n_relations)]
    edges = {
        (nodes[rng.integers(n_nodes)], rels[rng.integers(n_relations)], nodes[rng.integers(n_nodes)])
        for _ in range(n_edges)
    }
    graph = KnowledgeGraph.build(edges, nodes, rels)
    events = []
    for c in range(n_cases):
        for _ in range(int(rng.integers(1, 4))):
            k = int(rng.integers(1, 4))
            attrs = {f"a{j}": nodes[rng.integers(n_nodes)] for j in range(k)}
            events.append(Event(f"c{c}", "AB"[int(rng.integers(2))], int(rng.integers(0, 50)),
                                attrs, order=len(events)))
    log = EventLog.from_events(events, graph)
    samples = [Sample(c, tuple(case_sequence(log, c)), int(rng.integers(2))) for c in log.cases]
    return graph, log, samples


def full_model_grad_check(
    seed: int = 0,
    dim: int = 4,
    layers: int = 2,
    composition: str = "multiply",
    time_mode: str = "sinusoidal",
    eps: float = 1e-5,
) -> GradCheckReport:
    """Analytic vs central-difference gradients of the batch loss w.r.t. every parameter."""
    _, log, samples = toy_instance(seed)
    spec = ModelSpec(
        dim=dim,
        task=TaskKind.binary(),
        gnn=GnnConfig(layers=layers, composition=composition),
        time=TimeConfig(mode=time_mode, time_scale=10.0),
    )
    model = ProcessModel.create(spec, model_graph(log), seed=seed)
    batch = model.compile(samples)
    params = list(model.parameters().values())

    def builder(_params):
        return loss(model.forward(batch), batch.targets, spec.task)

    return grad_check_report(builder, params, eps=eps, max_entries=None)
