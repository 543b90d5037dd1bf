import numpy as np
import pytest

from oracles import adam_by_hand
from kgpm import autodiff as ad
from kgpm.autodiff import Tape, Value
from kgpm.core import Event, EventLog, KnowledgeGraph, Sample, case_sequence
from kgpm.errors import ConfigMismatch, DataError, TrainingDiverged
from kgpm.gnn import GnnConfig
from kgpm.head import TaskKind
from kgpm.model import ModelSpec, ProcessModel, TimeConfig, model_graph
from kgpm.train import (
    SGD, Adam, TrainConfig, apply_dropout, l2_penalty, load_checkpoint, loss,
    model_from_checkpoint, save_checkpoint, train,
)


def quad_grad(x):
    # f(x, y) = (x - 1)^2 + 10 (y + 2)^2
    return [2 * (x[0] - 1), 20 * (x[1] + 2)]


def test_adam_matches_hand_computation():
    p = Value([[0.3, -0.7]], requires_grad=True)
    opt = Adam([p], lr=0.05)
    for _ in range(3):
        p.grad = np.array([quad_grad(p.data[0])])
        opt.step()
    ref = adam_by_hand(quad_grad, [0.3, -0.7], 0.05, 3)
    assert np.max(np.abs(p.data[0] - ref)) < 1e-10


def test_sgd_step_decreases_quadratic():
    p = Value([[3.0, -1.0]], requires_grad=True)
    target = Value([[1.0, 1.0]])

    def objective():
        with Tape() as tape:
            d = ad.sub(p, target)
            L = ad.sum_all(ad.hadamard(d, d))
        return L, tape

    L0, tape = objective()
    p.grad = np.zeros_like(p.data)
    tape.backward(L0)
    SGD([p], lr=0.01).step()
    L1, _ = objective()
    assert L1.data[0, 0] < L0.data[0, 0]


def test_losses_against_formulas():
    P = Value([[0.8], [0.3]])
    assert loss(P, [1, 0], TaskKind.binary()).data[0, 0] == pytest.approx(
        -(np.log(0.8) + np.log(0.7)) / 2)
    Pm = Value([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    assert loss(Pm, [1, 2], TaskKind.multiclass(3)).data[0, 0] == pytest.approx(
        -(np.log(0.5) + np.log(0.3)) / 2)
    Pr = Value([[2.0], [0.5]])
    assert loss(Pr, [1.0, 1.5], TaskKind.regression()).data[0, 0] == pytest.approx(1.0)
    # clamped at zero probability instead of -inf
    assert np.isfinite(loss(Value([[0.0]]), [1], TaskKind.binary()).data).all()
    with pytest.raises(DataError):
        loss(Value([[0.5]]), [2], TaskKind.binary())


def test_dropout_is_unbiased_and_off_at_eval():
    x = Value(np.ones((200, 50)))
    rng = np.random.default_rng(0)
    out = apply_dropout(x, 0.3, True, rng).data
    zero_frac = np.mean(out == 0)
    assert abs(zero_frac - 0.3) < 0.01
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) <= {0.0, 1 / 0.7}
    assert apply_dropout(x, 0.3, False, rng) is x


def test_l2_penalty_is_sum_of_squared_norms():
    a, b = Value([[1.0, 2.0]]), Value([[3.0], [-1.0]])
    assert l2_penalty([a, b], 0.5).data[0, 0] == pytest.approx(0.5 * (1 + 4 + 9 + 1))


# -- end-to-end ---------------------------------------------------------------------

def separable_data(n=20, seed=0):
    """Label equals the event's attribute node, which links to a class node."""
    rng = np.random.default_rng(seed)
    edges = [(f"item{i}", "is", f"kind{i % 2}") for i in range(n)]
    graph = KnowledgeGraph.build(edges)
    events = [Event(f"c{i}", "A", int(rng.integers(0, 5)), {"item": f"item{i}"}, order=i) for i in range(n)]
    log = EventLog.from_events(events, graph)
    samples = [Sample(c, tuple(case_sequence(log, c)), i % 2) for i, c in enumerate(log.cases)]
    return log, samples


def make_model(log, dim=8, layers=1, seed=0, task=TaskKind.binary(), **kw):
    spec = ModelSpec(dim=dim, task=task, gnn=GnnConfig(layers), **kw)
    return ProcessModel.create(spec, model_graph(log), seed=seed)


def test_learns_a_separable_task():
    log, samples = separable_data()
    model = make_model(log)
    ckpt = train(model, samples, samples, TrainConfig(learning_rate=0.05, epochs=60, embedding_dim=8))
    assert ckpt.val_metric == 1.0
    assert ckpt.history[0]["epoch"] == 1


def test_same_seed_same_checkpoint(tmp_path):
    log, samples = separable_data()
    config = TrainConfig(epochs=5, embedding_dim=8, dropout_rate=0.2, l2_weight=0.01, seed=3)
    paths = []
    for run in range(2):
        model = make_model(log, seed=3)
        ckpt = train(model, samples[:14], samples[14:], config)
        paths.append(tmp_path / f"run{run}.json")
        save_checkpoint(ckpt, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_workers_give_the_same_gradients_up_to_rounding():
    log, samples = separable_data()
    states = []
    for workers in (1, 3):
        model = make_model(log, seed=1)
        train(model, samples, samples, TrainConfig(epochs=3, embedding_dim=8, workers=workers, l2_weight=0.01))
        states.append(model.state())
    for k in states[0]:
        np.testing.assert_allclose(states[0][k], states[1][k], rtol=1e-9, atol=1e-12)


def test_checkpoint_reload_reproduces_outputs(tmp_path):
    log, samples = separable_data()
    model = make_model(log, layers=2, time=TimeConfig(
        mode="parameterized", max_buckets=4))
    ckpt = train(model, samples, samples, TrainConfig(epochs=3, embedding_dim=8))
    save_checkpoint(ckpt, tmp_path / "c.json")
    loaded = load_checkpoint(tmp_path / "c.json")
    restored = model_from_checkpoint(loaded, model.graph)
    assert np.array_equal(restored.predict(samples), model.predict(samples))
    assert loaded.config_hash == model.spec.config_hash


def test_checkpoint_rejects_other_graph_and_tampering(tmp_path):
    log, samples = separable_data()
    model = make_model(log)
    ckpt = train(model, samples, samples, TrainConfig(epochs=1, embedding_dim=8))
    other = KnowledgeGraph.build([("x", "r", "y")])
    with pytest.raises(ConfigMismatch):
        model_from_checkpoint(ckpt, other)
    save_checkpoint(ckpt, tmp_path / "c.json")
    text = (tmp_path / "c.json").read_text().replace('"dim": 8', '"dim": 9')
    (tmp_path / "t.json").write_text(text)
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "t.json")


def test_dimension_mismatch_is_reported():
    log, samples = separable_data()
    with pytest.raises(ConfigMismatch, match="8"):
        train(make_model(log), samples, samples, TrainConfig(epochs=1, embedding_dim=16))


def test_best_epoch_is_kept():
    log, samples = separable_data()
    model = make_model(log)
    seen = []
    ckpt = train(model, samples, samples[:6], TrainConfig(epochs=8, embedding_dim=8),
                 on_epoch=seen.append)
    best = max(seen, key=lambda r: r["val_accuracy"])
    first_best = next(r for r in seen if r["val_accuracy"] == best["val_accuracy"])
    assert ckpt.epoch == first_best["epoch"]
    assert len(seen) == 8


def test_divergence_raises_training_diverged():
    log, samples = separable_data()
    reg = [Sample(s.case_id, s.events, 1e150 * (1 + s.target)) for s in samples]
    model = make_model(log, task=TaskKind.regression())
    config = TrainConfig(epochs=5, embedding_dim=8, optimizer="sgd", learning_rate=1e10,
                         selection_metric="val_rmse")
    with pytest.raises(TrainingDiverged) as info:
        train(model, reg, reg, config)
    assert isinstance(info.value.history, list)


def test_l2_scope_changes_regularised_set():
    log, samples = separable_data()
    model = make_model(log, time=TimeConfig(
        mode="parameterized", max_buckets=4))
    names = {id(p): n for n, p in model.parameters().items()}
    weights = {names[id(w)] for w in model.weight_matrices()}
    assert "node_table" not in weights and "time_table" not in weights
    assert {"head.w1", "head.w2", "head.w3", "gc1.w_self"} <= weights


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    log, samples = separable_data()
    with pytest.raises(ValueError):
        train(make_model(log, task=TaskKind.regression()), samples, samples,
              TrainConfig(epochs=1, embedding_dim=8))
