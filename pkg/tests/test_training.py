import numpy as np
import pandas as pd
import pytest

from repair_core import training
from repair_core.encoding import fit_encoders
from repair_core.errors import EmptyLog, InvalidFlag, NonFiniteLoss, NumericalError, ProvenanceError
from repair_core.graph import batch_graphs
from repair_core.masking import training_strategies
from repair_core.model import ModelConfig, ModelParams, forward
from repair_core.synthetic import ProcessSpec, generate_synthetic_log
from repair_core.tensor import Parameter
from repair_core.training import (
    AdamState,
    History,
    EpochRecord,
    RandomSearch,
    SearchSpace,
    TrainConfig,
    adam_step,
    expand_graphs,
    random_search,
    train_model,
    write_history_csv,
)

TINY = TrainConfig(learning_rate=0.01, batch_size=4, max_epochs=3, patience=None)
TINY_MODEL = ModelConfig(hidden_size=8)


def _single(value=1.0):
    p = Parameter([[value]], "p")
    return ModelParams(ModelConfig(), (), (), {}, b"", {"p": p})


def test_adam_first_step():
    params = _single()
    adam_step(params, {"p": np.array([[1.0]])}, AdamState(), TrainConfig(learning_rate=0.1, weight_decay=0))
    assert params["p"].data[0, 0] == pytest.approx(0.9, abs=1e-7)


def test_adam_zero_gradient_keeps_params():
    params = _single()
    state = AdamState()
    for _ in range(3):
        adam_step(params, {"p": np.zeros((1, 1))}, state, TrainConfig(weight_decay=0))
    assert params["p"].data[0, 0] == 1.0
    assert state.t == 3


def test_adam_weight_decay_is_added_to_the_gradient():
    params = _single()
    state = AdamState()
    adam_step(params, {"p": np.zeros((1, 1))}, state, TrainConfig(learning_rate=0.1, weight_decay=0.1))
    assert params["p"].data[0, 0] < 1.0
    assert state.m["p"][0, 0] == pytest.approx(0.1 * 0.1)


def test_adam_reads_and_clears_accumulated_grads():
    params = _single()
    params["p"].grad[...] = 2.0
    adam_step(params, None, AdamState(), TrainConfig(learning_rate=0.1, weight_decay=0))
    assert params["p"].data[0, 0] == pytest.approx(0.9, abs=1e-7)
    assert params["p"].grad[0, 0] == 0.0


def test_train_config_validation():
    assert TrainConfig(patience=0).patience is None
    assert TrainConfig.from_dict({"batch_size": 16}).batch_size == 16
    with pytest.raises(InvalidFlag):
        TrainConfig.from_dict({"momentum": 0.9})
    with pytest.raises(InvalidFlag):
        TrainConfig(aggregator="median")
    with pytest.raises(InvalidFlag):
        TrainConfig(learning_rate=0)
    with pytest.raises(InvalidFlag):
        TrainConfig(lr_gamma=1.5)


def test_expand_graphs_one_per_trace_and_strategy(small_log):
    enc = fit_encoders(small_log)
    graphs = expand_graphs(small_log, enc, training.training_strategies(), seed=123)
    assert len(graphs) == 12
    assert [g.case_id for g in graphs[:3]] == ["c1", "c2", "c3"]
    assert graphs[0].mask["activity"].tolist() == [False, True, False]


def test_early_stopping_restores_best_epoch(small_log, monkeypatch):
    losses = iter([1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.5])
    snapshots = []

    def fake_loss(graphs, params, batch_size):
        snapshots.append(params.flat().copy())
        return next(losses)

    monkeypatch.setattr(training, "dataset_loss", fake_loss)
    val = small_log.with_traces(small_log.traces, "val")
    cfg = TrainConfig(learning_rate=0.01, batch_size=4, max_epochs=20, patience=5)
    params, history = train_model(small_log, val, fit_encoders(small_log), cfg, TINY_MODEL)

    assert len(history.records) == 7
    assert history.best_epoch == 2
    assert history.stopped_early
    assert history.best_val_loss == 0.9
    assert np.array_equal(params.flat(), snapshots[1])
    # the final training loss is measured on the restored parameters
    assert np.array_equal(snapshots[-1], snapshots[1])
    assert history.final_train_loss == 0.5


def test_training_is_deterministic(small_log):
    val = small_log.with_traces(small_log.traces, "val")
    enc = fit_encoders(small_log)
    a, ha = train_model(small_log, val, enc, TINY, TINY_MODEL)
    b, hb = train_model(small_log, val, enc, TINY, TINY_MODEL)
    assert np.array_equal(a.flat(), b.flat())
    assert ha.to_rows() == hb.to_rows()
    # the training config's aggregator wins over the model's
    assert a.config.aggregator == TINY.aggregator


def test_training_rejects_test_data_and_empty_splits(small_log):
    enc = fit_encoders(small_log)
    test = small_log.with_traces(small_log.traces, "test")
    with pytest.raises(ProvenanceError):
        train_model(test, small_log, enc, TINY, TINY_MODEL)
    with pytest.raises(ProvenanceError):
        train_model(small_log, test, enc, TINY, TINY_MODEL)
    with pytest.raises(EmptyLog):
        train_model(small_log, small_log.with_traces([], "val"), enc, TINY, TINY_MODEL)


def test_numerical_failure_becomes_non_finite_loss(small_log, monkeypatch):
    def boom(preds, batch):
        raise NumericalError("matmul produced non-finite values")

    monkeypatch.setattr(training, "compute_loss", boom)
    with pytest.raises(NonFiniteLoss) as e:
        train_model(small_log, small_log, fit_encoders(small_log), TINY, TINY_MODEL)
    assert e.value.details["epoch"] == 1


# every event is fixed by its position, so each mask pattern has one answer
LINEAR_SPEC = {
    "activities": ["S", "A", "B", "C", "E"],
    "edges": [
        {"from": "S", "to": "A", "p": 1.0},
        {"from": "A", "to": "B", "p": 1.0},
        {"from": "B", "to": "C", "p": 1.0},
        {"from": "C", "to": "E", "p": 1.0},
    ],
    "durations": {"A": [60, 60], "B": [300, 300], "C": [900, 900], "E": [30, 30]},
    "attrs": [{"name": "resource", "rule": {"kind": "by_parity", "even": "desk", "odd": "field"}}],
}


def test_overfits_a_small_deterministic_log():
    log = generate_synthetic_log(ProcessSpec.from_dict(LINEAR_SPEC), 10, seed=123)
    train = log.with_traces(log.traces, "train")
    val = log.with_traces(log.traces, "val")
    enc = fit_encoders(train)
    cfg = TrainConfig(learning_rate=0.01, lr_gamma=0.98, batch_size=8, weight_decay=0, aggregator="sum",
                      max_epochs=200, patience=None)
    params, history = train_model(train, val, enc, cfg, ModelConfig(hidden_size=32))

    assert history.final_train_loss < 0.05
    batch = batch_graphs(expand_graphs(train, enc, training_strategies(), cfg.seed))
    preds = forward(batch, params)
    y = batch.target["activity"][preds.rows["activity"]]
    known = ~np.isnan(y)
    choice = np.argmax(preds.outputs["activity"].data[known][:, :-1], axis=1)
    assert np.array_equal(choice, y[known].astype(int))


def test_history_csv(tmp_path):
    history = History([EpochRecord(1, 2.0, 1.5), EpochRecord(2, 1.0, 0.75)], best_epoch=2)
    path = tmp_path / "history.csv"
    write_history_csv(history, path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["epoch", "train_loss", "val_loss"]
    assert frame["val_loss"].tolist() == [1.5, 0.75]
    assert path.read_text().splitlines()[0] == "epoch,train_loss,val_loss"


def test_search_samples_stay_in_range():
    space = SearchSpace(lr_range=(1e-4, 1e-1), batch_sizes=(16, 64), wd_range=(0.01, 0.1))
    configs = RandomSearch(space, 50, seed=123).candidates()
    assert all(1e-4 <= c.learning_rate <= 1e-1 for c in configs)
    assert all(0.01 <= c.weight_decay <= 0.1 for c in configs)
    assert {c.batch_size for c in configs} <= {16, 64}
    assert configs == RandomSearch(space, 50, seed=123).candidates()


def test_search_budget_one_returns_the_single_sample():
    search = RandomSearch(SearchSpace(), 1, seed=5)
    (only,) = search.candidates()
    assert search.run(lambda cfg: 3.0) == only
    assert len(search.trials) == 1


@pytest.mark.parametrize("workers", [1, 3])
def test_search_returns_the_planted_best(workers):
    space = SearchSpace(batch_sizes=(16,), aggregators=("sum", "max"))
    search = RandomSearch(space, 6, seed=123, workers=workers)
    planted = search.candidates()[4]
    best = search.run(lambda cfg: 0.0 if cfg == planted else 1.0)
    assert best == planted

    # equal losses fall back to the first trial
    first = search.candidates()[0]
    assert random_search(space, 6, 123, lambda cfg: 1.0) == first


def test_search_space_from_dict():
    space = SearchSpace.from_dict({"lr_range": [0.001, 0.01], "aggregators": ["mean"]})
    assert space.lr_range == (0.001, 0.01)
    with pytest.raises(InvalidFlag):
        SearchSpace.from_dict({"depth": [1, 2]})


def test_learning_rate_decays_per_epoch(small_log, monkeypatch):
    seen = []
    real_step = training.adam_step

    def spy(params, grads, state, cfg, lr=None):
        seen.append(lr)
        real_step(params, grads, state, cfg, lr)

    monkeypatch.setattr(training, "adam_step", spy)
    cfg = TrainConfig(learning_rate=0.01, lr_gamma=0.5, batch_size=4, max_epochs=3, patience=None)
    train_model(small_log, small_log, fit_encoders(small_log), cfg, TINY_MODEL)
    # 3 traces × 4 strategies in batches of 4
    assert seen == pytest.approx([0.01] * 3 + [0.005] * 3 + [0.0025] * 3)


@pytest.mark.parametrize("bad", [
    {"lr_range": [0, 0.1]},
    {"lr_range": [0.1, 0.01]},
    {"lr_range": [0.01]},
    {"wd_range": [-0.1, 0.1]},
    {"batch_sizes": []},
    {"batch_sizes": [0, 16]},
    {"aggregators": ["median"]},
    {"aggregators": "mean"},
])
def test_search_space_rejects_invalid_ranges(bad):
    with pytest.raises(InvalidFlag):
        SearchSpace.from_dict(bad)


def test_search_space_accepts_zero_weight_decay():
    space = SearchSpace.from_dict({"wd_range": [0, 0.1], "batch_sizes": [16]})
    assert space.wd_range == (0.0, 0.1)
    assert space.batch_sizes == (16,)
