import math
from dataclasses import replace
from datetime import timedelta
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import T0, numeric_grad
from repair_core.encoding import fit_encoders
from repair_core.errors import ArtifactFormatError, SchemaMismatch, ShapeMismatch
from repair_core.graph import Relation, batch_graphs, build_graph, receptive_field
from repair_core.masking import MaskStrategy, apply_mask
from repair_core.model import (
    ModelConfig,
    Predictions,
    compute_loss,
    decode_predictions,
    forward,
    init_params,
    load_params,
    predict_repair,
    sage_layer,
    save_params,
)
from repair_core.tensor import Parameter, Segments, Tape, Tensor, backward


@pytest.fixture()
def enc(small_log):
    return fit_encoders(small_log)


def test_init_is_deterministic_and_shaped(enc):
    cfg = ModelConfig()
    a, b = init_params(enc, cfg), init_params(enc, cfg)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), init_params(enc, replace(cfg, seed=7)).flat())
    assert a["head.activity.weight"].shape == (128, 4)
    assert a["head.timestamp.weight"].shape == (128, 1)
    assert len(a.relations) == 10
    assert sum(1 for name in a.tensors if name.startswith("layer")) == 10 * 2 * 3
    assert a.categorical == ("activity", "resource")


def test_sage_layer_identity_weights():
    r = Relation("a", "next", "a")
    params = {
        "layer0.a.next.a.w1": Parameter(np.eye(2)),
        "layer0.a.next.a.w2": Parameter(np.eye(2)),
        "layer0.a.next.a.bias": Parameter(np.zeros((1, 2))),
    }
    seg = Segments.from_groups([[1, 2], [], []])
    graph = SimpleNamespace(relations=(r,), num_rows=3, neighborhoods=lambda rel: seg)
    h = {"a": Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])}
    out = sage_layer(h, graph, params, 0, "mean", last=True)
    # row 0: itself plus the mean of rows 1, 2; rows without neighbours only see themselves
    assert out["a"].data.tolist() == [[5.0, 7.0], [3.0, 4.0], [5.0, 6.0]]

    with pytest.raises(ShapeMismatch):
        sage_layer({"a": Tensor(np.ones((2, 2)))}, graph, params, 0, "mean")


def _dense_forward(graph, params, cfg):
    # independent oracle: mean aggregation via row-normalised dense adjacency
    n = graph.trace_len
    h = {a: graph.x[a] @ params[f"input.{a}.weight"].data + params[f"input.{a}.bias"].data
         for a in graph.attributes}
    for k in range(cfg.n_layers):
        out = {a: 0.0 for a in graph.attributes}
        for r in graph.relations:
            adj = np.zeros((n, n))
            for s, d in graph.edges[r].T:
                adj[d, s] += 1.0
            deg = adj.sum(axis=1, keepdims=True)
            agg = np.divide(adj, deg, out=np.zeros_like(adj), where=deg > 0) @ h[r.src]
            p = f"layer{k}.{r.key}"
            out[r.dst] = out[r.dst] + h[r.dst] @ params[f"{p}.w1"].data + agg @ params[f"{p}.w2"].data \
                + params[f"{p}.bias"].data
        h = out if k == cfg.n_layers - 1 else {a: np.maximum(v, 0.0) for a, v in out.items()}
    return {a: h[a][graph.mask[a]] @ params[f"head.{a}.weight"].data + params[f"head.{a}.bias"].data
            for a in graph.attributes}


def test_forward_matches_dense_oracle(small_log, enc):
    cfg = ModelConfig(hidden_size=8, n_layers=2)
    params = init_params(enc, cfg)
    g = build_graph(small_log.traces[2], [False, True, True, False, True], enc)
    preds = forward(g, params)
    expected = _dense_forward(g, params, cfg)
    for a in g.attributes:
        assert np.allclose(preds.outputs[a].data, expected[a], rtol=0, atol=1e-10)
    assert preds.n_rows == 9
    assert preds.event_index["activity"].tolist() == [1, 2, 4]


def test_batching_does_not_change_predictions(small_log, enc):
    params = init_params(enc, ModelConfig(hidden_size=8))
    graphs = [build_graph(t, apply_mask(len(t), MaskStrategy.odd()), enc) for t in small_log.traces]
    together = forward(batch_graphs(graphs), params)
    alone = [forward(g, params) for g in graphs]
    for a in enc.schema.names:
        stacked = np.concatenate([p.outputs[a].data for p in alone])
        assert np.allclose(together.outputs[a].data, stacked, atol=1e-12)
    assert together.graph_ids["activity"].tolist() == [0, 1, 2, 2]


def test_full_model_gradient_matches_finite_differences(small_log, enc):
    params = init_params(enc, ModelConfig(hidden_size=4, n_layers=2))
    g1 = build_graph(small_log.traces[0], [False, True, False], enc)
    g2 = build_graph(small_log.traces[1], [True, False], enc)
    batch = batch_graphs([g1, g2])

    def loss():
        return compute_loss(forward(batch, params), batch)

    params.zero_grad()
    with Tape():
        backward(loss())
    names = [
        "input.activity.weight",
        "input.timestamp.bias",
        "layer0.activity.has.resource.w2",
        "layer0.timestamp.rev_next.timestamp.w1",
        "layer1.resource.rev_has.activity.w2",
        "layer1.activity.next.activity.bias",
        "head.activity.weight",
        "head.timestamp.bias",
    ]
    for name in names:
        p = params[name]
        assert np.allclose(p.grad, numeric_grad(loss, p), rtol=1e-4, atol=1e-7), name


def _preds(outputs, categorical):
    rows = {a: np.arange(len(o)) for a, o in outputs.items()}
    return Predictions(
        outputs={a: Tensor(o) for a, o in outputs.items()},
        rows=rows,
        graph_ids={a: np.zeros(len(r), dtype=np.int64) for a, r in rows.items()},
        event_index=dict(rows),
        categorical=categorical,
    )


def test_loss_sums_cross_entropy_and_l1():
    preds = _preds({"act": np.array([[0.0, 0.0]]), "num": np.array([[1.5]])}, {"act": True, "num": False})
    batch = SimpleNamespace(target={"act": np.array([0.0]), "num": np.array([1.0])})
    assert compute_loss(preds, batch).item() == pytest.approx(math.log(2) + 0.5, abs=1e-12)

    exact = _preds({"act": np.array([[50.0, 0.0]]), "num": np.array([[1.0]])}, {"act": True, "num": False})
    assert compute_loss(exact, batch).item() < 1e-6


def test_loss_matches_direct_formula_on_random_batches():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n_cat, n_num, classes = rng.integers(1, 6), rng.integers(1, 6), rng.integers(2, 6)
        logits = rng.normal(scale=3, size=(n_cat, classes))
        values = rng.normal(size=(n_num, 1))
        y_cat = rng.integers(0, classes, n_cat).astype(float)
        y_num = rng.normal(size=n_num)
        # some rows have nothing to learn
        y_cat[rng.random(n_cat) < 0.3] = np.nan
        y_num[rng.random(n_num) < 0.3] = np.nan

        preds = _preds({"c": logits, "v": values}, {"c": True, "v": False})
        got = compute_loss(preds, SimpleNamespace(target={"c": y_cat, "v": y_num})).item()

        expected = 0.0
        known = ~np.isnan(y_cat)
        if known.any():
            z = logits[known]
            t = y_cat[known].astype(int)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            expected += -logp[np.arange(len(t)), t].mean()
        known = ~np.isnan(y_num)
        if known.any():
            expected += np.abs(values[known, 0] - y_num[known]).mean()
        assert got == pytest.approx(expected, abs=1e-10)


def test_nothing_masked_gives_no_rows_and_zero_loss(small_log, enc):
    params = init_params(enc, ModelConfig(hidden_size=8))
    g = build_graph(small_log.traces[0], [False] * 3, enc)
    preds = forward(g, params)
    assert preds.n_rows == 0
    assert compute_loss(preds, g).item() == 0.0
    assert predict_repair(g, params, enc) == []


@pytest.mark.parametrize("layers", [1, 2, 3])
def test_outputs_ignore_nodes_outside_the_receptive_field(small_log, enc, layers):
    params = init_params(enc, ModelConfig(hidden_size=8, n_layers=layers))
    g = build_graph(small_log.traces[2], [False, False, True, False, False], enc)
    field = receptive_field(g, "activity", 2, layers)
    x = {a: g.x[a].copy() for a in g.attributes}
    for a in g.attributes:
        for i in range(g.trace_len):
            if (a, i) not in field:
                x[a][i] = 0.0
    far = replace(g, x=x)
    before = forward(g, params).outputs["activity"].data
    after = forward(far, params).outputs["activity"].data
    assert np.max(np.abs(before - after)) < 1e-9


def test_decode_excludes_missing_class_and_breaks_ties_low(enc):
    preds = _preds(
        {"activity": np.array([[0.1, 2.0, 0.3, 5.0], [1.0, 1.0, 0.0, 9.0]]),
         "timestamp": np.array([[0.0], [math.log1p(60)]])},
        {"activity": True, "timestamp": False},
    )
    batch = SimpleNamespace(attributes=("activity", "timestamp"), origins=({"timestamp": T0},), case_ids=("c1",))
    repairs = decode_predictions(preds, batch, enc)
    values = {(r.attribute, r.event_index): r.value for r in repairs}
    assert values[("activity", 0)] == "B"
    assert values[("activity", 1)] == "A"
    assert values[("timestamp", 0)] == T0
    assert abs((values[("timestamp", 1)] - T0) - timedelta(seconds=60)) < timedelta(microseconds=1)


def test_predict_repair_covers_masked_cells(small_log, enc):
    params = init_params(enc, ModelConfig(hidden_size=8))
    g = build_graph(small_log.traces[2], apply_mask(5, MaskStrategy.window()), enc)
    repairs = predict_repair(g, params, enc)
    assert {(i, a) for i, a, _ in repairs} == {(i, a) for i in (1, 2, 4) for a in enc.schema.names}
    assert all(v in ("A", "B", "C") for i, a, v in repairs if a == "activity")


def test_forward_rejects_foreign_graphs(small_log, enc):
    at = small_log.project(small_log.schema.select("at"))
    at_enc = fit_encoders(at)
    params = init_params(enc, ModelConfig(hidden_size=8))
    with pytest.raises(SchemaMismatch):
        forward(build_graph(at.traces[0], [True, False, False], at_enc), params)


def test_params_file_roundtrip(small_log, enc, tmp_path):
    params = init_params(enc, ModelConfig(hidden_size=8, n_layers=3, aggregator="max", seed=9))
    path = tmp_path / "params.sgrf"
    save_params(params, path)
    again = load_params(path, enc)
    assert again.config == params.config
    assert np.array_equal(again.flat(), params.flat())
    assert list(again.tensors) == list(params.tensors)

    at_enc = fit_encoders(small_log.project(small_log.schema.select("at")))
    with pytest.raises(SchemaMismatch):
        load_params(path, at_enc)


def test_params_file_corruption_is_reported(enc, tmp_path):
    path = tmp_path / "params.sgrf"
    save_params(init_params(enc, ModelConfig(hidden_size=4)), path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.sgrf"
    for damaged in (b"XXXX" + blob[4:], blob[:-8], blob + b"\0", blob[:10]):
        bad.write_bytes(damaged)
        with pytest.raises(ArtifactFormatError):
            load_params(bad, enc)
    with pytest.raises(ArtifactFormatError):
        load_params(tmp_path / "absent.sgrf", enc)


@pytest.mark.parametrize("bias", [30.0, 1e6])
def test_huge_timestamp_predictions_are_clamped(small_log, enc, bias):
    params = init_params(enc, ModelConfig(hidden_size=8))
    params["head.timestamp.bias"].data[...] = bias
    g = build_graph(small_log.traces[0], [False, True, False], enc)
    (stamp,) = [v for _, a, v in predict_repair(g, params, enc) if a == "timestamp"]
    ceiling = math.expm1(enc.transforms["timestamp"].max + math.log(10.0))
    origin = g.origins["timestamp"]
    assert origin < stamp <= origin + timedelta(seconds=ceiling + 1)


def test_negative_timestamp_predictions_fall_back_to_the_origin(small_log, enc):
    params = init_params(enc, ModelConfig(hidden_size=8))
    params["head.timestamp.bias"].data[...] = -1e6
    g = build_graph(small_log.traces[0], [False, True, False], enc)
    (stamp,) = [v for _, a, v in predict_repair(g, params, enc) if a == "timestamp"]
    assert stamp == g.origins["timestamp"]
