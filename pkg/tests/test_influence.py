import numpy as np
import pytest

from conftest import make_dataset
from tracelens.dataset import Dataset, Sample
from tracelens.influence import (
    InfluenceError,
    InfluenceMatrix,
    InfluenceOptions,
    export_csv,
    influence_matrix,
    load_matrix,
    per_epoch_matrix,
    save_matrix,
    topk,
    topk_all,
    tracin_cos,
    tracin_dot,
)
from tracelens.model import Checkpoint, CheckpointSeries, Hyperparams, ModelParams, ShapeError, grad, train


def linear_series(*thetas, converged=None):
    ckpts = tuple(Checkpoint(e + 1, ModelParams("linear", w, b), 1.0) for e, (w, b) in enumerate(thetas))
    return CheckpointSeries(ckpts, converged or len(ckpts), Hyperparams(mode="linear"), "")


@pytest.fixture(scope="module")
def trained():
    ds = make_dataset(n=15, dim=5, seed=3)
    series = train(ds, ds, Hyperparams(epochs_max=4, hidden_dim=3, batch_size=8, select="last"))
    return ds, series


def test_self_dot_is_squared_norm(trained):
    ds, series = trained
    s = ds.samples[0]
    rec = tracin_dot(series, s, s)
    for c, term in zip(series.checkpoints, rec.per_epoch):
        assert np.isclose(term, grad(c.params, s).norm ** 2, rtol=1e-12)
    assert rec.total >= 0


def test_orthogonal_gradients_zero():
    # zero weights: gradient = (p - y) * [x, 1] with p = 0.5
    series = linear_series(([0.0, 0.0, 0.0], 0.0))
    a = Sample("a", "g", [1.0, 0.0, -1.0], 1)
    b = Sample("b", "g", [0.0, 1.0, 1.0], 1)
    assert tracin_dot(series, a, b).total == 0.0


def test_self_cosine_equals_epochs(trained):
    ds, series = trained
    for s in ds.samples[:10]:
        assert tracin_cos(series, s, s).total == float(len(series))


def test_scale_changes_dot_ranking_not_cosine_direction():
    # w is orthogonal to both training inputs, so p = sigmoid(b) for each and
    # the residual sign is unchanged by scaling x
    w, b = [0.2, -0.1], 0.3
    series = linear_series((w, b))
    test = Sample("t", "g", [0.3, -0.7], 0)
    a = Sample("a", "g", [1.0, 2.0], 1)
    c = Sample("c", "g", [3.0, 6.0], 1)
    a_big = Sample("a", "g", [10.0, 20.0], 1)
    small = influence_matrix(series, Dataset((a, c)), Dataset((test,)), "dot").totals[0]
    big = influence_matrix(series, Dataset((a_big, c)), Dataset((test,)), "dot").totals[0]
    assert np.sign(small[0] - small[1]) != np.sign(big[0] - big[1])

    def direction(x, y):
        p = 1 / (1 + np.exp(-(np.dot(w, x) + b)))
        g = (p - y) * np.array([*x, 1.0])
        return g / np.linalg.norm(g)

    for s in (a, a_big):
        expect = float(direction(s.features, s.label) @ direction(test.features, test.label))
        assert abs(tracin_cos(series, s, test).total - expect) <= 1e-9


def test_cosine_scaled_gradient_identical():
    # grad of a duplicate with identical direction: same features, same label
    series = linear_series(([0.0, 0.0], 0.0))
    t = Sample("t", "g", [1.0, 1.0], 1)
    a = Sample("a", "g", [1.0, 2.0], 0)
    b = Sample("b", "g", [1.0, 2.0], 0)
    assert tracin_cos(series, a, t).total == tracin_cos(series, b, t).total


def test_anti_parallel_minus_one():
    series = linear_series(([0.0, 0.0], 0.0))
    a = Sample("a", "g", [1.0, 2.0], 1)
    b = Sample("b", "g", [1.0, 2.0], 0)
    assert tracin_cos(series, a, b).total == pytest.approx(-1.0, abs=1e-15)


def test_degenerate_gradient_guard():
    series = linear_series(([100.0, 100.0], 0.0))
    sure = Sample("s", "g", [1.0, 1.0], 1)
    other = Sample("o", "g", [1.0, -2.0], 0)
    assert tracin_cos(series, sure, other).total == 0.0


def test_dimension_mismatch(trained):
    ds, series = trained
    with pytest.raises(ShapeError):
        tracin_dot(series, ds.samples[0], Sample("x", "g", [1.0], 0))


def test_symmetry(trained):
    ds, series = trained
    a, b = ds.samples[1], ds.samples[7]
    assert tracin_dot(series, a, b).total == tracin_dot(series, b, a).total
    assert tracin_cos(series, a, b).total == tracin_cos(series, b, a).total


@pytest.mark.parametrize("variant", ["dot", "cosine"])
def test_matrix_matches_pairwise_exactly(trained, variant):
    ds, series = trained
    tests = ds.subset(ds.ids[:4])
    m = influence_matrix(series, ds, tests, variant)
    f = tracin_dot if variant == "dot" else tracin_cos
    for i, t in enumerate(tests):
        for j, r in enumerate(ds):
            assert m.totals[i, j] == f(series, r, t).total


def test_matrix_threads_and_repeats_identical(trained):
    ds, series = trained
    tests = ds.subset(ds.ids[:5])
    a = influence_matrix(series, ds, tests, "cosine", threads=1)
    b = influence_matrix(series, ds, tests, "cosine", threads=4)
    assert np.array_equal(a.totals, b.totals) and np.array_equal(a.per_epoch, b.per_epoch)


def test_additivity_and_bounds(trained):
    ds, series = trained
    m = influence_matrix(series, ds, ds, "cosine")
    assert np.allclose(m.per_epoch.sum(0), m.totals, rtol=1e-9, atol=0)
    assert np.all(np.abs(m.per_epoch) <= 1) and np.all(np.abs(m.totals) <= len(series))
    slices = per_epoch_matrix(m)
    assert np.allclose(sum(s.totals for s in slices), m.totals, rtol=1e-9, atol=1e-15)
    prefix = per_epoch_matrix(m, "prefix")
    assert np.allclose(prefix[-1].totals, m.totals, rtol=1e-9, atol=1e-15)


def test_converged_only_vs_all_epochs(trained):
    ds, _ = trained
    series = train(ds, ds, Hyperparams(epochs_max=6, patience=1, hidden_dim=3))
    tests = ds.subset(ds.ids[:2])
    m_conv = influence_matrix(series, ds, tests, "cosine")
    m_all = influence_matrix(series, ds, tests, "cosine", opts=InfluenceOptions("cosine", converged_only=False))
    assert m_conv.epochs == tuple(range(1, series.converged_epoch + 1))
    assert m_all.epochs == tuple(range(1, len(series) + 1))


def test_lr_weighted_and_output_only(trained):
    ds, series = trained
    tests = ds.subset(ds.ids[:2])
    plain = influence_matrix(series, ds, tests, "dot", keep_per_epoch=False)
    weighted = influence_matrix(series, ds, tests, "dot", opts=InfluenceOptions("dot", lr_weighted=True), keep_per_epoch=False)
    assert np.allclose(weighted.totals, plain.totals * series.train_config.learning_rate, rtol=1e-12)
    out_only = influence_matrix(series, ds, tests, "dot", opts=InfluenceOptions("dot", output_only=True))
    assert not np.array_equal(out_only.totals, plain.totals)


def test_single_epoch_slice_equals_total():
    ds = make_dataset(n=5, dim=3)
    series = train(ds, ds, Hyperparams(epochs_max=1, hidden_dim=2))
    m = influence_matrix(series, ds, ds, "cosine")
    assert np.array_equal(per_epoch_matrix(m)[0].totals, m.totals)


def test_rotating_gradients_change_slice_ranking():
    # epoch 1 favours train sample "a", epoch 2 favours "b" strongly
    series = linear_series(([0.0, 0.0], 0.0), ([0.0, 0.0], 0.0))
    test = Sample("t", "g", [1.0, 0.0], 1)
    train_set = Dataset((Sample("a", "g", [1.0, 0.1], 1), Sample("b", "g", [0.9, -0.2], 1)))
    m = influence_matrix(series, train_set, Dataset((test,)), "dot")
    pe = np.array(m.per_epoch)
    pe[0] = [[2.0, 1.0]]
    pe[1] = [[0.0, 5.0]]
    rot = InfluenceMatrix(m.test_ids, m.train_ids, pe.sum(0), "dot", "", (1, 2), pe)
    assert topk(per_epoch_matrix(rot)[0], "t", 1).ids == ["a"]
    assert topk(rot, "t", 1).ids == ["b"]


def test_no_per_epoch_raises(trained):
    ds, series = trained
    m = influence_matrix(series, ds, ds.subset(ds.ids[:1]), keep_per_epoch=False)
    with pytest.raises(InfluenceError):
        per_epoch_matrix(m)


def _flat_matrix(scores, ids):
    return InfluenceMatrix(("t",), tuple(ids), np.array([scores], dtype=float), "dot", "", (1,))


def test_topk_tie_break_and_clamp():
    m = _flat_matrix([0.5] * 5, ["e", "b", "d", "a", "c"])
    assert topk(m, "t", 3).ids == ["a", "b", "c"]
    assert topk(m, "t", 3, "negative").ids == ["a", "b", "c"]
    full = topk(m, "t", 100)
    assert len(full.entries) == 5


def test_topk_ordering():
    m = _flat_matrix([0.1, -0.4, 0.9, 0.0], ["w", "x", "y", "z"])
    pos = topk(m, "t", 4)
    neg = topk(m, "t", 4, "negative")
    assert pos.ids == ["y", "w", "z", "x"]
    assert neg.ids == ["x", "z", "w", "y"]
    assert topk(m, "t", 2).to_dict() == topk(m, "t", 2).to_dict()


def test_topk_unknown_test_and_bad_sign():
    m = _flat_matrix([0.1], ["a"])
    with pytest.raises(KeyError):
        topk(m, "nope")
    with pytest.raises(ValueError):
        topk(m, "t", 1, "sideways")


def test_topk_all_matches_topk(trained):
    ds, series = trained
    m = influence_matrix(series, ds, ds.subset(ds.ids[:3]))
    assert [t.to_dict() for t in topk_all(m, 7)] == [topk(m, tid, 7).to_dict() for tid in m.test_ids]


def test_matrix_file_roundtrip(tmp_path, trained):
    ds, series = trained
    m = influence_matrix(series, ds, ds.subset(ds.ids[:3]))
    save_matrix(m, tmp_path / "m.tlim", extra={"note": "x"})
    back, extra = load_matrix(tmp_path / "m.tlim")
    assert extra == {"note": "x"}
    assert back.test_ids == m.test_ids and back.train_ids == m.train_ids and back.epochs == m.epochs
    assert np.array_equal(back.totals, m.totals.astype(np.float32).astype(float))
    assert back.per_epoch.shape == m.per_epoch.shape
    export_csv(back, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "test_id,train_id,total" and len(lines) == 1 + 3 * len(ds)


def test_matrix_file_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(InfluenceError):
        load_matrix(tmp_path / "x")
