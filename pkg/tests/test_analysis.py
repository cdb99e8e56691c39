import numpy as np
import pytest

from conftest import make_dataset
from tracelens.analysis import (
    AnalysisError,
    DegenerateRemovalError,
    TestShortageError as ShortageError,
    UnsupportedAnalysisError,
    average_influence_table,
    confidence_change,
    epoch_dynamics,
    group_contribution,
    group_share_table,
    grouped_removal_validation,
    imbalance_sweep,
    reinforcing_share,
    removal_validation,
    score_distributions,
    select_test_samples,
    zero_shot_compare,
    ValidationCurve,
)
from tracelens.dataset import SynthConfig, generate_synthetic, split_by_pair
from tracelens.influence import InfluenceMatrix, TopKSet, influence_matrix, topk_all
from tracelens.model import Hyperparams, ModelParams, confidences, train


def tk(test_id, ids, sign="positive", k=None):
    return TopKSet(test_id, sign, k or len(ids), tuple((i, 1.0) for i in ids))


@pytest.fixture(scope="module")
def small_run():
    ds = generate_synthetic(SynthConfig(n_groups=3, per_group=160, latent_dim=8, seed=1))
    tr, dev, pool = split_by_pair(ds, [100, 30, 30], seed=1)
    hyper = Hyperparams(hidden_dim=4, epochs_max=4, learning_rate=0.01, seed=1)
    series = train(tr, dev, hyper)
    tests = select_test_samples(series.params, pool, 4, seed=1)
    m = influence_matrix(series, tr, tests, "cosine")
    return tr, dev, pool, hyper, series, tests, m


def test_select_test_samples_counts_and_correctness(small_run):
    tr, dev, pool, hyper, series, tests, _ = small_run
    assert len(tests) == 12 and set(tests.group_counts().values()) == {4}
    assert np.all(confidences(series.params, tests.X, tests.y) > 0.5)


def test_select_shortage():
    ds = make_dataset(n=5, dim=3)
    wrong = ModelParams("linear", np.zeros(3), -50.0)  # predicts 0 everywhere
    with pytest.raises(ShortageError) as info:
        select_test_samples(wrong, ds, per_group=5)
    assert info.value.available and info.value.requested == 5


def test_group_contribution_single_group_and_split():
    ds = make_dataset(n=10, groups=("a", "b"))
    rep = group_contribution([tk("t", ["a-000", "a-001"])], ds, "a")
    assert rep.shares == {"a": 100.0, "b": 0.0}
    ids = [f"a-{i:03d}" for i in range(6)] + [f"b-{i:03d}" for i in range(4)]
    rep = group_contribution([tk("t", ids)], ds, "a")
    assert rep.shares == {"a": 60.0, "b": 40.0}
    assert sum(rep.counts.values()) == 10


def test_group_contribution_errors():
    ds = make_dataset(n=3)
    with pytest.raises(AnalysisError):
        group_contribution([tk("t", ["nope"])], ds)
    with pytest.raises(AnalysisError):
        group_contribution([tk("t", ["a-000"]), tk("u", ["a-000"], "negative")], ds)


def test_shares_permutation_invariant(small_run):
    tr, _, _, _, _, tests, m = small_run
    sets = topk_all(m, 10)
    a = group_share_table(sets, tr, tests.group_of)
    b = group_share_table(list(reversed(sets)), tr, tests.group_of)
    for g in a:
        assert a[g].shares == b[g].shares
        assert abs(sum(a[g].shares.values()) - 100) < 0.01
        assert sum(a[g].counts.values()) == 10 * 4


def test_average_table(small_run):
    tr, _, _, _, _, tests, m = small_run
    table = average_influence_table(m, tr, tests)
    assert table.values.shape == (3, 3)
    assert table.values.mean() == pytest.approx(m.totals.mean(), rel=1e-12)
    one = tr.by_group(tr.groups[0])
    m1 = InfluenceMatrix(m.test_ids, one.ids, m.totals[:, [tr.position(i) for i in one.ids]], "cosine", "", m.epochs)
    t1 = average_influence_table(m1, one, tests)
    assert t1.values[:, 0].mean() == pytest.approx(m1.totals.mean())


def test_score_distributions(small_run):
    tr, _, _, _, _, tests, m = small_run
    rows = score_distributions(m, tr, tests)
    assert len(rows) == 3 * 3 * 2
    pos = [r for r in rows if r.polarity == "positive" and r.count]
    assert all(r.q05 <= r.median <= r.q95 and r.mean > 0 for r in pos)


def test_reinforcing_pure_cases():
    ds = make_dataset(n=5, groups=("a", "b"))
    all_reinf = reinforcing_share([tk("t", ["a-000", "a-001", "b-000", "b-001"])], ds, "a")
    assert all_reinf.reinforcing == 100.0 and all_reinf.complementary == 0.0
    none = reinforcing_share([tk("t", ["a-000", "b-003", "b-004"])], ds, "a")
    assert none.reinforcing == 0.0 and none.complementary == 100.0


def test_reinforcing_needs_parallel():
    ds = make_dataset(n=3, parallel=False)
    with pytest.raises(UnsupportedAnalysisError):
        reinforcing_share([tk("t", ["a-000"])], ds, "a")


def test_reinforcing_sums_to_100(small_run):
    tr, _, _, _, _, tests, m = small_run
    for g in tests.groups:
        sets = [t for t in topk_all(m, 20) if tests.group_of[t.test_id] == g]
        rep = reinforcing_share(sets, tr, g)
        assert rep.reinforcing + rep.complementary == pytest.approx(100.0)


def test_zero_shot_identity_and_disjoint():
    ds = make_dataset(n=6, groups=("a", "b", "c"))
    group_of = {"t": "a"}
    full = [tk("t", ["a-000", "b-001", "c-002"])]
    same = zero_shot_compare(full, full, ds, ds, "a", group_of)
    assert same.translation_recovery == 100.0 and same.verbatim_recovery == 100.0
    zs = ds.subset(i for i in ds.ids if not i.startswith("a"))
    disjoint = zero_shot_compare(full, [tk("t", ["b-004", "c-005"])], ds, zs, "a", group_of)
    assert disjoint.translation_recovery == 0.0 and disjoint.verbatim_recovery == 0.0
    trans = zero_shot_compare(full, [tk("t", ["b-000", "c-005"])], ds, zs, "a", group_of)
    assert trans.translation_recovery == 100.0 and trans.verbatim_recovery == 0.0
    assert sum(trans.zero_shot_shares.shares.values()) == pytest.approx(100.0)


def test_zero_shot_wrong_group():
    ds = make_dataset(n=3)
    with pytest.raises(AnalysisError):
        zero_shot_compare([tk("t", ["a-000"])], [tk("t", ["a-000"])], ds, ds, "a", {"t": "b"})


def test_confidence_change_empty_removal_is_zero(small_run):
    tr, dev, _, hyper, series, tests, _ = small_run
    base = confidences(series.params, tests.X, tests.y)
    change = confidence_change(tr, dev, hyper, tests, [], base)
    assert np.array_equal(change, np.zeros(len(tests)))


def test_degenerate_removal():
    ds = make_dataset(n=4, dim=3)
    ones = [s.id for s in ds if s.label == 1]
    with pytest.raises(DegenerateRemovalError):
        confidence_change(ds, ds, Hyperparams(epochs_max=1, hidden_dim=2), ds, ones, np.ones(len(ds)))


def test_removal_validation_shape(small_run):
    tr, dev, _, hyper, series, tests, m = small_run
    sets = topk_all(m, 6)
    curve = removal_validation(tr, dev, hyper, tests, sets, k_grid=(2, 6), base=series)
    assert curve.k_grid == (2, 6) and len(curve.mean_change) == 2
    assert curve.removed[0] <= curve.removed[1] <= 6 * len(tests)
    assert len(curve.per_test[0]) == len(tests)
    grouped = grouped_removal_validation(tr, dev, hyper, tests, sets, k_grid=(2, 6), base=series)
    assert set(grouped.removed_by_group) == set(tests.groups)
    assert sorted(grouped.test_ids) == sorted(tests.ids)
    with pytest.raises(AnalysisError):
        removal_validation(tr, dev, hyper, tests, sets, k_grid=(2, 8), base=series)


def test_validation_curve_grid_must_increase():
    with pytest.raises(ValueError):
        ValidationCurve((100, 50), "positive", [], [], [], [], [])


def test_epoch_dynamics_identical_slices():
    ds = make_dataset(n=4, groups=("a", "b"))
    rng = np.random.default_rng(0)
    one = rng.normal(size=(2, len(ds)))
    pe = np.stack([one, one, one])
    m = InfluenceMatrix(("a-000", "b-000"), ds.ids, pe.sum(0), "cosine", "", (1, 2, 3), pe)
    rep = epoch_dynamics(m, ds, {"a-000": "a", "b-000": "b"}, k=3)
    assert rep.own_share[1] == rep.own_share[2] == rep.own_share[3]
    assert all(p == 1.0 for _, p in rep.wilcoxon.values())
    single = InfluenceMatrix(m.test_ids, ds.ids, one, "cosine", "", (1,), one[None])
    assert epoch_dynamics(single, ds, {"a-000": "a", "b-000": "b"}, k=3).wilcoxon == {}


def test_epoch_dynamics_report_bounds(small_run):
    tr, _, _, _, _, tests, m = small_run
    rep = epoch_dynamics(m, tr, tests.group_of, k=10)
    for shares in rep.own_share.values():
        assert all(0 <= v <= 100 for v in shares.values())
    for _, p in rep.wilcoxon.values():
        assert 0 <= p <= 1


def test_imbalance_sweep_baseline(small_run):
    tr, dev, pool, hyper, *_ = small_run
    g = tr.groups[0]
    sweep = imbalance_sweep(tr, dev, pool, hyper, g, (100,), k=10, per_group=4, seed=1)
    assert [p.pct for p in sweep.points] == [0, 100]
    assert sweep.points[1].n_group == 2 * sweep.points[0].n_group
    series = train(tr, dev, hyper)
    tests = select_test_samples(series.params, pool, 4, seed=1, groups=(g,))
    m = influence_matrix(series, tr, tests, "cosine", keep_per_epoch=False)
    base = group_contribution(topk_all(m, 10), tr, g).shares[g]
    assert sweep.points[0].own_positive == base
    with pytest.raises(KeyError):
        imbalance_sweep(tr, dev, pool, hyper, "zz", (50,))
