"""Cross-group sharing analyses over influence rankings.

Everything here works on group labels: which groups the most influential
training samples come from, whether other-group samples are translations of
own-group ones, how that changes over epochs, without the test group, or
when one group is oversampled.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import Dataset, exclude_group, rebalance
from .influence import InfluenceMatrix, InfluenceOptions, TopKSet, influence_matrix, per_epoch_matrix, topk_all
from .model import CheckpointSeries, Hyperparams, ModelParams, confidences, predict_proba, train
from .stats import wilcoxon_signed_rank

log = logging.getLogger(__name__)

DEFAULT_K_GRID = (50, 100, 150, 200, 250)
DEFAULT_PCT_GRID = (25, 50, 75, 100)


class AnalysisError(RuntimeError):
    pass


class TestShortageError(AnalysisError):
    def __init__(self, available: Mapping[str, int], requested: int):
        self.available = dict(available)
        self.requested = requested
        short = {g: n for g, n in available.items() if n < requested}
        super().__init__(f"need {requested} correctly predicted samples per group; short groups: {short}")


class DegenerateRemovalError(AnalysisError):
    pass


class UnsupportedAnalysisError(AnalysisError):
    pass


def select_test_samples(
    params: ModelParams,
    dataset: Dataset,
    per_group: int = 25,
    seed: int = 0,
    groups: Sequence[str] | None = None,
) -> Dataset:
    """Draw ``per_group`` correctly predicted samples from each group."""
    groups = tuple(groups) if groups is not None else dataset.groups
    p = predict_proba(params, dataset.X)
    correct = (p >= 0.5) == (dataset.y == 1)
    rng = np.random.default_rng(seed)
    available = {}
    pools = {}
    for g in groups:
        pool = [i for i, s in enumerate(dataset.samples) if s.group == g and correct[i]]
        available[g] = len(pool)
        pools[g] = pool
    if any(n < per_group for n in available.values()):
        raise TestShortageError(available, per_group)
    picked = []
    for g in groups:
        idx = rng.choice(len(pools[g]), size=per_group, replace=False)
        picked.extend(dataset.samples[pools[g][i]] for i in idx)
    return Dataset(tuple(picked))


@dataclass(frozen=True)
class GroupShareReport:
    test_group: str
    sign: str
    k: int
    shares: dict[str, float]
    counts: dict[str, int]
    n_tests: int

    def to_dict(self) -> dict:
        return {
            "test_group": self.test_group,
            "sign": self.sign,
            "k": self.k,
            "n_tests": self.n_tests,
            "shares": self.shares,
            "counts": self.counts,
        }


def _check_uniform(topk_sets: Sequence[TopKSet]) -> tuple[str, int]:
    if not topk_sets:
        raise AnalysisError("no top-k sets given")
    signs = {t.sign for t in topk_sets}
    ks = {t.k for t in topk_sets}
    if len(signs) != 1 or len(ks) != 1:
        raise AnalysisError("top-k sets must share sign and k")
    return signs.pop(), ks.pop()


def group_contribution(
    topk_sets: Sequence[TopKSet],
    train_set: Dataset,
    test_group: str = "",
    groups: Sequence[str] | None = None,
) -> GroupShareReport:
    """Percentage of the pooled top-k entries contributed by each training group."""
    sign, k = _check_uniform(topk_sets)
    groups = tuple(groups) if groups is not None else train_set.groups
    counts = Counter()
    group_of = train_set.group_of
    for t in topk_sets:
        for tid in t.ids:
            if tid not in group_of:
                raise AnalysisError(f"train id {tid!r} not in dataset")
            counts[group_of[tid]] += 1
    total = sum(counts.values())
    ordered = {g: counts.get(g, 0) for g in groups}
    shares = {g: (100.0 * c / total if total else 0.0) for g, c in ordered.items()}
    return GroupShareReport(test_group, sign, k, shares, ordered, len(topk_sets))


def group_share_table(
    topk_sets: Sequence[TopKSet],
    train_set: Dataset,
    test_group_of: Mapping[str, str],
    groups: Sequence[str] | None = None,
) -> dict[str, GroupShareReport]:
    """One :class:`GroupShareReport` per test group."""
    by_group: dict[str, list[TopKSet]] = {}
    for t in topk_sets:
        by_group.setdefault(test_group_of[t.test_id], []).append(t)
    return {g: group_contribution(sets, train_set, g, groups) for g, sets in by_group.items()}


@dataclass(frozen=True)
class GroupTable:
    rows: tuple[str, ...]
    cols: tuple[str, ...]
    values: np.ndarray

    def to_dict(self) -> dict:
        return {
            "rows": list(self.rows),
            "cols": list(self.cols),
            "values": [[float(v) for v in row] for row in self.values],
        }


def average_influence_table(matrix: InfluenceMatrix, train_set: Dataset, test_set: Dataset) -> GroupTable:
    """Mean total score per (test group, train group); rows are test groups."""
    tr_groups = np.array([train_set.group_of[t] for t in matrix.train_ids])
    te_groups = np.array([test_set.group_of[t] for t in matrix.test_ids])
    rows = tuple(g for g in test_set.groups if g in set(te_groups))
    cols = tuple(g for g in train_set.groups if g in set(tr_groups))
    values = np.empty((len(rows), len(cols)))
    for i, rg in enumerate(rows):
        block = matrix.totals[te_groups == rg]
        for j, cg in enumerate(cols):
            values[i, j] = block[:, tr_groups == cg].mean()
    return GroupTable(rows, cols, values)


@dataclass(frozen=True)
class ScoreSummary:
    test_group: str
    train_group: str
    polarity: str
    count: int
    mean: float
    median: float
    q05: float
    q95: float


def score_distributions(matrix: InfluenceMatrix, train_set: Dataset, test_set: Dataset) -> list[ScoreSummary]:
    """Summaries of positive and negative score distributions per group pair."""
    tr_groups = np.array([train_set.group_of[t] for t in matrix.train_ids])
    te_groups = np.array([test_set.group_of[t] for t in matrix.test_ids])
    out = []
    for rg in test_set.groups:
        block = matrix.totals[te_groups == rg]
        if block.size == 0:
            continue
        for cg in train_set.groups:
            vals = block[:, tr_groups == cg].ravel()
            for polarity, sel in (("positive", vals[vals > 0]), ("negative", vals[vals < 0])):
                if sel.size:
                    q05, med, q95 = np.quantile(sel, [0.05, 0.5, 0.95])
                    out.append(ScoreSummary(rg, cg, polarity, int(sel.size), float(sel.mean()), float(med), float(q05), float(q95)))
                else:
                    nan = float("nan")
                    out.append(ScoreSummary(rg, cg, polarity, 0, nan, nan, nan, nan))
    return out


@dataclass(frozen=True)
class ReinforcingReport:
    test_group: str
    sign: str
    k: int
    n_other: int
    n_reinforcing: int

    @property
    def reinforcing(self) -> float | None:
        return 100.0 * self.n_reinforcing / self.n_other if self.n_other else None

    @property
    def complementary(self) -> float | None:
        return 100.0 - self.reinforcing if self.n_other else None

    def to_dict(self) -> dict:
        return {
            "test_group": self.test_group,
            "sign": self.sign,
            "k": self.k,
            "n_other": self.n_other,
            "n_reinforcing": self.n_reinforcing,
            "reinforcing_pct": self.reinforcing,
            "complementary_pct": self.complementary,
        }


def reinforcing_counts(topk_set: TopKSet, train_set: Dataset, test_group: str) -> tuple[int, int]:
    """(reinforcing, other-group) entry counts for one test sample's ranking.

    An other-group entry is reinforcing when its pair id also occurs among
    the entries from ``test_group`` in the same ranking.
    """
    if not train_set.parallel:
        raise UnsupportedAnalysisError("reinforcing share needs a parallel dataset")
    group_of, pair_of = train_set.group_of, train_set.pair_of
    own_pairs = {pair_of[t] for t in topk_set.ids if group_of[t] == test_group and pair_of[t] is not None}
    others = [t for t in topk_set.ids if group_of[t] != test_group]
    hits = sum(1 for t in others if pair_of[t] is not None and pair_of[t] in own_pairs)
    return hits, len(others)


def reinforcing_share(topk_sets: Sequence[TopKSet], train_set: Dataset, test_group: str) -> ReinforcingReport:
    """Pooled reinforcing / complementary split for one test group."""
    sign, k = _check_uniform(topk_sets)
    hits = total = 0
    for t in topk_sets:
        h, n = reinforcing_counts(t, train_set, test_group)
        hits += h
        total += n
    return ReinforcingReport(test_group, sign, k, total, hits)


@dataclass
class ValidationCurve:
    k_grid: tuple[int, ...]
    sign: str
    mean_change: list[float]
    per_test: list[list[float]]
    removed: list[int]
    control_mean_change: list[float]
    control_per_test: list[list[float]]
    test_ids: tuple[str, ...] = ()
    removed_by_group: dict[str, list[int]] | None = None

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.k_grid, self.k_grid[1:])):
            raise ValueError("k_grid must be strictly increasing")

    def to_dict(self) -> dict:
        return {
            "k_grid": list(self.k_grid),
            "sign": self.sign,
            "mean_change_pct": self.mean_change,
            "removed": self.removed,
            "control_mean_change_pct": self.control_mean_change,
            "test_ids": list(self.test_ids),
            "per_test_change_pct": self.per_test,
            "control_per_test_change_pct": self.control_per_test,
            "removed_by_group": self.removed_by_group,
        }


def _check_removal(train_set: Dataset, removed: set[str]) -> None:
    left = Counter(s.label for s in train_set if s.id not in removed)
    for label in (0, 1):
        if left.get(label, 0) == 0:
            raise DegenerateRemovalError(
                f"removing {len(removed)} samples leaves no training samples of class {label}"
            )


def confidence_change(
    train_set: Dataset,
    dev_set: Dataset,
    hyper: Hyperparams,
    test_set: Dataset,
    removed: Iterable[str],
    base_conf: np.ndarray,
) -> np.ndarray:
    """Percent change in correct-class confidence after retraining without ``removed``."""
    removed = set(removed)
    _check_removal(train_set, removed)
    series = train(train_set, dev_set, hyper, exclude=removed)
    conf = confidences(series.params, test_set.X, test_set.y)
    return 100.0 * (conf - base_conf) / base_conf


def removal_validation(
    train_set: Dataset,
    dev_set: Dataset,
    hyper: Hyperparams,
    test_set: Dataset,
    topk_sets: Sequence[TopKSet],
    k_grid: Sequence[int] = DEFAULT_K_GRID,
    seed: int = 0,
    base: CheckpointSeries | None = None,
) -> ValidationCurve:
    """Retrain without the union of each test sample's top-k and measure
    the change in correct-class confidence, next to a random-removal control
    of equal size."""
    sign, kmax = _check_uniform(topk_sets)
    if max(k_grid) > kmax:
        raise AnalysisError(f"top-k sets hold {kmax} entries, grid needs {max(k_grid)}")
    base = base or train(train_set, dev_set, hyper)
    base_conf = confidences(base.params, test_set.X, test_set.y)
    all_ids = np.array(train_set.ids)
    mean_change, per_test, removed_counts, ctrl_mean, ctrl_per = [], [], [], [], []
    for k in k_grid:
        union = set()
        for t in topk_sets:
            union.update(t.ids[:k])
        change = confidence_change(train_set, dev_set, hyper, test_set, union, base_conf)
        rng = np.random.default_rng([seed, k])
        control_ids = set(all_ids[rng.choice(len(all_ids), size=len(union), replace=False)].tolist())
        ctrl = confidence_change(train_set, dev_set, hyper, test_set, control_ids, base_conf)
        removed_counts.append(len(union))
        mean_change.append(float(change.mean()))
        per_test.append(change.tolist())
        ctrl_mean.append(float(ctrl.mean()))
        ctrl_per.append(ctrl.tolist())
        log.info("k=%d: removed %d, change %.3f%%, control %.3f%%", k, len(union), change.mean(), ctrl.mean())
    return ValidationCurve(tuple(k_grid), sign, mean_change, per_test, removed_counts, ctrl_mean, ctrl_per, test_set.ids)


def grouped_removal_validation(
    train_set: Dataset,
    dev_set: Dataset,
    hyper: Hyperparams,
    test_set: Dataset,
    topk_sets: Sequence[TopKSet],
    k_grid: Sequence[int] = DEFAULT_K_GRID,
    seed: int = 0,
    base: CheckpointSeries | None = None,
) -> ValidationCurve:
    """Run :func:`removal_validation` once per test group, removing the union
    of that group's top-k lists, and pool the per-test changes.

    ``removed`` holds the mean union size across groups; the exact sizes
    are kept in ``removed_by_group``.
    """
    by_id = {t.test_id: t for t in topk_sets}
    missing = [tid for tid in test_set.ids if tid not in by_id]
    if missing:
        raise AnalysisError(f"no top-k set for test samples {missing[:5]}")
    base = base or train(train_set, dev_set, hyper)
    curves = {}
    for g in test_set.groups:
        sub = test_set.by_group(g)
        curves[g] = removal_validation(
            train_set, dev_set, hyper, sub, [by_id[i] for i in sub.ids], k_grid, seed, base
        )
    first = next(iter(curves.values()))
    per_test = [sum((c.per_test[i] for c in curves.values()), []) for i in range(len(k_grid))]
    ctrl_per = [sum((c.control_per_test[i] for c in curves.values()), []) for i in range(len(k_grid))]
    return ValidationCurve(
        tuple(k_grid),
        first.sign,
        [float(np.mean(v)) for v in per_test],
        per_test,
        [int(round(np.mean([c.removed[i] for c in curves.values()]))) for i in range(len(k_grid))],
        [float(np.mean(v)) for v in ctrl_per],
        ctrl_per,
        tuple(i for c in curves.values() for i in c.test_ids),
        {g: list(c.removed) for g, c in curves.items()},
    )


@dataclass
class EpochDynamicsReport:
    epochs: tuple[int, ...]
    sign: str
    k: int
    own_share: dict[int, dict[str, float]]
    share_matrix: dict[int, dict[str, dict[str, float]]]
    wilcoxon: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)
    mode: str = "slice"

    def to_dict(self) -> dict:
        return {
            "epochs": list(self.epochs),
            "sign": self.sign,
            "k": self.k,
            "mode": self.mode,
            "own_share": {str(e): v for e, v in self.own_share.items()},
            "share_matrix": {str(e): v for e, v in self.share_matrix.items()},
            "wilcoxon": [
                {"epoch_a": a, "epoch_b": b, "statistic": s, "p_value": p}
                for (a, b), (s, p) in self.wilcoxon.items()
            ],
        }


def epoch_dynamics(
    matrix: InfluenceMatrix,
    train_set: Dataset,
    test_group_of: Mapping[str, str],
    k: int = 100,
    sign: str = "positive",
    mode: str = "slice",
) -> EpochDynamicsReport:
    """Group shares of per-epoch top-k rankings and Wilcoxon tests between
    consecutive epochs' score lists."""
    slices = per_epoch_matrix(matrix, mode)
    own: dict[int, dict[str, float]] = {}
    share_matrix: dict[int, dict[str, dict[str, float]]] = {}
    for sl in slices:
        epoch = sl.epochs[0]
        table = group_share_table(topk_all(sl, k, sign), train_set, test_group_of)
        share_matrix[epoch] = {g: rep.shares for g, rep in table.items()}
        own[epoch] = {g: rep.shares.get(g, 0.0) for g, rep in table.items()}
    tests = {}
    for a, b in zip(slices, slices[1:]):
        res = wilcoxon_signed_rank(a.totals.ravel(), b.totals.ravel())
        tests[(a.epochs[0], b.epochs[0])] = (res.statistic, res.p_value)
    return EpochDynamicsReport(matrix.epochs, sign, k, own, share_matrix, tests, mode)


@dataclass
class ZeroShotReport:
    group: str
    sign: str
    k: int
    translation_recovery: float | None
    verbatim_recovery: float | None
    n_group_entries: int
    n_other_entries: int
    zero_shot_shares: GroupShareReport

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "sign": self.sign,
            "k": self.k,
            "translation_recovery_pct": self.translation_recovery,
            "verbatim_recovery_pct": self.verbatim_recovery,
            "n_group_entries": self.n_group_entries,
            "n_other_entries": self.n_other_entries,
            "zero_shot_shares": self.zero_shot_shares.to_dict(),
        }


def zero_shot_compare(
    topk_full: Sequence[TopKSet],
    topk_zs: Sequence[TopKSet],
    full_train: Dataset,
    zs_train: Dataset,
    group: str,
    test_group_of: Mapping[str, str],
) -> ZeroShotReport:
    """Compare rankings from a model trained with ``group`` against one
    trained without it, on the same test samples from ``group``.

    ``translation_recovery``: percent of the full model's ``group`` entries
    whose pair id appears among the zero-shot entries.
    ``verbatim_recovery``: percent of the full model's other-group entries
    retrieved again, by id, by the zero-shot model.
    """
    sign, k = _check_uniform(topk_full)
    zs_by_test = {t.test_id: t for t in topk_zs}
    if set(zs_by_test) != {t.test_id for t in topk_full}:
        raise AnalysisError("full and zero-shot rankings cover different test samples")
    group_of, pair_of = full_train.group_of, full_train.pair_of
    zs_pair_of = zs_train.pair_of
    g_hits = g_total = o_hits = o_total = 0
    for full in topk_full:
        if test_group_of.get(full.test_id) != group:
            raise AnalysisError(f"test sample {full.test_id!r} is not from group {group!r}")
        zs = zs_by_test[full.test_id]
        zs_ids = set(zs.ids)
        zs_pairs = {zs_pair_of.get(t, full_train.pair_of.get(t)) for t in zs.ids} - {None}
        for tid in full.ids:
            if group_of[tid] == group:
                g_total += 1
                g_hits += pair_of[tid] is not None and pair_of[tid] in zs_pairs
            else:
                o_total += 1
                o_hits += tid in zs_ids
    shares = group_contribution(topk_zs, zs_train, group, full_train.groups)
    return ZeroShotReport(
        group,
        sign,
        k,
        100.0 * g_hits / g_total if g_total else None,
        100.0 * o_hits / o_total if o_total else None,
        g_total,
        o_total,
        shares,
    )


def _collapsed_share(topk_sets: Sequence[TopKSet], train_set: Dataset, group: str) -> float:
    # duplicates from oversampling count once per (group, pair) within a ranking
    own = total = 0
    for t in topk_sets:
        seen = set()
        for tid in t.ids:
            s = train_set[tid]
            key = (s.group, s.pair_id if s.pair_id is not None else tid.split("~dup")[0])
            if key in seen:
                continue
            seen.add(key)
            total += 1
            own += s.group == group
    return 100.0 * own / total if total else 0.0


@dataclass
class SweepPoint:
    pct: int
    n_train: int
    n_group: int
    own_positive: float
    own_negative: float
    own_positive_collapsed: float
    own_negative_collapsed: float
    dev_accuracy: float


@dataclass
class ImbalanceSweep:
    group: str
    k: int
    points: list[SweepPoint]

    def to_dict(self) -> dict:
        return {"group": self.group, "k": self.k, "points": [vars(p) for p in self.points]}


def group_exclusion_run(
    train_set: Dataset,
    dev_set: Dataset,
    hyper: Hyperparams,
    test_set: Dataset,
    group: str,
    k: int = 100,
    variant: str = "cosine",
    sign: str = "positive",
    threads: int = 1,
    opts: InfluenceOptions | None = None,
) -> tuple[Dataset, CheckpointSeries, list[TopKSet]]:
    """Retrain without ``group`` and rank training samples for ``test_set``."""
    zs_train = exclude_group(train_set, group)
    zs_dev = exclude_group(dev_set, group) if len(dev_set.groups) > 1 else dev_set
    series = train(zs_train, zs_dev, hyper)
    matrix = influence_matrix(series, zs_train, test_set, variant, opts=opts, keep_per_epoch=False, threads=threads)
    return zs_train, series, topk_all(matrix, k, sign)


def imbalance_sweep(
    train_set: Dataset,
    dev_set: Dataset,
    test_pool: Dataset,
    hyper: Hyperparams,
    group: str,
    pct_grid: Sequence[int] = DEFAULT_PCT_GRID,
    k: int = 100,
    per_group: int = 25,
    seed: int = 0,
    variant: str = "cosine",
    threads: int = 1,
    opts: InfluenceOptions | None = None,
) -> ImbalanceSweep:
    """Oversample ``group`` by each percentage, retrain, and report how much
    of that group's top-k rankings come from the group itself.

    The balanced baseline is included as ``pct = 0``.
    """
    if group not in train_set.groups:
        raise KeyError(f"unknown group {group!r}")
    points = []
    pool = test_pool.by_group(group)
    for pct in (0, *pct_grid):
        data = train_set if pct == 0 else rebalance(train_set, group, pct, seed=seed)
        series = train(data, dev_set, hyper)
        tests = select_test_samples(series.params, pool, per_group, seed=seed, groups=(group,))
        matrix = influence_matrix(series, data, tests, variant, opts=opts, keep_per_epoch=False, threads=threads)
        pos = topk_all(matrix, k, "positive")
        neg = topk_all(matrix, k, "negative")
        points.append(
            SweepPoint(
                pct,
                len(data),
                data.group_counts()[group],
                group_contribution(pos, data, group).shares[group],
                group_contribution(neg, data, group).shares[group],
                _collapsed_share(pos, data, group),
                _collapsed_share(neg, data, group),
                series.final.dev_metric,
            )
        )
        log.info("imbalance %s +%d%%: own positive share %.1f%%", group, pct, points[-1].own_positive)
    return ImbalanceSweep(group, k, points)
