"""Acceptance gate: one test per criterion, each printing a pass/fail line.

The standard seeded run (5 groups x 2000 training items, 125 test samples)
is produced once per session through the ``reproduce`` command, twice with
different thread counts, and shared by the criteria that need it.
"""
import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from tracelens.cli import main
from tracelens.config import RunConfig
from tracelens.dataset import Dataset, Sample
from tracelens.model import (
    Checkpoint,
    CheckpointSeries,
    Hyperparams,
    ModelParams,
    init_params,
    loss,
    per_sample_grads,
)
from tracelens.influence import tracin_cos, tracin_dot
from tracelens.pipeline import oracle_report
from tracelens.stats import wilcoxon_signed_rank

SNAPSHOT = Path(__file__).parent / "snapshots" / "standard_reports.json"


class Gate:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.start = time.perf_counter()
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} [{status}] {self.title} ({elapsed:.1f}s)"
        if self.detail:
            line += f" :: {self.detail}"
        if exc_type is not None and exc is not None:
            line += f" :: {str(exc).splitlines()[0] if str(exc) else exc_type.__name__}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


@pytest.fixture(scope="session")
def standard_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("standard")
    timings = {}
    for name, threads in (("t1", 1), ("t4", 4)):
        t0 = time.perf_counter()
        code = main(["reproduce", "--out", str(root / name), "--threads", str(threads)])
        timings[name] = time.perf_counter() - t0
        assert code == 0
    return root / "t1", root / "t4", timings


def _load(run, rel):
    return json.loads((run / rel).read_text())


def test_criterion_1_gradient_exactness():
    with Gate(1, "analytic gradients vs central differences") as gate:
        rng = np.random.default_rng(20240101)
        worst = {}
        t0 = time.perf_counter()
        for mode in ("mlp", "linear"):
            errs = []
            for _ in range(100):
                d = int(rng.integers(2, 9))
                h = int(rng.integers(1, 7))
                params = init_params(mode, d, h, rng)
                theta = params.flat() + rng.normal(scale=0.3, size=params.n_params)
                params = ModelParams.from_flat(mode, theta, d, h if mode == "mlp" else 0)
                s = Sample("s", "g", rng.normal(size=d), int(rng.integers(0, 2)))
                g = per_sample_grads(params, s.features[None], np.array([s.label]))[0]
                fd = np.empty_like(theta)
                for i in range(theta.size):
                    e = np.zeros_like(theta)
                    e[i] = 1e-5
                    up = ModelParams.from_flat(mode, theta + e, d, params.hidden_dim)
                    dn = ModelParams.from_flat(mode, theta - e, d, params.hidden_dim)
                    fd[i] = (loss(up, s) - loss(dn, s)) / 2e-5
                errs.append(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12))
            worst[mode] = max(errs)
        elapsed = time.perf_counter() - t0
        gate.detail = f"max rel err mlp={worst['mlp']:.2e} linear={worst['linear']:.2e}"
        assert worst["mlp"] < 1e-4 and worst["linear"] < 1e-4
        assert elapsed < 10.0


def _sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def test_criterion_2_tracin_hand_fixture():
    with Gate(2, "TracIn totals on a 2-checkpoint linear fixture") as gate:
        thetas = [([0.5, -0.25], 0.1), ([0.75, -0.5], -0.2)]
        ckpts = tuple(Checkpoint(e + 1, ModelParams("linear", w, b), 1.0) for e, (w, b) in enumerate(thetas))
        series = CheckpointSeries(ckpts, 2, Hyperparams(mode="linear"), "")
        z_tr = Sample("tr", "g", [1.0, 2.0], 1)
        z_te = Sample("te", "g", [0.5, -1.0], 0)

        def manual_grad(w, b, x, y):
            p = _sig(w[0] * x[0] + w[1] * x[1] + b)
            return [(p - y) * x[0], (p - y) * x[1], p - y]

        dot_total = cos_total = 0.0
        for w, b in thetas:
            a = manual_grad(w, b, [1.0, 2.0], 1)
            c = manual_grad(w, b, [0.5, -1.0], 0)
            dot = sum(u * v for u, v in zip(a, c))
            dot_total += dot
            cos_total += dot / (math.sqrt(sum(u * u for u in a)) * math.sqrt(sum(v * v for v in c)))
        got_dot = tracin_dot(series, z_tr, z_te).total
        got_cos = tracin_cos(series, z_tr, z_te).total
        self_cos = tracin_cos(series, z_tr, z_tr).total
        gate.detail = f"dot err={abs(got_dot - dot_total):.1e} cos err={abs(got_cos - cos_total):.1e} self={self_cos!r}"
        assert abs(got_dot - dot_total) <= 1e-9
        assert abs(got_cos - cos_total) <= 1e-9
        assert self_cos == 2.0


def test_criterion_3_oracle_agreement():
    with Gate(3, "TracIn vs exhaustive LOO and Hessian influence") as gate:
        t0 = time.perf_counter()
        report, _ = oracle_report(RunConfig())
        elapsed = time.perf_counter() - t0
        rhos = [r["spearman"] for r in report["per_test"]]
        gate.detail = (
            f"{report['trainings']} trainings, rho={['%.2f' % r for r in rhos]}, "
            f"sign agreement {report['sign_agreement']:.3f} on {report['sign_pairs']} pairs"
        )
        assert report["n_train"] == 64 and report["trainings"] == 65 and len(rhos) == 5
        assert all(r > 0.3 for r in rhos)
        assert report["sign_agreement"] >= 0.80
        assert elapsed < 300


def test_criterion_4_removal_validation(standard_runs):
    run, _, timings = standard_runs
    with Gate(4, "removal validation curve vs random control") as gate:
        curve = _load(run, "validate/removal.json")
        k = curve["k_grid"]
        d = dict(zip(k, curve["mean_change_pct"]))
        c = dict(zip(k, curve["control_mean_change_pct"]))
        gate.detail = (
            f"k=100 {d[100]:.2f}% vs control {c[100]:.2f}%; "
            f"|d250-d200|={abs(d[250] - d[200]):.2f} < |d100-d50|={abs(d[100] - d[50]):.2f}; "
            f"run {timings['t1']:.0f}s"
        )
        assert d[100] < c[100]
        assert abs(d[250] - d[200]) < abs(d[100] - d[50])
        assert timings["t1"] < 15 * 60


def test_criterion_5_cross_group_influence(standard_runs):
    run, _, _ = standard_runs
    with Gate(5, "cross-group shares of pooled positive top-100") as gate:
        shares = _load(run, "analysis/group_shares.json")["positive"]
        largest = 0
        own = {}
        for g, rep in shares.items():
            s = rep["shares"]
            assert rep["k"] == 100 and rep["n_tests"] == 25
            assert sum(v for h, v in s.items() if h != g) > 0.0
            own[g] = s[g]
            largest += s[g] == max(s.values()) and sum(v == s[g] for v in s.values()) == 1
        gate.detail = f"own shares {own}; own largest for {largest}/5"
        assert len(shares) == 5
        assert largest >= 4


def test_criterion_6_wilcoxon_exactness():
    with Gate(6, "exact Wilcoxon p-values vs sign enumeration") as gate:
        rng = np.random.default_rng(6)
        checked = 0
        for n in range(1, 11):
            for trial in range(12):
                if trial % 3 == 0:
                    d = rng.integers(-4, 5, size=n).astype(float)
                else:
                    d = rng.normal(size=n)
                nz = d[d != 0]
                res = wilcoxon_signed_rank(d)
                if nz.size == 0:
                    assert res.p_value == 1.0
                    continue
                from scipy.stats import rankdata

                r = rankdata(np.abs(nz))
                w_obs = min(r[nz > 0].sum(), r[nz < 0].sum())
                hits = 0
                for signs in itertools.product((0, 1), repeat=nz.size):
                    wp = sum(ri for ri, s in zip(r, signs) if s)
                    hits += min(wp, r.sum() - wp) <= w_obs + 1e-9
                assert res.p_value == min(1.0, hits / 2**nz.size)
                checked += 1
        doc = wilcoxon_signed_rank([1, 2, 3, 4, 5])
        gate.detail = f"{checked} cases enumerated; n=5 all positive: W={doc.statistic}, p={doc.p_value}"
        assert doc.statistic == 0 and doc.p_value == 0.0625


def test_criterion_7_determinism(standard_runs):
    a, b, _ = standard_runs
    with Gate(7, "byte-identical artifacts across runs and --threads") as gate:
        ma = _load(a, "manifest.json")
        mb = _load(b, "manifest.json")
        gate.detail = f"{len(ma['artifacts'])} artifacts compared"
        assert ma == mb
        for rel in ma["artifacts"]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_criterion_8_reinforcing_and_zero_shot(standard_runs):
    run, _, _ = standard_runs
    with Gate(8, "reinforcing / zero-shot invariants and snapshots") as gate:
        snap = json.loads(SNAPSHOT.read_text())
        reinf = _load(run, "analysis/reinforcing.json")["reports"]
        zs = _load(run, "analysis/zero_shot.json")["reports"]
        drift = 0.0
        for r in reinf:
            assert r["n_other"] > 0
            assert abs(r["reinforcing_pct"] + r["complementary_pct"] - 100.0) < 1e-9
            ref = snap["reinforcing_pct"][f"{r['sign']}/{r['test_group']}"]
            drift = max(drift, abs(r["reinforcing_pct"] - ref))
        for r in zs:
            for key in ("translation_recovery_pct", "verbatim_recovery_pct"):
                assert 0.0 <= r[key] <= 100.0
                drift = max(drift, abs(r[key] - snap["zero_shot"][r["group"]][key]))
            shares = r["zero_shot_shares"]["shares"]
            assert abs(sum(shares.values()) - 100.0) < 0.01
            assert shares[r["group"]] == 0.0
            for g, v in shares.items():
                drift = max(drift, abs(v - snap["zero_shot"][r["group"]]["shares"][g]))
        for sign in ("positive", "negative"):
            for rep in _load(run, "analysis/group_shares.json")[sign].values():
                assert abs(sum(rep["shares"].values()) - 100.0) < 0.01
        from tracelens.analysis import zero_shot_compare
        from tracelens.dataset import load_dataset
        from tracelens.influence import TopKSet

        train_set = load_dataset(run / "data/train.jsonl", dims=None)
        tests = load_dataset(run / "influence/tests.jsonl", dims=None)
        sets = [
            TopKSet(s["test_id"], s["sign"], s["k"], tuple((e["train_id"], e["score"]) for e in s["entries"]))
            for s in _load(run, "influence/topk_positive.json")["sets"]
        ]
        g = tests.groups[0]
        own = [t for t in sets if tests.group_of[t.test_id] == g]
        self_cmp = zero_shot_compare(own, own, train_set, train_set, g, tests.group_of)
        gate.detail = f"max snapshot drift {drift:.3f} pp; self-comparison {self_cmp.translation_recovery}/{self_cmp.verbatim_recovery}"
        assert self_cmp.translation_recovery == 100.0 and self_cmp.verbatim_recovery == 100.0
        assert drift <= 1.0


def test_criterion_9_imbalance(standard_runs):
    run, _, _ = standard_runs
    with Gate(9, "own-group share under oversampling") as gate:
        sweeps = _load(run, "analysis/imbalance.json")["sweeps"]
        rows = {}
        for sw in sweeps:
            pts = {p["pct"]: p for p in sw["points"]}
            rows[sw["group"]] = (pts[0]["own_positive"], pts[100]["own_positive"])
        gate.detail = ", ".join(f"{g}: {a:.1f}->{b:.1f}" for g, (a, b) in rows.items())
        assert rows
        assert all(b >= a for a, b in rows.values())
