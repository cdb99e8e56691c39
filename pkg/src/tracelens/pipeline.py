"""Staged, config-driven runs with an artifact manifest.

Each stage reads its inputs from the output directory, checks them against
the manifest, writes its artifacts and records their hashes.  Running the
stages in order is what ``reproduce`` does.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from . import plotting
from .analysis import (
    average_influence_table,
    epoch_dynamics,
    group_exclusion_run,
    group_share_table,
    grouped_removal_validation,
    imbalance_sweep,
    reinforcing_share,
    score_distributions,
    select_test_samples,
    zero_shot_compare,
    ValidationCurve,
)
from .config import ConfigError, RunConfig, save_config
from .dataset import Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset, split_by_pair
from .influence import InfluenceMatrix, influence_matrix, load_matrix, save_matrix, topk_all
from .model import CheckpointSeries, Hyperparams, load_series, save_series, train
from .oracle import HessianSolver, loo_matrix
from .stats import rank_agreement

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
STAGES = ("gen-data", "train", "influence", "topk", "validate", "analyze")


class PipelineError(RuntimeError):
    pass


class MissingArtifactError(PipelineError):
    pass


class FingerprintError(PipelineError):
    def __init__(self, what: str, expected: str, actual: str):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"fingerprint mismatch for {what}: expected {expected[:16]}, found {actual[:16]}")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    """Record of every artifact in a run directory: hash, producing stage
    and the artifacts it was computed from."""

    def __init__(self, root: Path, config_hash: str, artifacts: dict | None = None):
        self.root = root
        self.config_hash = config_hash
        self.artifacts: dict[str, dict] = dict(artifacts or {})

    @classmethod
    def open(cls, root: Path, config_hash: str, fresh: bool = False) -> "Manifest":
        path = root / MANIFEST
        if fresh or not path.exists():
            return cls(root, config_hash)
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("config_hash") != config_hash:
            raise FingerprintError("config (manifest.json)", data.get("config_hash", ""), config_hash)
        return cls(root, config_hash, data.get("artifacts"))

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    def record(self, stage: str, paths: Iterable[Path], inputs: Iterable[Path] = ()) -> None:
        inputs = sorted({self.rel(p) for p in inputs})
        for p in paths:
            self.artifacts[self.rel(p)] = {"sha256": sha256_file(p), "stage": stage, "inputs": inputs}

    def verify(self, paths: Iterable[Path]) -> None:
        for p in paths:
            key = self.rel(p)
            if not p.exists():
                raise MissingArtifactError(f"missing artifact {key}; run the stage that produces it first")
            entry = self.artifacts.get(key)
            if entry is None:
                raise MissingArtifactError(f"artifact {key} is not recorded in {MANIFEST}")
            actual = sha256_file(p)
            if actual != entry["sha256"]:
                raise FingerprintError(key, entry["sha256"], actual)

    def save(self) -> Path:
        path = self.root / MANIFEST
        doc = {
            "tool": "tracelens",
            "version": __version__,
            "config_hash": self.config_hash,
            "artifacts": {k: self.artifacts[k] for k in sorted(self.artifacts)},
        }
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def write_json(path: Path, obj, config_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config_hash": config_hash, **obj}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence], config_hash: str) -> Path:
    """CSV with a leading ``# config_hash=...`` comment line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@dataclass
class Layout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    data = property(lambda self: self.root / "data")
    train = property(lambda self: self.root / "data" / "train.jsonl")
    dev = property(lambda self: self.root / "data" / "dev.jsonl")
    pool = property(lambda self: self.root / "data" / "test_pool.jsonl")
    config = property(lambda self: self.root / "config.json")
    checkpoints = property(lambda self: self.root / "checkpoints")
    series_index = property(lambda self: self.root / "checkpoints" / "series.json")
    tests = property(lambda self: self.root / "influence" / "tests.jsonl")
    matrix = property(lambda self: self.root / "influence" / "matrix.tlim")
    validate = property(lambda self: self.root / "validate")
    analysis = property(lambda self: self.root / "analysis")
    figures = property(lambda self: self.root / "figures")

    def topk(self, sign: str) -> Path:
        return self.root / "influence" / f"topk_{sign}.json"

    def checkpoint_files(self) -> list[Path]:
        index = json.loads(self.series_index.read_text())
        files = [self.checkpoints / f for f in index["files"]]
        return [self.series_index] + files + [f.with_suffix(".tlck.json") for f in files]


class Run:
    """One run directory under one configuration."""

    def __init__(self, config: RunConfig, out: str | Path, threads: int = 1):
        if threads < 1:
            raise ValueError("threads must be >= 1")
        self.config = config
        self.threads = threads
        self.paths = Layout(Path(out))
        self.hash = config.hash()

    def _manifest(self, fresh: bool = False) -> Manifest:
        self.paths.root.mkdir(parents=True, exist_ok=True)
        return Manifest.open(self.paths.root, self.hash, fresh)

    @property
    def hyper(self) -> Hyperparams:
        return self.config.hyperparams()

    def _load_data(self, m: Manifest) -> tuple[Dataset, Dataset, Dataset]:
        p = self.paths
        m.verify([p.train, p.dev, p.pool])
        return load_dataset(p.train, dims=None), load_dataset(p.dev, dims=None), load_dataset(p.pool, dims=None)

    def _load_series(self, m: Manifest, train_set: Dataset) -> CheckpointSeries:
        p = self.paths
        if not p.series_index.exists():
            raise MissingArtifactError("missing checkpoints/series.json; run train first")
        m.verify(p.checkpoint_files())
        series = load_series(p.checkpoints)
        if series.dataset_fingerprint != train_set.fingerprint():
            raise FingerprintError("checkpoints vs data/train.jsonl", series.dataset_fingerprint, train_set.fingerprint())
        return series

    def _load_matrix(self, m: Manifest, series: CheckpointSeries) -> tuple[InfluenceMatrix, Dataset]:
        p = self.paths
        m.verify([p.matrix, p.tests])
        matrix, _ = load_matrix(p.matrix)
        if matrix.checkpoint_fingerprint != series.fingerprint():
            raise FingerprintError("influence/matrix.tlim vs checkpoints", matrix.checkpoint_fingerprint, series.fingerprint())
        tests = load_dataset(p.tests, dims=None)
        if matrix.test_ids != tests.ids:
            raise FingerprintError("influence/tests.jsonl vs matrix", ",".join(matrix.test_ids)[:64], ",".join(tests.ids)[:64])
        return matrix, tests

    # stages

    def gen_data(self) -> list[Path]:
        cfg, p = self.config, self.paths
        m = self._manifest(fresh=True)
        if cfg.data.path:
            full = load_dataset(cfg.data.path, dims=cfg.data.dims, seed=cfg.seed)
        else:
            full = generate_synthetic(cfg.synth())
        train_set, dev_set, pool = split_by_pair(full, cfg.data.split, seed=cfg.seed)
        p.data.mkdir(parents=True, exist_ok=True)
        for ds, path in ((train_set, p.train), (dev_set, p.dev), (pool, p.pool)):
            save_dataset(ds, path)
        save_config(cfg, p.config)
        m.record("gen-data", [p.config])
        out = [p.train, p.dev, p.pool]
        m.record("gen-data", out, [p.config])
        m.save()
        log.info("wrote %d/%d/%d samples", len(train_set), len(dev_set), len(pool))
        return out

    def train(self) -> list[Path]:
        p = self.paths
        m = self._manifest()
        train_set, dev_set, _ = self._load_data(m)
        series = train(train_set, dev_set, self.hyper)
        if p.checkpoints.exists():
            for old in p.checkpoints.glob("epoch_*.tlck*"):
                old.unlink()
        written = save_series(series, p.checkpoints)
        report = write_json(
            p.checkpoints / "train_report.json",
            {
                "converged_epoch": series.converged_epoch,
                "dev_accuracy": [c.dev_metric for c in series.checkpoints],
                "train_loss": [c.train_loss for c in series.checkpoints],
                "series_fingerprint": series.fingerprint(),
            },
            self.hash,
        )
        m.record("train", written + [report], [p.train, p.dev])
        m.save()
        return written + [report]

    def influence(self) -> list[Path]:
        cfg, p = self.config, self.paths
        m = self._manifest()
        train_set, _, pool = self._load_data(m)
        series = self._load_series(m, train_set)
        tests = select_test_samples(series.params, pool, cfg.per_group, seed=cfg.seed)
        p.tests.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(tests, p.tests)
        matrix = influence_matrix(series, train_set, tests, cfg.variant, opts=cfg.influence_options(), threads=self.threads)
        save_matrix(matrix, p.matrix, extra={"config_hash": self.hash})
        out = [p.tests, p.matrix]
        m.record("influence", out, [p.train, p.pool, p.series_index])
        m.save()
        return out

    def topk(self) -> list[Path]:
        cfg, p = self.config, self.paths
        m = self._manifest()
        train_set, _, _ = self._load_data(m)
        series = self._load_series(m, train_set)
        matrix, tests = self._load_matrix(m, series)
        out = []
        for sign in ("positive", "negative"):
            sets = topk_all(matrix, cfg.k, sign)
            path = write_json(p.topk(sign), {"sign": sign, "k": cfg.k, "sets": [t.to_dict() for t in sets]}, self.hash)
            out.append(path)
        m.record("topk", out, [p.matrix])
        m.save()
        return out

    def validate(self) -> list[Path]:
        cfg, p = self.config, self.paths
        m = self._manifest()
        out: list[Path] = []
        if cfg.oracle.enabled:
            report, rows = oracle_report(cfg)
            out.append(write_json(p.validate / "oracle.json", report, self.hash))
            out.append(write_csv(p.validate / "oracle.csv", ["train_id", "test_id", "method", "value"], rows, self.hash))
            m.record("validate", out[-2:], [p.config])
        if cfg.analysis.removal:
            train_set, dev_set, _ = self._load_data(m)
            series = self._load_series(m, train_set)
            matrix, tests = self._load_matrix(m, series)
            sets = topk_all(matrix, max(cfg.analysis.k_grid), "positive")
            curve = grouped_removal_validation(
                train_set, dev_set, self.hyper, tests, sets, cfg.analysis.k_grid, seed=cfg.seed, base=series
            )
            rj = write_json(p.validate / "removal.json", curve.to_dict(), self.hash)
            rc = write_csv(
                p.validate / "removal.csv",
                ["k", "removed", "mean_change_pct", "control_mean_change_pct"],
                zip(curve.k_grid, curve.removed, curve.mean_change, curve.control_mean_change),
                self.hash,
            )
            out += [rj, rc]
            m.record("validate", [rj, rc], [p.train, p.dev, p.series_index, p.matrix, p.tests])
        m.save()
        return out

    def analyze(self) -> list[Path]:
        cfg, p = self.config, self.paths
        a = cfg.analysis
        m = self._manifest()
        train_set, dev_set, pool = self._load_data(m)
        series = self._load_series(m, train_set)
        matrix, tests = self._load_matrix(m, series)
        group_of = tests.group_of
        for key in ("zero_shot_groups", "imbalance_groups"):
            unknown = sorted(set(getattr(a, key) or ()) - set(train_set.groups))
            if unknown:
                raise ConfigError(f"analysis.{key} names unknown groups {unknown}")
        desc = f"config_hash={self.hash}"
        base_inputs = [p.train, p.tests, p.matrix]
        out: list[Path] = []

        def emit(paths, inputs=base_inputs):
            m.record("analyze", paths, inputs)
            out.extend(paths)

        pos = topk_all(matrix, cfg.k, "positive")
        neg = topk_all(matrix, cfg.k, "negative")
        shares = {s: group_share_table(sets, train_set, group_of) for s, sets in (("positive", pos), ("negative", neg))}
        rows = [
            (sign, tg, g, rep.counts[g], rep.shares[g])
            for sign, table in shares.items()
            for tg, rep in table.items()
            for g in rep.shares
        ]
        emit([
            write_json(p.analysis / "group_shares.json", {s: {g: r.to_dict() for g, r in t.items()} for s, t in shares.items()}, self.hash),
            write_csv(p.analysis / "group_shares.csv", ["sign", "test_group", "train_group", "count", "share_pct"], rows, self.hash),
            plotting.group_shares(shares["positive"], shares["negative"], p.figures / "fig2_group_shares.svg", desc),
        ])

        table = average_influence_table(matrix, train_set, tests)
        emit([
            write_csv(
                p.analysis / "average_influence.csv",
                ["test_group", *table.cols],
                [(r, *map(float, table.values[i])) for i, r in enumerate(table.rows)],
                self.hash,
            ),
            plotting.influence_heatmap(table, p.figures / "average_influence.svg", desc),
            write_csv(
                p.analysis / "score_distributions.csv",
                ["test_group", "train_group", "polarity", "count", "mean", "median", "q05", "q95"],
                [(s.test_group, s.train_group, s.polarity, s.count, s.mean, s.median, s.q05, s.q95)
                 for s in score_distributions(matrix, train_set, tests)],
                self.hash,
            ),
        ])

        if a.reinforcing and train_set.parallel:
            reports = []
            for sign, sets in (("positive", pos), ("negative", neg)):
                for g in tests.groups:
                    reports.append(reinforcing_share([t for t in sets if group_of[t.test_id] == g], train_set, g))
            emit([
                write_json(p.analysis / "reinforcing.json", {"reports": [r.to_dict() for r in reports]}, self.hash),
                write_csv(
                    p.analysis / "reinforcing.csv",
                    ["sign", "test_group", "n_other", "reinforcing_pct", "complementary_pct"],
                    [(r.sign, r.test_group, r.n_other, r.reinforcing, r.complementary) for r in reports],
                    self.hash,
                ),
            ])

        if a.dynamics and matrix.per_epoch is not None:
            dyn = epoch_dynamics(matrix, train_set, group_of, cfg.k, "positive", a.dynamics_mode)
            emit([
                write_json(p.analysis / "epoch_dynamics.json", dyn.to_dict(), self.hash),
                plotting.epoch_dynamics(dyn, p.figures / "fig3_epoch_dynamics.svg", desc),
            ])

        if a.zero_shot and len(train_set.groups) > 1:
            groups = a.zero_shot_groups or tests.groups
            reports = []
            for g in groups:
                g_tests = tests.by_group(g)
                for sign in a.zero_shot_signs:
                    full = [t for t in (pos if sign == "positive" else neg) if group_of[t.test_id] == g]
                    zs_train, _, zs_sets = group_exclusion_run(
                        train_set, dev_set, self.hyper, g_tests, g, cfg.k, cfg.variant, sign, self.threads,
                        cfg.influence_options(),
                    )
                    reports.append(zero_shot_compare(full, zs_sets, train_set, zs_train, g, group_of))
            paths = [write_json(p.analysis / "zero_shot.json", {"reports": [r.to_dict() for r in reports]}, self.hash)]
            positive_reports = [r for r in reports if r.sign == "positive"]
            if positive_reports:
                paths.append(plotting.zero_shot(positive_reports, p.figures / "fig4_zero_shot.svg", desc))
            emit(paths, base_inputs + [p.dev])

        if a.imbalance:
            groups = a.imbalance_groups or train_set.groups
            sweeps = [
                imbalance_sweep(
                    train_set, dev_set, pool, self.hyper, g, a.pct_grid, cfg.k, cfg.per_group,
                    seed=cfg.seed, variant=cfg.variant, threads=self.threads, opts=cfg.influence_options(),
                )
                for g in groups
            ]
            emit(
                [
                    write_json(p.analysis / "imbalance.json", {"sweeps": [s.to_dict() for s in sweeps]}, self.hash),
                    plotting.imbalance(sweeps, p.figures / "fig5_imbalance.svg", desc),
                ],
                [p.train, p.dev, p.pool],
            )

        removal = p.validate / "removal.json"
        if removal.exists():
            m.verify([removal])
            emit([plotting.removal_curve(load_curve(removal), p.figures / "fig1_removal.svg", desc)], [removal])
        m.save()
        return out

    def reproduce(self) -> list[Path]:
        out = []
        for stage in (self.gen_data, self.train, self.influence, self.topk, self.validate, self.analyze):
            log.info("stage %s", stage.__name__)
            out += stage()
        return out


def load_curve(path: str | Path) -> ValidationCurve:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return ValidationCurve(
        tuple(d["k_grid"]), d["sign"], d["mean_change_pct"], d["per_test_change_pct"], d["removed"],
        d["control_mean_change_pct"], d["control_per_test_change_pct"], tuple(d["test_ids"]), d.get("removed_by_group"),
    )


# oracle fixture


def oracle_fixture(config: RunConfig) -> tuple[Dataset, Dataset, Dataset, Hyperparams]:
    """Small two-group linear problem where exhaustive LOO is affordable."""
    o = config.oracle
    seed = config.seed
    synth = SynthConfig(
        n_groups=2,
        per_group=o.items_per_group + o.dev_items + o.n_tests,
        latent_dim=o.latent_dim,
        noise_scale=o.noise_scale,
        seed=seed,
    )
    tr, dev, te = split_by_pair(generate_synthetic(synth), [o.items_per_group, o.dev_items, o.n_tests], seed=seed)
    tests = Dataset(te.samples[: o.n_tests])
    hyper = Hyperparams(
        mode="linear",
        learning_rate=o.learning_rate,
        epochs_max=o.epochs,
        batch_size=o.batch_size,
        weight_decay=config.hyperparams().weight_decay,
        seed=seed,
        select="last",
    )
    return tr, dev, tests, hyper


def oracle_report(config: RunConfig) -> tuple[dict, list[tuple]]:
    """TracIn cosine totals against exhaustive LOO and the damped-Hessian
    influence on the oracle fixture.

    Sign agreement compares LOO deltas with the negated Hessian score, the
    first-order prediction of the loss change when a sample is removed.
    """
    o = config.oracle
    tr, dev, tests, hyper = oracle_fixture(config)
    series = train(tr, dev, hyper)
    tracin = influence_matrix(series, tr, tests, "cosine", keep_per_epoch=False).totals
    ids, loo = loo_matrix(tr, dev, hyper, tests)
    hess = HessianSolver(series.params, tr, o.damping).scores(tests, tr)
    per_test = []
    rows = []
    for i, tid in enumerate(tests.ids):
        ra = rank_agreement(tracin[i], loo[i])
        per_test.append({"test_id": tid, "spearman": ra.spearman, "kendall": ra.kendall})
    mask = np.abs(loo) > o.delta_floor
    agree = np.sign(-hess[mask]) == np.sign(loo[mask])
    for i, tid in enumerate(tests.ids):
        for j, rid in enumerate(ids):
            rows.append((rid, tid, "tracin_cos", float(tracin[i, j])))
            rows.append((rid, tid, "loo_delta", float(loo[i, j])))
            rows.append((rid, tid, "hessian", float(hess[i, j])))
    report = {
        "n_train": len(tr),
        "n_tests": len(tests),
        "trainings": len(tr) + 1,
        "damping": o.damping,
        "delta_floor": o.delta_floor,
        "per_test": per_test,
        "min_spearman": min(r["spearman"] for r in per_test),
        "sign_pairs": int(mask.sum()),
        "sign_agreement": float(agree.mean()) if mask.any() else None,
    }
    return report, rows
