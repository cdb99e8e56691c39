"""Ground-truth influence: leave-one-out retraining and exact Hessian influence.

Both are only tractable at desk scale and exist to check the TracIn scores.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from .dataset import Dataset, Sample
from .model import CheckpointSeries, Hyperparams, ModelParams, losses, per_sample_grads, predict_proba, train


class UnsupportedModeError(ValueError):
    pass


class OracleNumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LooResult:
    train_id: str
    test_id: str
    loss_with: float
    loss_without: float
    delta: float


@dataclass(frozen=True)
class HessianInfluence:
    train_id: str
    test_id: str
    score: float
    hessian_damping: float


def _test_losses(series: CheckpointSeries, tests: Dataset) -> np.ndarray:
    return losses(series.params, tests.X, tests.y)


def loo_influence(
    train_set: Dataset,
    dev_set: Dataset,
    hyper: Hyperparams,
    train_id: str,
    test_samples: Sequence[Sample] | Dataset,
    base: CheckpointSeries | None = None,
) -> list[LooResult]:
    """Loss change on each test sample when ``train_id`` is left out.

    Both runs share the seed and batch schedule; the removed sample's slot is
    skipped.  Losses are taken at each run's early-stopping checkpoint.
    ``base`` may pass an already-trained full run to save one training.
    """
    if train_id not in train_set:
        raise KeyError(f"unknown train id {train_id!r}")
    tests = test_samples if isinstance(test_samples, Dataset) else Dataset(tuple(test_samples))
    if base is None:
        base = train(train_set, dev_set, hyper)
    without = train(train_set, dev_set, hyper, exclude=(train_id,))
    l_with = _test_losses(base, tests)
    l_without = _test_losses(without, tests)
    return [
        LooResult(train_id, tid, float(a), float(b), float(b) - float(a))
        for tid, a, b in zip(tests.ids, l_with, l_without)
    ]


def loo_matrix(
    train_set: Dataset,
    dev_set: Dataset,
    hyper: Hyperparams,
    test_samples: Sequence[Sample] | Dataset,
    train_ids: Iterable[str] | None = None,
) -> tuple[tuple[str, ...], np.ndarray]:
    """Exhaustive LOO deltas, shape ``(n_tests, n_removed)``."""
    tests = test_samples if isinstance(test_samples, Dataset) else Dataset(tuple(test_samples))
    ids = tuple(train_set.ids if train_ids is None else train_ids)
    base = train(train_set, dev_set, hyper)
    out = np.empty((len(tests), len(ids)))
    for j, rid in enumerate(ids):
        res = loo_influence(train_set, dev_set, hyper, rid, tests, base=base)
        out[:, j] = [r.delta for r in res]
    return ids, out


def training_hessian(params: ModelParams, train_set: Dataset, damping: float = 1e-3) -> np.ndarray:
    """Mean logistic-loss Hessian over the training set plus ``damping * I``."""
    if params.mode != "linear":
        raise UnsupportedModeError("the exact Hessian oracle needs the convex linear model")
    if damping < 0:
        raise ValueError("damping must be >= 0")
    X = np.hstack([train_set.X, np.ones((len(train_set), 1))])
    p = predict_proba(params, train_set.X)
    w = p * (1.0 - p)
    H = (X * w[:, None]).T @ X / len(train_set)
    return H + damping * np.eye(H.shape[0])


class HessianSolver:
    """Cholesky-factored ``H + damping*I`` reused across many queries.

    Scores are computed as ``-(L^-1 g_test) . (L^-1 g_train)``, which is
    symmetric in its two arguments by construction.
    """

    def __init__(self, params: ModelParams, train_set: Dataset, damping: float = 1e-3):
        self.params = params
        self.damping = damping
        H = training_hessian(params, train_set, damping)
        if not np.all(np.isfinite(H)):
            raise OracleNumericError("Hessian has non-finite entries")
        try:
            self._chol = linalg.cholesky(H, lower=True)
        except linalg.LinAlgError as exc:
            raise OracleNumericError(f"Hessian not positive definite with damping {damping}: {exc}") from None
        if np.min(np.abs(np.diag(self._chol))) < 1e-150:
            raise OracleNumericError("Hessian is numerically singular")

    def whiten(self, G: np.ndarray) -> np.ndarray:
        return linalg.solve_triangular(self._chol, np.atleast_2d(G).T, lower=True).T

    def scores(self, tests: Dataset, trains: Dataset) -> np.ndarray:
        Ut = self.whiten(per_sample_grads(self.params, tests.X, tests.y))
        Ur = self.whiten(per_sample_grads(self.params, trains.X, trains.y))
        return -(Ut[:, None, :] * Ur[None, :, :]).sum(axis=-1)


def hessian_influence(
    params: ModelParams,
    train_set: Dataset,
    z_train: Sample,
    z_test: Sample,
    damping: float = 1e-3,
) -> HessianInfluence:
    """``-grad L(z_test)^T (H + damping I)^-1 grad L(z_train)`` at ``params``.

    This is the derivative of the test loss with respect to upweighting
    ``z_train``; removing the sample changes the test loss by roughly
    ``-score / n_train``.
    """
    solver = HessianSolver(params, train_set, damping)
    score = float(solver.scores(Dataset((z_test,)), Dataset((z_train,)))[0, 0])
    if not np.isfinite(score):
        raise OracleNumericError("non-finite influence score")
    return HessianInfluence(z_train.id, z_test.id, score, damping)


def write_oracle_csv(rows: Iterable[dict], path: str | Path) -> None:
    """Rows of ``train_id, test_id, method, value, metadata``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("train_id,test_id,method,value,metadata\n")
        for r in rows:
            meta = json.dumps(r.get("metadata", {}), sort_keys=True).replace('"', '""')
            fh.write(f'{r["train_id"]},{r["test_id"]},{r["method"]},{r["value"]!r},"{meta}"\n')
