"""TracIn influence scores summed over per-epoch checkpoints.

Two variants are provided: ``dot`` (raw gradient products) and ``cosine``
(gradient products normalized by both gradient norms).  Every cell is
computed as an explicit elementwise product followed by a sum over the
parameter axis, so a matrix cell is bit-identical to the corresponding
single-pair call regardless of block size or thread count.
"""
from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, Sample
from .model import CheckpointSeries, GradientVector, ShapeError, output_slice, per_sample_grads

log = logging.getLogger(__name__)

VARIANTS = ("dot", "cosine")
NORM_FLOOR = 1e-10

MATRIX_MAGIC = b"TLIM"
MATRIX_VERSION = 1

_TEST_BLOCK = 16
_TRAIN_BLOCK = 256


class InfluenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class InfluenceOptions:
    """How scores are assembled from the checkpoint series.

    ``converged_only`` sums epochs ``1..converged_epoch``; otherwise every
    stored checkpoint is used.  ``lr_weighted`` multiplies each epoch's term
    by the learning rate (the original step-size weighted form).
    ``output_only`` restricts gradients to the output layer.
    """

    variant: str = "cosine"
    converged_only: bool = True
    lr_weighted: bool = False
    output_only: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class InfluenceRecord:
    train_id: str
    test_id: str
    per_epoch: tuple[float, ...]
    total: float
    variant: str


@dataclass(frozen=True, eq=False)
class InfluenceMatrix:
    test_ids: tuple[str, ...]
    train_ids: tuple[str, ...]
    totals: np.ndarray
    variant: str
    checkpoint_fingerprint: str
    epochs: tuple[int, ...]
    per_epoch: np.ndarray | None = None

    def __post_init__(self):
        M, N = len(self.test_ids), len(self.train_ids)
        if self.totals.shape != (M, N):
            raise ShapeError(f"totals shape {self.totals.shape} != ({M}, {N})")
        if self.per_epoch is not None and self.per_epoch.shape != (len(self.epochs), M, N):
            raise ShapeError("per-epoch tensor does not match ids/epochs")
        if not np.all(np.isfinite(self.totals)):
            raise InfluenceError("influence matrix has non-finite entries")
        object.__setattr__(self, "_test_pos", {t: i for i, t in enumerate(self.test_ids)})

    def row(self, test_id: str) -> np.ndarray:
        try:
            return self.totals[self._test_pos[test_id]]
        except KeyError:
            raise KeyError(f"unknown test id {test_id!r}") from None

    def select_tests(self, test_ids: Sequence[str]) -> "InfluenceMatrix":
        rows = [self._test_pos[t] for t in test_ids]
        return InfluenceMatrix(
            tuple(test_ids),
            self.train_ids,
            self.totals[rows],
            self.variant,
            self.checkpoint_fingerprint,
            self.epochs,
            None if self.per_epoch is None else self.per_epoch[:, rows],
        )


@dataclass(frozen=True)
class TopKSet:
    test_id: str
    sign: str
    k: int
    entries: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [tid for tid, _ in self.entries]

    def head(self, k: int) -> "TopKSet":
        return TopKSet(self.test_id, self.sign, k, self.entries[:k])

    def to_dict(self) -> dict:
        return {
            "test_id": self.test_id,
            "sign": self.sign,
            "k": self.k,
            "entries": [{"train_id": t, "score": s} for t, s in self.entries],
        }


def _params_for(series: CheckpointSeries, opts: InfluenceOptions):
    ckpts = series.upto(opts.converged_only)
    lr = series.train_config.learning_rate if opts.lr_weighted else 1.0
    return ckpts, lr


def sample_gradients(
    series: CheckpointSeries, dataset: Dataset, opts: InfluenceOptions = InfluenceOptions()
) -> list[np.ndarray]:
    """Per-checkpoint gradient blocks ``(n_samples, n_params)`` for a dataset."""
    ckpts, _ = _params_for(series, opts)
    blocks = []
    for c in ckpts:
        if c.params.input_dim != dataset.dim:
            raise ShapeError(
                f"epoch {c.epoch}: model input dim {c.params.input_dim} != feature dim {dataset.dim}"
            )
        G = per_sample_grads(c.params, dataset.X, dataset.y)
        if opts.output_only:
            G = G[:, output_slice(c.params)]
        if not np.all(np.isfinite(G)):
            bad = int(np.argwhere(~np.isfinite(G))[0, 0])
            raise InfluenceError(f"non-finite gradient at epoch {c.epoch}, sample {dataset.ids[bad]!r}")
        blocks.append(np.ascontiguousarray(G))
    return blocks


def gradient_vectors(series: CheckpointSeries, sample: Sample, opts: InfluenceOptions = InfluenceOptions()) -> list[GradientVector]:
    blocks = sample_gradients(series, Dataset((sample,)), opts)
    ckpts, _ = _params_for(series, opts)
    return [GradientVector.of(b[0], c.epoch, sample.id) for b, c in zip(blocks, ckpts)]


def _cell_terms(A: np.ndarray, B: np.ndarray, variant: str, sqA: np.ndarray, sqB: np.ndarray) -> np.ndarray:
    dots = (A[:, None, :] * B[None, :, :]).sum(axis=-1)
    if variant == "dot":
        return dots
    denom = np.sqrt(sqA[:, None] * sqB[None, :])
    degenerate = (np.sqrt(sqA)[:, None] < NORM_FLOOR) | (np.sqrt(sqB)[None, :] < NORM_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(degenerate, 0.0, dots / np.where(degenerate, 1.0, denom))
    return np.clip(cos, -1.0, 1.0)


def _epoch_terms(Gt: np.ndarray, Gr: np.ndarray, variant: str, threads: int) -> np.ndarray:
    sq_t = (Gt * Gt).sum(axis=-1)
    sq_r = (Gr * Gr).sum(axis=-1)
    M, N = Gt.shape[0], Gr.shape[0]
    out = np.empty((M, N), dtype=np.float64)

    def work(block):
        i0, j0 = block
        i1, j1 = min(i0 + _TEST_BLOCK, M), min(j0 + _TRAIN_BLOCK, N)
        out[i0:i1, j0:j1] = _cell_terms(Gt[i0:i1], Gr[j0:j1], variant, sq_t[i0:i1], sq_r[j0:j1])

    blocks = [(i, j) for i in range(0, M, _TEST_BLOCK) for j in range(0, N, _TRAIN_BLOCK)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, blocks))
    else:
        for b in blocks:
            work(b)
    return out


def influence_matrix(
    series: CheckpointSeries,
    train_set: Dataset,
    test_set: Dataset,
    variant: str = "cosine",
    *,
    opts: InfluenceOptions | None = None,
    keep_per_epoch: bool = True,
    threads: int = 1,
) -> InfluenceMatrix:
    """Score every (test, train) pair.

    Gradients are computed once per (checkpoint, sample) and reused across
    the other axis.  Totals are accumulated sequentially over epochs.
    """
    opts = opts or InfluenceOptions(variant=variant)
    if opts.variant != variant:
        opts = InfluenceOptions(variant, opts.converged_only, opts.lr_weighted, opts.output_only)
    ckpts, lr = _params_for(series, opts)
    G_train = sample_gradients(series, train_set, opts)
    G_test = sample_gradients(series, test_set, opts)
    M, N = len(test_set), len(train_set)
    per_epoch = np.empty((len(ckpts), M, N)) if keep_per_epoch else None
    totals = np.zeros((M, N))
    for e, (Gt, Gr) in enumerate(zip(G_test, G_train)):
        terms = _epoch_terms(Gt, Gr, opts.variant, threads)
        if lr != 1.0:
            terms = terms * lr
        totals = totals + terms
        if per_epoch is not None:
            per_epoch[e] = terms
        log.debug("epoch %d influence terms done (%d x %d)", ckpts[e].epoch, M, N)
    return InfluenceMatrix(
        test_set.ids,
        train_set.ids,
        totals,
        opts.variant,
        series.fingerprint(),
        tuple(c.epoch for c in ckpts),
        per_epoch,
    )


def _pair(series: CheckpointSeries, train_sample: Sample, test_sample: Sample, opts: InfluenceOptions) -> InfluenceRecord:
    if train_sample.dim != test_sample.dim:
        raise ShapeError(f"feature dims differ: {train_sample.dim} vs {test_sample.dim}")
    ckpts, lr = _params_for(series, opts)
    g_tr = sample_gradients(series, Dataset((train_sample,)), opts)
    g_te = sample_gradients(series, Dataset((test_sample,)), opts)
    terms = []
    for a, b in zip(g_te, g_tr):
        t = float(_cell_terms(a, b, opts.variant, (a * a).sum(-1), (b * b).sum(-1))[0, 0])
        terms.append(t * lr if lr != 1.0 else t)
    total = 0.0
    for t in terms:
        total = total + t
    return InfluenceRecord(train_sample.id, test_sample.id, tuple(terms), total, opts.variant)


def tracin_dot(series: CheckpointSeries, train_sample: Sample, test_sample: Sample, **kw) -> InfluenceRecord:
    """Sum over checkpoints of test-gradient . train-gradient."""
    return _pair(series, train_sample, test_sample, InfluenceOptions(variant="dot", **kw))


def tracin_cos(series: CheckpointSeries, train_sample: Sample, test_sample: Sample, **kw) -> InfluenceRecord:
    """Sum over checkpoints of the cosine between test and train gradients.

    A term is 0 when either gradient norm is below ``1e-10``.
    """
    return _pair(series, train_sample, test_sample, InfluenceOptions(variant="cosine", **kw))


def _id_ranks(ids: Sequence[str]) -> np.ndarray:
    order = sorted(range(len(ids)), key=ids.__getitem__)
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def _ranked(scores: np.ndarray, id_ranks: np.ndarray, sign: str) -> np.ndarray:
    if sign == "positive":
        return np.lexsort((id_ranks, -scores))
    if sign == "negative":
        return np.lexsort((id_ranks, scores))
    raise ValueError(f"sign must be 'positive' or 'negative', got {sign!r}")


def topk(matrix: InfluenceMatrix, test_id: str, k: int = 100, sign: str = "positive") -> TopKSet:
    """Top-k most positively (or negatively) influential training samples.

    Ties are broken by ascending train id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = matrix.row(test_id)
    order = _ranked(scores, _id_ranks(matrix.train_ids), sign)[:k]
    return TopKSet(test_id, sign, k, tuple((matrix.train_ids[j], float(scores[j])) for j in order))


def topk_all(matrix: InfluenceMatrix, k: int = 100, sign: str = "positive") -> list[TopKSet]:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = _id_ranks(matrix.train_ids)
    out = []
    for i, tid in enumerate(matrix.test_ids):
        scores = matrix.totals[i]
        order = _ranked(scores, ranks, sign)[:k]
        out.append(TopKSet(tid, sign, k, tuple((matrix.train_ids[j], float(scores[j])) for j in order)))
    return out


def per_epoch_matrix(matrix: InfluenceMatrix, mode: str = "slice") -> list[InfluenceMatrix]:
    """Split a matrix into per-epoch matrices.

    ``slice`` gives each epoch's own terms; ``prefix`` gives cumulative sums
    up to and including each epoch.
    """
    if matrix.per_epoch is None:
        raise InfluenceError("per-epoch terms were not retained for this matrix")
    if mode not in ("slice", "prefix"):
        raise ValueError("mode must be 'slice' or 'prefix'")
    out = []
    running = np.zeros_like(matrix.totals)
    for e, epoch in enumerate(matrix.epochs):
        running = running + matrix.per_epoch[e]
        values = matrix.per_epoch[e] if mode == "slice" else running.copy()
        out.append(
            InfluenceMatrix(matrix.test_ids, matrix.train_ids, values, matrix.variant,
                            matrix.checkpoint_fingerprint, (epoch,), values[None])
        )
    return out


def save_matrix(matrix: InfluenceMatrix, path: str | Path, extra: dict | None = None) -> None:
    """Binary ``TLIM`` container: header, float32 totals, optional per-epoch
    tensor, then a length-prefixed JSON index."""
    M, N = matrix.totals.shape
    E = len(matrix.epochs)
    has_pe = matrix.per_epoch is not None
    index = {
        "test_ids": list(matrix.test_ids),
        "train_ids": list(matrix.train_ids),
        "variant": matrix.variant,
        "checkpoint_fingerprint": matrix.checkpoint_fingerprint,
        "epochs": list(matrix.epochs),
    }
    if extra:
        index["extra"] = extra
    blob = json.dumps(index, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<HBBIII", MATRIX_VERSION, VARIANTS.index(matrix.variant), int(has_pe), M, N, E))
        fh.write(matrix.totals.astype("<f4").tobytes())
        if has_pe:
            fh.write(matrix.per_epoch.astype("<f4").tobytes())
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_matrix(path: str | Path) -> tuple[InfluenceMatrix, dict]:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<HBBIII")
    if raw[:4] != MATRIX_MAGIC:
        raise InfluenceError(f"{path}: not an influence matrix file")
    version, vcode, has_pe, M, N, E = struct.unpack("<HBBIII", raw[4 : 4 + head])
    if version != MATRIX_VERSION:
        raise InfluenceError(f"{path}: unsupported matrix version {version}")
    off = 4 + head
    totals = np.frombuffer(raw, dtype="<f4", count=M * N, offset=off).reshape(M, N).astype(np.float64)
    off += 4 * M * N
    per_epoch = None
    if has_pe:
        per_epoch = np.frombuffer(raw, dtype="<f4", count=E * M * N, offset=off).reshape(E, M, N).astype(np.float64)
        off += 4 * E * M * N
    (blob_len,) = struct.unpack("<Q", raw[off : off + 8])
    index = json.loads(raw[off + 8 : off + 8 + blob_len].decode("utf-8"))
    if index["variant"] != VARIANTS[vcode]:
        raise InfluenceError(f"{path}: variant code and index disagree")
    matrix = InfluenceMatrix(
        tuple(index["test_ids"]), tuple(index["train_ids"]), totals, index["variant"],
        index["checkpoint_fingerprint"], tuple(index["epochs"]), per_epoch,
    )
    return matrix, index.get("extra", {})


def export_csv(matrix: InfluenceMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("test_id,train_id,total\n")
        for i, tid in enumerate(matrix.test_ids):
            row = matrix.totals[i]
            for j, rid in enumerate(matrix.train_ids):
                fh.write(f"{tid},{rid},{row[j]!r}\n")

