"""Small binary classifier with exact per-sample gradients.

Two modes are supported: ``mlp`` (one tanh hidden layer followed by a
logistic output unit) and ``linear`` (plain logistic regression, convex, so
the exact Hessian influence oracle applies).  All parameters are flattened in
a fixed canonical order ``W1 (row-major), b1, w2, b2`` whenever a single
vector is needed.

Training uses AdamW on mini-batches in a seeded order and snapshots the
parameters after every epoch.  Snapshots are rounded to float32 so that a
checkpoint written to disk and read back evaluates bit-identically to the
in-memory one.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .dataset import Dataset, Sample

log = logging.getLogger(__name__)

P_MIN = 1e-12
P_MAX = 1.0 - 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"TLCK"
_F32_MAX = float(np.finfo(np.float32).max)
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelParams:
    mode: str
    w2: np.ndarray
    b2: float
    W1: np.ndarray | None = None
    b1: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("mlp", "linear"):
            raise ValueError(f"unknown mode {self.mode!r}")
        w2 = np.asarray(self.w2, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", float(self.b2))
        if self.mode == "mlp":
            if self.W1 is None or self.b1 is None:
                raise ValueError("mlp mode needs W1 and b1")
            W1 = np.asarray(self.W1, dtype=np.float64)
            b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
            if W1.ndim != 2 or W1.shape[0] != b1.shape[0] or w2.shape[0] != b1.shape[0]:
                raise ShapeError("inconsistent mlp parameter shapes")
            object.__setattr__(self, "W1", W1)
            object.__setattr__(self, "b1", b1)
        elif self.W1 is not None or self.b1 is not None:
            raise ValueError("linear mode has no hidden layer")
        if not np.all(np.isfinite(self.flat())):
            raise ValueError("parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1] if self.mode == "mlp" else self.w2.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0] if self.mode == "mlp" else 0

    @property
    def n_params(self) -> int:
        return n_params(self.mode, self.input_dim, self.hidden_dim)

    def flat(self) -> np.ndarray:
        parts = []
        if self.mode == "mlp":
            parts += [self.W1.reshape(-1), self.b1]
        parts += [self.w2, np.array([self.b2])]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, mode: str, vec: np.ndarray, input_dim: int, hidden_dim: int = 0) -> "ModelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (n_params(mode, input_dim, hidden_dim),):
            raise ShapeError(f"flat vector has {vec.shape[0]} entries, expected {n_params(mode, input_dim, hidden_dim)}")
        if mode == "linear":
            return cls(mode="linear", w2=vec[:input_dim].copy(), b2=vec[input_dim])
        h, d = hidden_dim, input_dim
        W1 = vec[: h * d].reshape(h, d).copy()
        b1 = vec[h * d : h * d + h].copy()
        w2 = vec[h * d + h : h * d + 2 * h].copy()
        return cls(mode="mlp", W1=W1, b1=b1, w2=w2, b2=vec[-1])

    def rounded(self) -> "ModelParams":
        """Copy with every entry rounded through float32."""
        vec = self.flat().astype(np.float32).astype(np.float64)
        return ModelParams.from_flat(self.mode, vec, self.input_dim, self.hidden_dim)


def n_params(mode: str, input_dim: int, hidden_dim: int = 0) -> int:
    if mode == "linear":
        return input_dim + 1
    return hidden_dim * input_dim + 2 * hidden_dim + 1


def output_slice(params: ModelParams) -> slice:
    """Location of the output-layer weights inside the canonical flat vector."""
    if params.mode == "linear":
        return slice(0, params.n_params)
    start = params.hidden_dim * params.input_dim + params.hidden_dim
    return slice(start, params.n_params)


def zero_params(mode: str, input_dim: int, hidden_dim: int = 0) -> ModelParams:
    return ModelParams.from_flat(mode, np.zeros(n_params(mode, input_dim, hidden_dim)), input_dim, hidden_dim)


def init_params(mode: str, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> ModelParams:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per layer."""
    if mode == "linear":
        bound = 1.0 / np.sqrt(input_dim)
        w = rng.uniform(-bound, bound, input_dim)
        return ModelParams(mode="linear", w2=w, b2=rng.uniform(-bound, bound))
    b_in = 1.0 / np.sqrt(input_dim)
    b_hid = 1.0 / np.sqrt(hidden_dim)
    W1 = rng.uniform(-b_in, b_in, (hidden_dim, input_dim))
    b1 = rng.uniform(-b_in, b_in, hidden_dim)
    w2 = rng.uniform(-b_hid, b_hid, hidden_dim)
    b2 = rng.uniform(-b_hid, b_hid)
    return ModelParams(mode="mlp", W1=W1, b1=b1, w2=w2, b2=b2)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _check_dim(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != params.input_dim:
        raise ShapeError(f"feature length {X.shape[1]} does not match model input dim {params.input_dim}")
    return X


def _rowdot(A: np.ndarray, w: np.ndarray) -> np.ndarray:
    # row-wise reductions; unlike BLAS GEMM the result for a row does not
    # depend on how many other rows are in the batch
    return (A * w).sum(axis=-1)


def _hidden(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return np.tanh((X[:, None, :] * params.W1[None, :, :]).sum(axis=-1) + params.b1)


def predict_proba(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Probability of class 1 for each row of ``X``."""
    X = _check_dim(params, X)
    if params.mode == "mlp":
        z = _rowdot(_hidden(params, X), params.w2) + params.b2
    else:
        z = _rowdot(X, params.w2) + params.b2
    return _sigmoid(z)


def forward(params: ModelParams, features: np.ndarray) -> float:
    return float(predict_proba(params, features)[0])


def bce(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = np.clip(p, P_MIN, P_MAX)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def losses(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return bce(predict_proba(params, X), np.asarray(y, dtype=np.float64))


def loss(params: ModelParams, sample: Sample) -> float:
    return float(losses(params, sample.features, np.array([sample.label]))[0])


def confidences(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = predict_proba(params, X)
    return np.where(np.asarray(y) == 1, p, 1.0 - p)


def confidence(params: ModelParams, sample: Sample) -> float:
    """Probability the model assigns to the sample's true class."""
    return float(confidences(params, sample.features, np.array([sample.label]))[0])


def _residual(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    # d loss / d logit; zero where the probability clamp is active
    r = p - y
    r[(p <= P_MIN) | (p >= P_MAX)] = 0.0
    return r


def per_sample_grads(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Loss gradients for every row of ``X``, shape ``(n, n_params)``."""
    X = _check_dim(params, X)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if params.mode == "linear":
        r = _residual(predict_proba(params, X), y)
        return np.concatenate([r[:, None] * X, r[:, None]], axis=1)
    H = _hidden(params, X)
    r = _residual(_sigmoid(_rowdot(H, params.w2) + params.b2), y)
    d1 = r[:, None] * params.w2[None, :] * (1.0 - H * H)
    gW1 = (d1[:, :, None] * X[:, None, :]).reshape(n, -1)
    return np.concatenate([gW1, d1, r[:, None] * H, r[:, None]], axis=1)


def batch_grad(params: ModelParams, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Mean gradient and mean loss over a batch, without materializing per-sample rows."""
    n = X.shape[0]
    if params.mode == "linear":
        p = predict_proba(params, X)
        r = _residual(p, y)
        g = np.concatenate([X.T @ r, [r.sum()]]) / n
        return g, float(bce(p, y).mean())
    H = _hidden(params, X)
    p = _sigmoid(H @ params.w2 + params.b2)
    r = _residual(p, y)
    d1 = r[:, None] * params.w2[None, :] * (1.0 - H * H)
    g = np.concatenate([(d1.T @ X).reshape(-1), d1.sum(0), H.T @ r, [r.sum()]]) / n
    return g, float(bce(p, y).mean())


@dataclass(frozen=True, eq=False)
class GradientVector:
    values: np.ndarray
    norm: float
    checkpoint_epoch: int
    sample_id: str

    @classmethod
    def of(cls, values: np.ndarray, checkpoint_epoch: int, sample_id: str) -> "GradientVector":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, float(np.linalg.norm(values)), checkpoint_epoch, sample_id)


def grad(params: ModelParams, sample: Sample, epoch: int = 0) -> GradientVector:
    g = per_sample_grads(params, sample.features, np.array([sample.label]))[0]
    return GradientVector.of(g, epoch, sample.id)


@dataclass(frozen=True)
class Hyperparams:
    """Training settings.

    ``select="best"`` stops early after ``patience`` epochs without a dev
    accuracy gain and reports the earliest best epoch as converged.
    ``select="last"`` always runs ``epochs_max`` epochs and uses the last
    one, which gives fixed-length runs for retraining comparisons.
    """

    mode: str = "mlp"
    learning_rate: float = 3e-3
    epochs_max: int = 10
    patience: int = 3
    batch_size: int = 32
    hidden_dim: int = 16
    weight_decay: float = 0.01
    seed: int = 0
    select: str = "best"

    def __post_init__(self):
        if self.select not in ("best", "last"):
            raise ValueError("select must be 'best' or 'last'")
        if self.mode not in ("mlp", "linear"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode == "mlp" and self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1 in mlp mode")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    epoch: int
    params: ModelParams
    dev_metric: float
    train_loss: float = float("nan")


@dataclass(frozen=True, eq=False)
class CheckpointSeries:
    checkpoints: tuple[Checkpoint, ...]
    converged_epoch: int
    train_config: Hyperparams
    dataset_fingerprint: str

    def __post_init__(self):
        if not self.checkpoints:
            raise ValueError("checkpoint series is empty")
        epochs = [c.epoch for c in self.checkpoints]
        if epochs != list(range(1, len(epochs) + 1)):
            raise ValueError("checkpoint epochs must be consecutive from 1")
        if not 1 <= self.converged_epoch <= len(epochs):
            raise ValueError("converged_epoch out of range")

    def __len__(self) -> int:
        return len(self.checkpoints)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[self.converged_epoch - 1]

    @property
    def params(self) -> ModelParams:
        """Parameters at the early-stopping epoch."""
        return self.final.params

    def upto(self, converged_only: bool = True) -> tuple[Checkpoint, ...]:
        return self.checkpoints[: self.converged_epoch] if converged_only else self.checkpoints

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.dataset_fingerprint.encode())
        h.update(json.dumps(self.train_config.to_dict(), sort_keys=True).encode())
        h.update(str(self.converged_epoch).encode())
        for c in self.checkpoints:
            h.update(struct.pack("<i", c.epoch))
            h.update(c.params.flat().astype("<f8").tobytes())
        return h.hexdigest()


def accuracy(params: ModelParams, dataset: Dataset) -> float:
    pred = (predict_proba(params, dataset.X) >= 0.5).astype(np.float64)
    return float(np.mean(pred == dataset.y))


def train(
    dataset: Dataset,
    dev: Dataset,
    hyper: Hyperparams,
    exclude: Iterable[str] = (),
) -> CheckpointSeries:
    """Train with AdamW and per-epoch checkpoints.

    ``exclude`` names training samples to leave out while keeping the batch
    schedule of the full set: the shuffle is drawn over all of ``dataset``
    and excluded slots are simply skipped.  Removing nothing therefore gives
    bit-identical results to a plain run.
    """
    if len(dev) == 0:
        raise ValueError("dev set is empty")
    if dev.dim != dataset.dim:
        raise ShapeError(f"dev features have dim {dev.dim}, training set has {dataset.dim}")
    excluded = set(exclude)
    unknown = excluded - set(dataset.ids)
    if unknown:
        raise KeyError(f"excluded ids not in training set: {sorted(unknown)[:5]}")
    keep_mask = np.array([sid not in excluded for sid in dataset.ids])
    if not keep_mask.any():
        raise ValueError("no training samples left after exclusion")

    init_rng = np.random.default_rng([hyper.seed, 0])
    order_rng = np.random.default_rng([hyper.seed, 1])
    params = init_params(hyper.mode, dataset.dim, hyper.hidden_dim, init_rng)
    theta = params.flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    step = 0
    X, y = dataset.X, dataset.y
    N = len(dataset)
    lr, wd = hyper.learning_rate, hyper.weight_decay

    checkpoints: list[Checkpoint] = []
    best_acc, best_epoch, stale = -1.0, 0, 0
    for epoch in range(1, hyper.epochs_max + 1):
        perm = order_rng.permutation(N)
        epoch_losses = []
        for b, start in enumerate(range(0, N, hyper.batch_size)):
            idx = perm[start : start + hyper.batch_size]
            idx = idx[keep_mask[idx]]
            if idx.size == 0:
                continue
            current = ModelParams.from_flat(hyper.mode, theta, dataset.dim, hyper.hidden_dim)
            g, batch_loss = batch_grad(current, X[idx], y[idx])
            if not np.isfinite(batch_loss) or not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            step += 1
            theta = theta * (1.0 - lr * wd)
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1**step)
            v_hat = v / (1.0 - ADAM_BETA2**step)
            theta = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            if not np.all(np.isfinite(theta)) or np.max(np.abs(theta)) >= _F32_MAX:
                raise TrainingError(f"parameters diverged at epoch {epoch}, batch {b}", epoch, b)
            epoch_losses.append(batch_loss * idx.size)
        params = ModelParams.from_flat(hyper.mode, theta, dataset.dim, hyper.hidden_dim)
        snapshot = params.rounded()
        dev_acc = accuracy(snapshot, dev)
        mean_loss = float(np.sum(epoch_losses) / keep_mask.sum())
        checkpoints.append(Checkpoint(epoch, snapshot, dev_acc, mean_loss))
        log.debug("epoch %d: train loss %.5f, dev acc %.4f", epoch, mean_loss, dev_acc)
        if dev_acc > best_acc:
            best_acc, best_epoch, stale = dev_acc, epoch, 0
        else:
            stale += 1
            if stale >= hyper.patience and hyper.select == "best":
                break
    if hyper.select == "last":
        best_epoch = len(checkpoints)
    used = dataset.subset(sid for sid, keep in zip(dataset.ids, keep_mask) if keep) if excluded else dataset
    return CheckpointSeries(tuple(checkpoints), best_epoch, hyper, used.fingerprint())


def _header(mode: str, input_dim: int, hidden_dim: int, epoch: int) -> bytes:
    return CHECKPOINT_MAGIC + struct.pack(
        "<HBIII", CHECKPOINT_VERSION, 0 if mode == "mlp" else 1, input_dim, hidden_dim, epoch
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path, series: CheckpointSeries | None = None) -> None:
    """Write a binary checkpoint plus a JSON sidecar at ``<path>.json``."""
    p = ckpt.params
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_header(p.mode, p.input_dim, p.hidden_dim, ckpt.epoch))
        fh.write(p.flat().astype("<f4").tobytes())
    meta = {"epoch": ckpt.epoch, "dev_metric": ckpt.dev_metric, "train_loss": ckpt.train_loss}
    if series is not None:
        meta["hyperparams"] = series.train_config.to_dict()
        meta["dataset_fingerprint"] = series.dataset_fingerprint
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    head_len = len(CHECKPOINT_MAGIC) + struct.calcsize("<HBIII")
    if len(raw) < head_len or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    version, mode_code, input_dim, hidden_dim, epoch = struct.unpack("<HBIII", raw[4:head_len])
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    mode = {0: "mlp", 1: "linear"}.get(mode_code)
    if mode is None:
        raise CheckpointFormatError(f"{path}: unknown mode code {mode_code}")
    body = np.frombuffer(raw[head_len:], dtype="<f4")
    if body.shape[0] != n_params(mode, input_dim, hidden_dim):
        raise CheckpointFormatError(f"{path}: truncated parameter block")
    params = ModelParams.from_flat(mode, body.astype(np.float64), input_dim, hidden_dim)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Checkpoint(epoch, params, float(meta.get("dev_metric", float("nan"))), float(meta.get("train_loss", float("nan"))))


@dataclass
class SeriesIndex:
    converged_epoch: int
    dataset_fingerprint: str
    hyperparams: dict
    files: list[str] = field(default_factory=list)


def save_series(series: CheckpointSeries, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for c in series.checkpoints:
        path = directory / f"epoch_{c.epoch:03d}.tlck"
        save_checkpoint(c, path, series)
        written += [path, path.with_suffix(".tlck.json")]
    index = SeriesIndex(
        series.converged_epoch,
        series.dataset_fingerprint,
        series.train_config.to_dict(),
        [f"epoch_{c.epoch:03d}.tlck" for c in series.checkpoints],
    )
    idx_path = directory / "series.json"
    idx_path.write_text(json.dumps(asdict(index), indent=2, sort_keys=True) + "\n")
    written.append(idx_path)
    return written


def load_series(directory: str | Path) -> CheckpointSeries:
    directory = Path(directory)
    index = json.loads((directory / "series.json").read_text())
    ckpts = tuple(load_checkpoint(directory / name) for name in index["files"])
    return CheckpointSeries(ckpts, index["converged_epoch"], Hyperparams(**index["hyperparams"]), index["dataset_fingerprint"])
