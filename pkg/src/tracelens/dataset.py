"""Datasets of grouped, optionally parallel samples.

A sample carries a group label (the language it was written in, for real
multilingual data) and an optional ``pair_id`` shared by all translations of
the same content.  Besides JSONL ingestion this module provides a hashed
character-trigram featurizer, a synthetic parallel-corpus generator and the
two composition transforms used by the analyses: oversampling one group and
dropping one group entirely.
"""
from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DatasetError",
    "DatasetFormatError",
    "DatasetIntegrityError",
    "Sample",
    "Dataset",
    "SynthConfig",
    "featurize",
    "load_dataset",
    "save_dataset",
    "generate_synthetic",
    "split_by_pair",
    "rebalance",
    "exclude_group",
]


class DatasetError(Exception):
    pass


class DatasetFormatError(DatasetError):
    """A dataset file line could not be parsed into a sample."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class DatasetIntegrityError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    group: str
    features: np.ndarray
    label: int
    pair_id: str | None = None
    raw_text: str | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise DatasetFormatError(f"sample {self.id!r}: features must be a 1-d vector")
        if not np.all(np.isfinite(feats)):
            raise DatasetFormatError(f"sample {self.id!r}: non-finite feature value")
        if self.label not in (0, 1):
            raise DatasetFormatError(f"sample {self.id!r}: label must be 0 or 1, got {self.label!r}")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "label", int(self.label))

    @property
    def dim(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable ordered collection of samples.

    Array views (``X``, ``y``, ``ids``) are built lazily and cached; they are
    read-only so a dataset can be shared freely between threads.
    """

    samples: tuple[Sample, ...]
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        samples = tuple(self.samples)
        if not samples:
            raise DatasetIntegrityError("dataset must contain at least one sample")
        index: dict[str, int] = {}
        dim = samples[0].dim
        for i, s in enumerate(samples):
            if s.id in index:
                raise DatasetIntegrityError(f"duplicate sample id {s.id!r}")
            if s.dim != dim:
                raise DatasetIntegrityError(
                    f"sample {s.id!r} has {s.dim} features, expected {dim}"
                )
            index[s.id] = i
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> Sample:
        try:
            return self.samples[self._index[sample_id]]
        except KeyError:
            raise KeyError(f"unknown sample id {sample_id!r}") from None

    def __contains__(self, sample_id: object) -> bool:
        return sample_id in self._index

    def position(self, sample_id: str) -> int:
        return self._index[sample_id]

    @property
    def dim(self) -> int:
        return self.samples[0].dim

    @cached_property
    def groups(self) -> tuple[str, ...]:
        """Group labels in order of first appearance."""
        return tuple(dict.fromkeys(s.group for s in self.samples))

    @cached_property
    def parallel(self) -> bool:
        seen = set()
        for s in self.samples:
            if s.pair_id is None:
                continue
            key = (s.group, s.pair_id)
            if key in seen:
                return False
            seen.add(key)
        return bool(seen)

    @cached_property
    def X(self) -> np.ndarray:
        X = np.stack([s.features for s in self.samples])
        X.setflags(write=False)
        return X

    @cached_property
    def y(self) -> np.ndarray:
        y = np.array([s.label for s in self.samples], dtype=np.float64)
        y.setflags(write=False)
        return y

    @cached_property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.samples)

    @cached_property
    def group_of(self) -> dict[str, str]:
        return {s.id: s.group for s in self.samples}

    @cached_property
    def pair_of(self) -> dict[str, str | None]:
        return {s.id: s.pair_id for s in self.samples}

    def group_counts(self) -> dict[str, int]:
        counts = Counter(s.group for s in self.samples)
        return {g: counts[g] for g in self.groups}

    def subset(self, keep: Iterable[str]) -> "Dataset":
        keep = set(keep)
        return Dataset(tuple(s for s in self.samples if s.id in keep))

    def by_group(self, group: str) -> "Dataset":
        if group not in self.groups:
            raise KeyError(f"unknown group {group!r}")
        return Dataset(tuple(s for s in self.samples if s.group == group))

    def fingerprint(self) -> str:
        """SHA-256 over the ordered sample ids."""
        h = hashlib.sha256()
        for sid in self.ids:
            h.update(sid.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def _trigram_bucket(gram: str, dims: int, seed: int) -> int:
    digest = hashlib.blake2b(
        gram.encode("utf-8"), digest_size=8, salt=int(seed).to_bytes(8, "little", signed=True)
    ).digest()
    return int.from_bytes(digest, "little") % dims


def featurize(text: str, dims: int, seed: int = 0) -> np.ndarray:
    """Hashed character-trigram counts, L2-normalized.

    Strings shorter than three characters have no trigrams and map to the
    zero vector.
    """
    if dims < 1:
        raise ValueError("dims must be >= 1")
    vec = np.zeros(dims, dtype=np.float64)
    for i in range(len(text) - 2):
        vec[_trigram_bucket(text[i : i + 3], dims, seed)] += 1.0
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def _parse_line(obj: object, lineno: int, dims: int | None, seed: int) -> Sample:
    if not isinstance(obj, dict):
        raise DatasetFormatError("expected a JSON object", lineno)
    for key in ("id", "group", "label"):
        if key not in obj:
            raise DatasetFormatError(f"missing key {key!r}", lineno)
    sid, group, label = obj["id"], obj["group"], obj["label"]
    pair_id = obj.get("pair_id")
    if not isinstance(sid, str) or not isinstance(group, str):
        raise DatasetFormatError("id and group must be strings", lineno)
    if pair_id is not None and not isinstance(pair_id, str):
        raise DatasetFormatError("pair_id must be a string or null", lineno)
    if label not in (0, 1) or isinstance(label, bool):
        raise DatasetFormatError(f"label must be 0 or 1, got {label!r}", lineno)
    has_text, has_feats = "text" in obj, "features" in obj
    if has_text == has_feats:
        raise DatasetFormatError("exactly one of 'text' or 'features' is required", lineno)
    if has_text:
        text = obj["text"]
        if not isinstance(text, str):
            raise DatasetFormatError("text must be a string", lineno)
        if dims is None:
            raise DatasetFormatError("text samples need featurization dims", lineno)
        feats = featurize(text, dims, seed)
        raw = text
    else:
        raw_feats = obj["features"]
        if not isinstance(raw_feats, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw_feats
        ):
            raise DatasetFormatError("features must be an array of numbers", lineno)
        feats = np.asarray(raw_feats, dtype=np.float64)
        raw = obj.get("raw_text")
    try:
        return Sample(id=sid, group=group, features=feats, label=label, pair_id=pair_id, raw_text=raw)
    except DatasetFormatError as exc:
        raise DatasetFormatError(str(exc), lineno) from None


def load_dataset(path: str | Path, dims: int | None = 64, seed: int = 0) -> Dataset:
    """Read a JSON-lines dataset file.

    Lines carrying ``text`` are featurized with :func:`featurize` using
    ``dims`` and ``seed``; lines carrying ``features`` are used verbatim.
    Blank lines are ignored.
    """
    samples = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON ({exc.msg})", lineno) from None
            sample = _parse_line(obj, lineno, dims, seed)
            if sample.id in seen:
                raise DatasetIntegrityError(
                    f"line {lineno}: duplicate id {sample.id!r} (first seen on line {seen[sample.id]})"
                )
            seen[sample.id] = lineno
            samples.append(sample)
    if not samples:
        raise DatasetFormatError("dataset file contains no samples")
    try:
        return Dataset(tuple(samples))
    except DatasetIntegrityError as exc:
        raise DatasetIntegrityError(f"{path}: {exc}") from None


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write ``dataset`` as JSONL with explicit feature arrays."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in dataset:
            obj = {
                "id": s.id,
                "group": s.group,
                "pair_id": s.pair_id,
                "label": s.label,
                "features": [float(v) for v in s.features],
            }
            if s.raw_text is not None:
                obj["raw_text"] = s.raw_text
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


DEFAULT_GROUP_NAMES = ("de", "en", "es", "fr", "ko")


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic parallel corpus.

    Each content item is a latent vector; a group's rendition of it adds a
    fixed per-group shift and independent per-sample noise.  Labels come from
    thresholding the latent projection onto a fixed direction at its median,
    so classes are balanced.
    """

    n_groups: int = 5
    per_group: int = 2000
    pair_structure: str = "parallel"
    latent_dim: int = 32
    group_shift_scale: float = 0.5
    noise_scale: float = 0.5
    label_noise: float = 0.0
    normalize: bool = False
    seed: int = 0
    group_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_groups < 2:
            raise ValueError("n_groups must be >= 2")
        if self.per_group < 2:
            raise ValueError("per_group must be >= 2")
        if self.pair_structure not in ("parallel", "independent"):
            raise ValueError("pair_structure must be 'parallel' or 'independent'")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if min(self.group_shift_scale, self.noise_scale, self.label_noise) < 0:
            raise ValueError("scales must be non-negative")
        if self.label_noise > 0.5:
            raise ValueError("label_noise must be <= 0.5")
        if self.group_names is not None:
            names = tuple(self.group_names)
            if len(names) != self.n_groups or len(set(names)) != len(names):
                raise ValueError("group_names must list n_groups distinct names")
            object.__setattr__(self, "group_names", names)

    def names(self) -> tuple[str, ...]:
        if self.group_names is not None:
            return self.group_names
        if self.n_groups == len(DEFAULT_GROUP_NAMES):
            return DEFAULT_GROUP_NAMES
        return tuple(f"g{i}" for i in range(self.n_groups))


def _median_labels(proj: np.ndarray) -> np.ndarray:
    # rank-based split: exactly half the items above the median
    order = np.argsort(proj, kind="stable")
    labels = np.zeros(proj.shape[0], dtype=np.int64)
    labels[order[proj.shape[0] // 2 :]] = 1
    return labels


def generate_synthetic(config: SynthConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    names = config.names()
    d = config.latent_dim
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    shifts = rng.standard_normal((config.n_groups, d)) * config.group_shift_scale

    n_items = config.per_group
    if config.pair_structure == "parallel":
        latent = rng.standard_normal((n_items, d))
        labels = _median_labels(latent @ direction)
        flips = rng.random(n_items) < config.label_noise
        labels = np.where(flips, 1 - labels, labels)
    samples = []
    for gi, group in enumerate(names):
        if config.pair_structure == "independent":
            latent = rng.standard_normal((n_items, d))
            labels = _median_labels(latent @ direction)
            flips = rng.random(n_items) < config.label_noise
            labels = np.where(flips, 1 - labels, labels)
        noise = rng.standard_normal((n_items, d)) * config.noise_scale
        feats = latent + shifts[gi] + noise
        if config.normalize:
            norms = np.linalg.norm(feats, axis=1, keepdims=True)
            feats = np.divide(feats, norms, out=np.zeros_like(feats), where=norms > 0)
        for j in range(n_items):
            samples.append(
                Sample(
                    id=f"{group}-{j:05d}",
                    group=group,
                    features=feats[j],
                    label=int(labels[j]),
                    pair_id=f"p{j:05d}" if config.pair_structure == "parallel" else None,
                )
            )
    return Dataset(tuple(samples))


def split_by_pair(
    dataset: Dataset, sizes: Sequence[int], seed: int = 0
) -> list[Dataset]:
    """Partition a dataset into consecutive parts of ``sizes`` content items.

    Samples sharing a ``pair_id`` always land in the same part, so no
    translation of a held-out item leaks into training.  Samples without a
    pair id are treated as their own item.  Part sizes count items per group
    for parallel data.
    """
    keys = list(dict.fromkeys(s.pair_id if s.pair_id is not None else s.id for s in dataset))
    if sum(sizes) > len(keys):
        raise ValueError(f"requested {sum(sizes)} items but dataset has {len(keys)}")
    perm = np.random.default_rng(seed).permutation(len(keys))
    assign: dict[str, int] = {}
    start = 0
    for part, size in enumerate(sizes):
        for idx in perm[start : start + size]:
            assign[keys[idx]] = part
        start += size
    parts: list[list[Sample]] = [[] for _ in sizes]
    for s in dataset:
        part = assign.get(s.pair_id if s.pair_id is not None else s.id)
        if part is not None:
            parts[part].append(s)
    return [Dataset(tuple(p)) for p in parts]


def rebalance(dataset: Dataset, group: str, pct: float, seed: int = 0) -> Dataset:
    """Oversample ``group`` by ``pct`` percent with duplicated samples.

    ``ceil(pct / 100 * n_group)`` members of the group are drawn uniformly
    (without replacement while possible) and appended with fresh ids of the
    form ``<id>~dup<k>``; pair ids are kept so duplicates remain linked to
    their translations.
    """
    if group not in dataset.groups:
        raise KeyError(f"unknown group {group!r}")
    if pct <= 0:
        raise ValueError("pct must be > 0")
    members = [s for s in dataset if s.group == group]
    n_new = math.ceil(pct / 100.0 * len(members) - 1e-9)
    rng = np.random.default_rng(seed)
    picks: list[int] = []
    remaining = n_new
    while remaining > 0:
        take = min(remaining, len(members))
        picks.extend(rng.choice(len(members), size=take, replace=False).tolist())
        remaining -= take
    copies: Counter[str] = Counter()
    extra = []
    for idx in picks:
        src = members[idx]
        copies[src.id] += 1
        new_id = f"{src.id}~dup{copies[src.id]}"
        while new_id in dataset:
            copies[src.id] += 1
            new_id = f"{src.id}~dup{copies[src.id]}"
        extra.append(
            Sample(
                id=new_id,
                group=src.group,
                features=src.features,
                label=src.label,
                pair_id=src.pair_id,
                raw_text=src.raw_text,
            )
        )
    return Dataset(dataset.samples + tuple(extra))


def exclude_group(dataset: Dataset, group: str) -> Dataset:
    if group not in dataset.groups:
        raise KeyError(f"unknown group {group!r}")
    if len(dataset.groups) == 1:
        raise DatasetError(f"cannot exclude {group!r}: it is the only group")
    return Dataset(tuple(s for s in dataset if s.group != group))
