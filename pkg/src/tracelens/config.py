"""Run configuration: one JSON document that fully determines a run."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dataset import SynthConfig
from .influence import VARIANTS, InfluenceOptions
from .model import Hyperparams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    """Where the data comes from and how it is split.

    With ``path`` unset a synthetic parallel corpus is generated from
    ``synth``.  ``split`` counts content items per group for the train,
    dev and test-pool parts.
    """

    path: str | None = None
    dims: int = 64
    synth: dict = field(default_factory=lambda: {"per_group": 2600})
    split: tuple[int, int, int] = (2000, 400, 200)


@dataclass(frozen=True)
class OracleSection:
    enabled: bool = True
    items_per_group: int = 32
    dev_items: int = 200
    n_tests: int = 5
    latent_dim: int = 4
    noise_scale: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 60
    batch_size: int = 16
    damping: float = 1e-3
    delta_floor: float = 1e-4


@dataclass(frozen=True)
class AnalysisSection:
    removal: bool = True
    k_grid: tuple[int, ...] = (50, 100, 150, 200, 250)
    dynamics: bool = True
    dynamics_mode: str = "slice"
    reinforcing: bool = True
    zero_shot: bool = True
    zero_shot_groups: tuple[str, ...] | None = None
    zero_shot_signs: tuple[str, ...] = ("positive",)
    imbalance: bool = True
    imbalance_groups: tuple[str, ...] | None = None
    pct_grid: tuple[int, ...] = (25, 50, 75, 100)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    variant: str = "cosine"
    k: int = 100
    per_group: int = 25
    output_only: bool = False
    all_epochs: bool = False
    lr_weighted: bool = False
    data: DataSection = field(default_factory=DataSection)
    hyper: dict = field(default_factory=dict)
    oracle: OracleSection = field(default_factory=OracleSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.per_group < 1:
            raise ConfigError("per_group must be >= 1")
        if self.analysis.dynamics_mode not in ("slice", "prefix"):
            raise ConfigError("dynamics_mode must be 'slice' or 'prefix'")
        grid = self.analysis.k_grid
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("k_grid must be strictly increasing")
        self.hyperparams()
        self.synth()

    def hyperparams(self) -> Hyperparams:
        try:
            return Hyperparams(**{**self.hyper, "seed": self.seed})
        except TypeError as exc:
            raise ConfigError(f"bad hyper section: {exc}") from None

    def influence_options(self) -> InfluenceOptions:
        return InfluenceOptions(self.variant, not self.all_epochs, self.lr_weighted, self.output_only)

    def synth(self) -> SynthConfig:
        try:
            return SynthConfig(**{**self.data.synth, "seed": self.seed})
        except TypeError as exc:
            raise ConfigError(f"bad synth section: {exc}") from None

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {unknown}")
    for key, val in raw.items():
        if isinstance(val, list):
            raw[key] = tuple(val)
    return cls(**raw)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    raw["data"] = _section(DataSection, raw.get("data"), "data")
    raw["oracle"] = _section(OracleSection, raw.get("oracle"), "oracle")
    raw["analysis"] = _section(AnalysisSection, raw.get("analysis"), "analysis")
    return RunConfig(**raw)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(raw)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
