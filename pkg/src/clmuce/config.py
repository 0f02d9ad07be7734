"""Experiment configuration: a JSON key-value tree validated against typed sections.

Every section is a frozen dataclass; unknown keys anywhere in the tree are rejected,
and the root seed is mandatory (either in the file or via ``--seed``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .channel_sim import SystemConfig
from .clnet import DEFAULT_BINS, ContrastiveConfig
from .dnet import JointConfig, TrainSchedule
from .numerics.tensor import ConfigurationError


@dataclass(frozen=True)
class SceneSection:
    n_scatterers: int = 50
    area: tuple[float, float, float, float] = (0.0, 100.0, 0.0, 100.0)


@dataclass(frozen=True)
class DataSection:
    n_contrastive: int = 4979
    n_downstream: int = 1500
    n_test: int = 500
    snr_db: float = 20.0


@dataclass(frozen=True)
class ContrastiveSection:
    d: float = 2.0
    tau: float = 0.1
    n_negatives: int = 16
    max_positives: int = 8
    batch_size: int = 128
    hidden: int = 256
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 20

    def training(self) -> ContrastiveConfig:
        kw = asdict(self)
        kw.pop("epochs")
        return ContrastiveConfig(**kw)


@dataclass(frozen=True)
class DownstreamSection:
    q_max: int = 3
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.epochs, self.batch_size, self.lr, self.weight_decay)


@dataclass(frozen=True)
class JointSection:
    alpha: float = 0.8
    sim_tau: float = 1.0
    epochs: int = 30

    def joint(self) -> JointConfig:
        return JointConfig(self.alpha, self.sim_tau)


@dataclass(frozen=True)
class TestSection:
    k_users: int = 5
    floor: Any = "median"  # "median" of training intra-group similarity, or a number


@dataclass(frozen=True)
class BaselineSection:
    location_group_size: int = 3
    jomp_grid: int = 64
    jomp_sparsity: int = 8
    jomp_tol: float = 1e-6


@dataclass(frozen=True)
class SweepSection:
    snr_db: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    pilot_len: tuple[int, ...] = (8, 16, 24, 32)
    labels: tuple[int, ...] = (250, 500, 1000, 1500)
    map_cells: int = 10


@dataclass(frozen=True)
class SimilaritySection:
    n_samples: int = 2000
    pairs_per_bin: int = 400
    bins: tuple[float, ...] = DEFAULT_BINS


_SECTIONS = {
    "scene": SceneSection,
    "system": SystemConfig,
    "data": DataSection,
    "contrastive": ContrastiveSection,
    "downstream": DownstreamSection,
    "joint": JointSection,
    "test": TestSection,
    "baselines": BaselineSection,
    "sweep": SweepSection,
    "similarity": SimilaritySection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    scene: SceneSection = field(default_factory=SceneSection)
    system: SystemConfig = field(default_factory=SystemConfig)
    data: DataSection = field(default_factory=DataSection)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)
    joint: JointSection = field(default_factory=JointSection)
    test: TestSection = field(default_factory=TestSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    similarity: SimilaritySection = field(default_factory=SimilaritySection)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed}
        for name in _SECTIONS:
            section = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)


def _coerce(cls, name: str, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config section {name!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    kw = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigurationError(f"{name}.{key} must be a list")
            kind = type(default[0]) if default else float
            if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value) or (
                    kind is int and any(not isinstance(v, int) for v in value)):
                raise ConfigurationError(f"{name}.{key} must be a list of {kind.__name__} values, got {value!r}")
            value = tuple(kind(v) for v in value)
        elif isinstance(default, bool) or isinstance(value, bool):
            raise ConfigurationError(f"{name}.{key}: booleans are not accepted")
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int):
                raise ConfigurationError(f"{name}.{key} must be an integer, got {value!r}")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)):
                raise ConfigurationError(f"{name}.{key} must be a number, got {value!r}")
            value = float(value)
        kw[key] = value
    return cls(**kw)


def from_dict(doc: dict, seed: int | None = None) -> ExperimentConfig:
    """Build a validated config; ``seed`` (from the command line) overrides the file."""
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be a mapping")
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
    root_seed = seed if seed is not None else doc.get("seed")
    if root_seed is None:
        raise ConfigurationError("a root seed is required (config 'seed' or --seed)")
    if isinstance(root_seed, bool) or not isinstance(root_seed, int) or root_seed < 0:
        raise ConfigurationError(f"seed must be a non-negative integer, got {root_seed!r}")
    sections = {name: _coerce(cls, name, doc.get(name, {})) for name, cls in _SECTIONS.items()}
    return ExperimentConfig(seed=root_seed, **sections)


def load_config(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    if path is None:
        return from_dict({}, seed)
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(doc, seed)


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks that the section constructors cannot do alone."""
    xmin, xmax, ymin, ymax = cfg.scene.area
    if not (xmax > xmin and ymax > ymin):
        raise ConfigurationError(f"scene.area must have positive extent, got {cfg.scene.area}")
    if cfg.scene.n_scatterers < 1:
        raise ConfigurationError("scene.n_scatterers must be >= 1")
    d = cfg.data
    if min(d.n_contrastive, d.n_downstream, d.n_test) < 1:
        raise ConfigurationError("data sizes must be >= 1")
    if cfg.downstream.q_max < 1 or cfg.test.k_users < 1:
        raise ConfigurationError("downstream.q_max and test.k_users must be >= 1")
    if cfg.baselines.location_group_size < 1 or cfg.baselines.jomp_grid < 1:
        raise ConfigurationError("baseline sizes must be >= 1")
    if cfg.baselines.jomp_sparsity > cfg.system.pilot_len:
        raise ConfigurationError("baselines.jomp_sparsity cannot exceed system.pilot_len")
    for name in ("contrastive", "downstream", "joint"):
        if getattr(cfg, name).epochs < 0:
            raise ConfigurationError(f"{name}.epochs must be >= 0")
    floor = cfg.test.floor
    if not (floor == "median" or (isinstance(floor, (int, float)) and not isinstance(floor, bool)
                                  and not math.isnan(floor))):
        raise ConfigurationError(f"test.floor must be 'median' or a number, got {floor!r}")
    if any(n < 1 for n in cfg.sweep.labels) or any(L < 1 for L in cfg.sweep.pilot_len):
        raise ConfigurationError("sweep label counts and pilot lengths must be >= 1")
    if cfg.sweep.map_cells < 1:
        raise ConfigurationError("sweep.map_cells must be >= 1")
    bins = cfg.similarity.bins
    if len(bins) < 2 or any(hi <= lo for lo, hi in zip(bins, bins[1:])):
        raise ConfigurationError("similarity.bins must be increasing")
    # delegate the remaining checks to the library configs
    cfg.contrastive.training()
    cfg.joint.joint()
