"""Single-document experiment configuration with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from octcascade.nn_core import DiscriminatorConfig, GeneratorConfig, TisnConfig
from octcascade.tradseg import TradConfig
from octcascade.training import TrainConfig


class ConfigValidationError(ValueError):
    pass


@dataclass
class PhantomSection:
    width: int = 128
    height: int = 128
    n_train: int = 14
    n_test: int = 36
    train_severity: str = "severe"
    test_severity: str = "severe"
    scans_per_dataset: int = 5
    axial_spacing_um: float = 3.4
    lateral_spacing_um: float = 6.0


@dataclass
class DataprepSection:
    tile_width: int = 64
    shift_px: int = 50


@dataclass
class EvaluationSection:
    fit_fraction: float = 0.1
    fit_iterations: int = 2
    tisn_input: str = "gold"
    baselines: list = field(default_factory=lambda: ["TWOPS", "TWPS", "DLWOPS", "DLWPS"])


@dataclass
class SeedSection:
    phantom: int = 0
    training: int = 0


@dataclass
class ExperimentConfig:
    phantom: PhantomSection = field(default_factory=PhantomSection)
    dataprep: DataprepSection = field(default_factory=DataprepSection)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    tisn: TisnConfig = field(default_factory=TisnConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    training_cgan: TrainConfig = field(default_factory=lambda: TrainConfig(stage="cgan"))
    training_tisn: TrainConfig = field(default_factory=lambda: TrainConfig(stage="tisn"))
    tradseg: TradConfig = field(default_factory=TradConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seeds: SeedSection = field(default_factory=SeedSection)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every seed (phantoms, both training stages) derived from ``seed``."""
        cfg = from_dict(self.to_dict())
        cfg.seeds = SeedSection(phantom=seed, training=seed)
        cfg.training_cgan.seed = seed
        cfg.training_tisn.seed = seed
        return cfg


_TUPLE_FIELDS = {"dilation_rates", "percentile_clip"}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigValidationError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigValidationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in data.items():
        kwargs[k] = tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(f"{where}: {exc}") from exc
    return obj


_SECTIONS = {
    "phantom": PhantomSection, "dataprep": DataprepSection, "generator": GeneratorConfig,
    "tisn": TisnConfig, "discriminator": DiscriminatorConfig, "training_cgan": TrainConfig,
    "training_tisn": TrainConfig, "tradseg": TradConfig, "evaluation": EvaluationSection,
    "seeds": SeedSection,
}


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigValidationError("config must be a JSON object")
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigValidationError(f"unknown config sections {unknown}")
    sections = {}
    for name, cls in _SECTIONS.items():
        data = dict(doc.get(name, {}))
        if name in ("training_cgan", "training_tisn"):
            stage = "cgan" if name == "training_cgan" else "tisn"
            if data.setdefault("stage", stage) != stage:
                raise ConfigValidationError(f"{name}: stage must be {stage!r}")
        sections[name] = _build(cls, data, name)
    cfg = ExperimentConfig(**sections)
    ev = cfg.evaluation
    if ev.tisn_input not in ("gold", "generator"):
        raise ConfigValidationError("evaluation.tisn_input must be 'gold' or 'generator'")
    bad = [b for b in ev.baselines if b not in ("TWOPS", "TWPS", "DLWOPS", "DLWPS")]
    if bad:
        raise ConfigValidationError(f"evaluation.baselines: unknown {bad}")
    for sev in (cfg.phantom.train_severity, cfg.phantom.test_severity):
        if sev not in ("clean", "mild", "severe"):
            raise ConfigValidationError(f"phantom severity {sev!r} unknown")
    if cfg.phantom.width < cfg.dataprep.tile_width:
        raise ConfigValidationError("phantom.width must be at least dataprep.tile_width")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)


def schema_help() -> str:
    """Human-readable listing of every section and its keys with defaults."""
    lines = []
    default = ExperimentConfig().to_dict()
    for name in _SECTIONS:
        lines.append(f"  {name}:")
        for k, v in default[name].items():
            lines.append(f"    {k} (default {json.dumps(v)})")
    return "\n".join(lines)
