"""Experiment configuration: strict YAML schema, defaults, invariants and a stable hash."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import yaml

from .models import CLASSIFIER_ARCHS, TrainHyper

ARTIFACT_ROOT_ENV = "POOD_BACKDOOR_ARTIFACT_ROOT"
ATTACK_MODES = ("fixed", "dynamic", "min-loss")
BASELINE_MODES = ("badnets-c", "badnets-d", "blend-c", "blend-d")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = ""
    pood_source: str = ""
    name: str = "dataset"
    shape: list[int] = field(default_factory=lambda: [32, 32, 3])
    resize: str | None = "bilinear"
    augmentation: list[str] = field(default_factory=lambda: ["crop", "hflip"])
    pood_target: str | None = None
    balance: str = "downsample"
    balance_ratio: float = 1.0
    foreign_source: str | None = None
    foreign_target: str | None = None


@dataclass
class AttackSection:
    mode: str = "fixed"
    eps_gen: float = 8 / 255
    eps_poison: float = 16 / 255
    ratio: float = 0.001
    train_scale: float = 2.0
    amplification: float = 2.0
    max_candidates: int | None = None


@dataclass
class ModelSection:
    arch: str = "resnet18"
    width: int | None = None
    epochs: int = 200
    lr: float = 0.1
    batch_size: int = 128
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    augment: bool = True

    def hyper(self, seed: int, augmentation: list[str]) -> TrainHyper:
        return TrainHyper(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            optimizer=self.optimizer,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            schedule=self.schedule,
            augmentation=list(augmentation) if self.augment else [],
            seed=seed,
        )


def _decoder_defaults():
    return ModelSection(arch="resnet18", epochs=30)


def _encoder_defaults():
    return ModelSection(arch="unet", width=16, epochs=20, lr=1e-3, batch_size=32, optimizer="adam", weight_decay=0.0, augment=False)


@dataclass
class DefenseSection:
    nc_steps: int = 300
    nc_lr: float = 0.1
    nc_init_cost: float = 1e-3
    nc_samples: int = 200
    prune_rates: list[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(10)])
    strip_perturbations: int = 64
    strip_probes: int = 100
    strip_alpha: float = 1.0
    sentinet_probes: int = 4


@dataclass
class BaselineSection:
    patch_size: int = 3
    position: str = "bottom-right"
    blend_alpha: float = 0.2


@dataclass
class SeedSection:
    data: int = 0
    plan: int = 0
    decoder: int = 0
    encoder: int = 0
    victim: int = 0


@dataclass
class ExperimentConfig:
    data: DataSection
    target_class: int | str
    attack: AttackSection = field(default_factory=AttackSection)
    decoder: ModelSection = field(default_factory=_decoder_defaults)
    encoder: ModelSection = field(default_factory=_encoder_defaults)
    victim: ModelSection = field(default_factory=ModelSection)
    defenses: DefenseSection = field(default_factory=DefenseSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    artifact_root: str = "artifacts"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self, sections: tuple[str, ...] | None = None) -> str:
        """SHA-256 of the canonical JSON of the chosen sections (all but ``artifact_root`` by default)."""
        d = self.to_dict()
        d.pop("artifact_root")
        if sections is not None:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    def replace(self, **dotted: Any) -> "ExperimentConfig":
        """Copy with ``section.field=value`` overrides, re-validated."""
        raw = self.to_dict()
        for key, value in dotted.items():
            node = raw
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_mapping(raw, check_paths=False)


SECTIONS = {
    "data": DataSection,
    "attack": AttackSection,
    "decoder": ModelSection,
    "encoder": ModelSection,
    "victim": ModelSection,
    "defenses": DefenseSection,
    "baselines": BaselineSection,
    "seeds": SeedSection,
}
SECTION_DEFAULTS = {"decoder": _decoder_defaults, "encoder": _encoder_defaults}


def parse_number(value: Any, where: str) -> float:
    """Accept numbers and fraction strings such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigError(f"{where}: expected a number, got {value!r}")


def _coerce_section(cls, raw: Any, where: str, strict: bool, default=None):
    obj = default() if default else cls()
    if raw is None:
        return obj
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        if key not in names:
            if strict:
                raise ConfigError(f"unknown key {where}.{key}")
            continue
        current = getattr(obj, key)
        ftype = str(names[key].type)
        path = f"{where}.{key}"
        if value is None:
            if "None" not in ftype:
                raise ConfigError(f"{path}: may not be null")
        elif ftype.startswith("float"):
            value = parse_number(value, path)
        elif ftype.startswith("int") and not ftype.startswith("int | str"):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
        elif ftype.startswith("list[float]"):
            value = [parse_number(v, path) for v in value]
        elif ftype.startswith("list"):
            if not isinstance(value, list):
                raise ConfigError(f"{path}: expected a list")
        elif ftype.startswith("bool"):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}: expected true or false")
        elif isinstance(current, str) and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        setattr(obj, key, value)
    return obj


def _is_path(source: str | None) -> bool:
    return bool(source) and not source.startswith(("synthetic:", "torchvision:"))


def check_invariants(cfg: ExperimentConfig, check_paths: bool = True) -> None:
    a = cfg.attack
    if a.eps_gen > a.eps_poison:
        raise ConfigError(f"attack.eps_gen ({a.eps_gen:.6g}) must not exceed attack.eps_poison ({a.eps_poison:.6g})")
    if a.eps_gen < 0:
        raise ConfigError("attack.eps_gen must be non-negative")
    if a.ratio < 0:
        raise ConfigError(f"attack.ratio must be >= 0, got {a.ratio}")
    if a.mode not in ATTACK_MODES + BASELINE_MODES:
        raise ConfigError(f"attack.mode must be one of {ATTACK_MODES + BASELINE_MODES}, got {a.mode!r}")
    if a.max_candidates is not None and a.max_candidates < 1:
        raise ConfigError("attack.max_candidates must be at least 1")
    if a.amplification <= 0:
        raise ConfigError("attack.amplification must be positive")
    if not cfg.data.source:
        raise ConfigError("data.source is required")
    if not cfg.data.pood_source:
        raise ConfigError("data.pood_source is required")
    if len(cfg.data.shape) != 3:
        raise ConfigError("data.shape must be [height, width, channels]")
    if cfg.data.balance not in ("none", "downsample"):
        raise ConfigError(f"data.balance must be 'none' or 'downsample', got {cfg.data.balance!r}")
    for name in ("decoder", "victim"):
        arch = getattr(cfg, name).arch
        if arch not in CLASSIFIER_ARCHS:
            raise ConfigError(f"{name}.arch must be one of {CLASSIFIER_ARCHS}, got {arch!r}")
    if cfg.encoder.arch != "unet":
        raise ConfigError(f"encoder.arch must be 'unet', got {cfg.encoder.arch!r}")
    for r in cfg.defenses.prune_rates:
        if not 0 <= r < 1:
            raise ConfigError(f"defenses.prune_rates: {r} outside [0, 1)")
    if check_paths:
        for key in ("source", "pood_source", "foreign_source"):
            src = getattr(cfg.data, key)
            if _is_path(src) and not Path(src).exists():
                raise ConfigError(f"data.{key}: path {src} does not exist")


def from_mapping(raw: dict, strict: bool = True, check_paths: bool = True) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = copy.deepcopy(raw)
    known = set(SECTIONS) | {"target_class", "artifact_root", "seed"}
    unknown = sorted(set(raw) - known)
    if unknown and strict:
        raise ConfigError(f"unknown key {unknown[0]}")
    if "target_class" not in raw:
        raise ConfigError("target_class is required")
    target = raw["target_class"]
    if isinstance(target, bool) or not isinstance(target, (int, str)):
        raise ConfigError(f"target_class: expected an integer or class name, got {target!r}")
    seeds_raw = raw.get("seeds")
    if "seed" in raw:
        base = raw["seed"]
        seeds_raw = {**{f.name: base for f in dataclasses.fields(SeedSection)}, **(seeds_raw or {})}
    sections = {
        name: _coerce_section(cls, seeds_raw if name == "seeds" else raw.get(name), name, strict, SECTION_DEFAULTS.get(name))
        for name, cls in SECTIONS.items()
    }
    root = os.environ.get(ARTIFACT_ROOT_ENV) or raw.get("artifact_root", "artifacts")
    cfg = ExperimentConfig(target_class=target, artifact_root=str(root), **sections)
    check_invariants(cfg, check_paths)
    return cfg


def validate_config(raw_text: str, strict: bool = True, check_paths: bool = True) -> ExperimentConfig:
    """Parse YAML (or JSON) text into a defaulted, invariant-checked config."""
    try:
        raw = yaml.safe_load(raw_text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return from_mapping(raw or {}, strict, check_paths)


def load_config(path: str | Path, strict: bool = True, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return validate_config(path.read_text(), strict, check_paths)


def preset_path(name: str) -> Path:
    p = Path(__file__).parent / "presets" / f"{name}.yaml"
    if not p.exists():
        raise ConfigError(f"no preset named {name!r}")
    return p


def load_preset(name: str = "desk", check_paths: bool = False) -> ExperimentConfig:
    """Bundled presets; dataset paths are checked when a stage loads them, not here."""
    return load_config(preset_path(name), check_paths=check_paths)


def dry_run(cfg: ExperimentConfig, n_train: int | None = None) -> dict:
    """Resolved values plus the derived poison count; loads the victim labels if ``n_train`` is not given."""
    from .poison import plan_size

    if n_train is None:
        from .pipeline import load_victim_split

        n_train = len(load_victim_split(cfg, "victim_train"))
    out = cfg.to_dict()
    out["config_hash"] = cfg.hash()
    out["n_train"] = n_train
    out["plan_size"] = plan_size(cfg.attack.ratio, n_train)
    return out
