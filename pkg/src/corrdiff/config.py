"""Run configuration: one YAML file of sections, named presets, and ``--set`` overrides."""

from __future__ import annotations

import copy
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_points: int = 64
    n_subjects: int = 500
    test_subjects: int = 100
    radii: tuple[float, float, float] = (1.0, 0.6, 0.45)
    radius_jitter: float = 0.04
    atrophy_indices: list[int] | None = None
    atrophy_depth: float = 0.15
    depth_jitter: float = 0.2
    surface_noise: float = 0.01
    seed: int = 0
    test_seed: int = 1


@dataclass
class NetworkSection:
    widths: tuple[int, ...] = (32, 64, 128)
    k: int = 16
    use_correspondence_embeddings: bool = True
    mask_all_true: bool = False
    conditional: bool = True
    activation: str = "relu"
    time_dim: int = 64
    seed: int = 0


@dataclass
class DiffusionSection:
    schedule: str = "scaled-linear"
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.15


@dataclass
class TrainSection:
    kind: str = "diffusion"
    data: str = ""
    epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.995
    seed: int = 0
    disable_correspondence: bool = False
    mask_all_true: bool = False
    checkpoint_every_epochs: int = 10
    pca_components: int = 16


@dataclass
class ClassifierSection:
    widths: tuple[int, ...] = (32, 64)
    noise_aware: bool = False
    time_dim: int = 32
    activation: str = "relu"
    epochs: int = 60
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0


@dataclass
class SampleSection:
    model: str = ""
    count: int = 200
    seed: int = 1000
    labels: str = "balanced"
    use_ema: bool = True
    batch_size: int = 128


@dataclass
class EvaluateSection:
    real: str = ""
    gen: dict[str, str] = field(default_factory=dict)
    k: int = 7
    kinds: tuple[str, ...] = ("CD", "EMD", "L2")
    real_reference: bool = True
    classifier: str = ""


@dataclass
class CounterfactualSection:
    model: str = ""
    classifier: str = ""
    input: str = ""
    source_label: int = 0
    target_label: int = 1
    classifier_scale: float = 60.0
    similarity_scale: float = 50.0
    t_start: int = 10
    seed: int = 0
    max_inputs: int = 0
    use_ema: bool = True


@dataclass
class PlotSection:
    inputs: list[str] = field(default_factory=list)
    reference: str = ""
    difference: list[str] = field(default_factory=list)
    max_shapes: int = 4
    size: int = 240


SECTIONS: dict[str, type] = {
    "data": DataSection,
    "network": NetworkSection,
    "diffusion": DiffusionSection,
    "train": TrainSection,
    "classifier": ClassifierSection,
    "sample": SampleSection,
    "evaluate": EvaluateSection,
    "counterfactual": CounterfactualSection,
    "plot": PlotSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    sample: SampleSection = field(default_factory=SampleSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    counterfactual: CounterfactualSection = field(default_factory=CounterfactualSection)
    plot: PlotSection = field(default_factory=PlotSection)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    def dump(self, path: str | Path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")


# Desk scale is the default. "full" mirrors the published setting; the
# sweep presets cover schedule kind x attention neighbourhood at N=128 so
# every k in {10, 50, 100} is valid.
_SWEEP_BASE = {
    "data": {"n_points": 128, "n_subjects": 100, "test_subjects": 40},
    "network": {"widths": [16, 32, 64], "time_dim": 32},
    "train": {"epochs": 40},
    "sample": {"count": 80},
}

PRESETS: dict[str, dict] = {
    "desk": {},
    "full": {
        "data": {"n_points": 512, "n_subjects": 370, "test_subjects": 93},
        "network": {"widths": [64, 128, 256], "k": 50},
        "diffusion": {"T": 1000, "beta_end": 0.02},
        "train": {"epochs": 5000, "lr": 2e-4, "ema_decay": 0.999, "pca_components": 128},
    },
}
for _kind, _tag in (("scaled-linear", "linear"), ("sigmoid", "sigmoid")):
    for _k in (10, 50, 100):
        _p = copy.deepcopy(_SWEEP_BASE)
        _p["diffusion"] = {"schedule": _kind, "beta_end": 0.15 if _kind == "scaled-linear" else 0.1}
        _p["network"]["k"] = _k
        PRESETS[f"sweep-{_tag}-knn{_k}"] = _p


def _coerce(value: Any, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        elem = args[0]
        return tuple(_coerce(v, elem, where) for v in value)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, args[0], where) for v in value]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return {str(k): _coerce(v, args[1], where) for k, v in value.items()}
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if value is None:
            return ""
        return str(value)
    return value


def _apply(cfg: RunConfig, updates: dict, source: str):
    if not isinstance(updates, dict):
        raise ConfigError(f"{source}: top level must be a mapping of sections")
    for sec_name, values in updates.items():
        if sec_name not in SECTIONS:
            raise ConfigError(f"{source}: unknown section {sec_name!r}")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"{source}: section {sec_name!r} must be a mapping")
        sec = getattr(cfg, sec_name)
        hints = typing.get_type_hints(type(sec))
        for key, value in values.items():
            if key not in hints:
                raise ConfigError(f"{source}: unknown key {sec_name}.{key}")
            setattr(sec, key, _coerce(value, hints[key], f"{source}: {sec_name}.{key}"))


def parse_override(item: str) -> dict:
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    path, raw = item.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key {path!r} must be section.key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from exc
    return {parts[0]: {parts[1]: value}}


def load_config(path: str | Path | None = None, overrides: list[str] = (), preset: str | None = None) -> RunConfig:
    """Defaults, then ``preset``, then the YAML file at ``path``, then overrides."""
    cfg = RunConfig()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}")
        _apply(cfg, copy.deepcopy(PRESETS[preset]), f"preset {preset}")
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: malformed YAML: {exc}") from exc
        _apply(cfg, data, str(p))
    for item in overrides:
        _apply(cfg, parse_override(item), f"--set {item}")
    return cfg
