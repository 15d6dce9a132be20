"""Run configuration: defaults, JSON round-trip and field-level validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .gmm import AdaptationConfig, EmConfig
from .pipeline import PyramidLayout
from .vectorize import Method


@dataclass
class DescriptorSettings:
    patch_sizes: list = field(default_factory=lambda: [16, 24])
    step: int = 4
    max_side: int = 300
    pca_dim: int = 50
    append_coords: bool = True
    pca_max_samples: int = 200_000


@dataclass
class AdaptationSettings:
    relevance: float = 16.0
    adapt_weights: bool = True
    adapt_means: bool = True
    adapt_stds: bool = True
    variance_floor: float = 1e-4


@dataclass
class EmSettings:
    max_iterations: int = 100
    ll_tolerance: float = 1e-6
    ubm_max_patches: int = 200_000


@dataclass
class SplitSettings:
    train_per_class: int = 100
    trials: int = 10
    allow_scale_down: bool = False


@dataclass
class RunConfig:
    descriptor: DescriptorSettings = field(default_factory=DescriptorSettings)
    K: int = 512
    adaptation: AdaptationSettings = field(default_factory=AdaptationSettings)
    em: EmSettings = field(default_factory=EmSettings)
    layout: list = field(default_factory=lambda: [1, 2])
    method: str = "LAG"
    nap_rank: int = 32
    split: SplitSettings = field(default_factory=SplitSettings)
    seed: int = 0
    workers: int = 1

    def adaptation_config(self) -> AdaptationConfig:
        return AdaptationConfig(**dataclasses.asdict(self.adaptation))

    def em_config(self, seed: int) -> EmConfig:
        return EmConfig(
            max_iterations=self.em.max_iterations,
            ll_tolerance=self.em.ll_tolerance,
            seed=seed,
            variance_floor=self.adaptation.variance_floor,
        )

    def pyramid(self) -> PyramidLayout:
        return PyramidLayout(tuple(self.layout))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "RunConfig":
        """Copy with top-level or dotted (``"split.trials"``) overrides."""
        data = self.to_dict()
        for key, value in changes.items():
            _set_dotted(data, key.replace("__", "."), value)
        return RunConfig.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        errors = {}
        cfg = _build(cls, data, "", errors)
        if not errors:
            _validate(cfg, errors)
        if errors:
            raise ConfigError(errors)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError({"<json>": str(e)}) from None
        if not isinstance(data, dict):
            raise ConfigError({"<root>": "expected a JSON object"})
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())


def _set_dotted(data: dict, key: str, value):
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list,)}


def _build(cls, data, prefix, errors):
    if not isinstance(data, dict):
        errors[prefix.rstrip(".") or "<root>"] = "expected an object"
        return None
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            errors[prefix + key] = "unknown field"
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        path = prefix + name
        ftype = _resolve(f.type)
        if dataclasses.is_dataclass(ftype):
            kwargs[name] = _build(ftype, value, path + ".", errors)
            continue
        allowed = _SCALARS[ftype]
        ok = isinstance(value, allowed) and not (ftype is not bool and isinstance(value, bool))
        if not ok:
            errors[path] = f"expected {ftype.__name__}, got {type(value).__name__}"
            continue
        kwargs[name] = float(value) if ftype is float else value
    if any(k.startswith(prefix) for k in errors):
        return None
    return cls(**kwargs)


def _resolve(annotation):
    names = {
        "int": int,
        "float": float,
        "bool": bool,
        "str": str,
        "list": list,
        "DescriptorSettings": DescriptorSettings,
        "AdaptationSettings": AdaptationSettings,
        "EmSettings": EmSettings,
        "SplitSettings": SplitSettings,
    }
    return names[annotation] if isinstance(annotation, str) else annotation


def _positive_int_list(values):
    return isinstance(values, list) and values and all(
        isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in values
    )


def _validate(cfg: RunConfig, errors: dict):
    d = cfg.descriptor
    if not _positive_int_list(d.patch_sizes):
        errors["descriptor.patch_sizes"] = "must be a non-empty list of positive integers"
    if d.step < 1:
        errors["descriptor.step"] = "must be >= 1"
    if d.max_side < 1:
        errors["descriptor.max_side"] = "must be >= 1"
    if d.pca_dim < 1:
        errors["descriptor.pca_dim"] = "must be >= 1"
    if d.pca_max_samples < 2:
        errors["descriptor.pca_max_samples"] = "must be >= 2"
    if cfg.K < 1:
        errors["K"] = "must be >= 1"
    a = cfg.adaptation
    if not a.relevance > 0:
        errors["adaptation.relevance"] = "must be > 0"
    if not a.variance_floor > 0:
        errors["adaptation.variance_floor"] = "must be > 0"
    if cfg.em.max_iterations < 1:
        errors["em.max_iterations"] = "must be >= 1"
    if not cfg.em.ll_tolerance > 0:
        errors["em.ll_tolerance"] = "must be > 0"
    if cfg.em.ubm_max_patches < 1:
        errors["em.ubm_max_patches"] = "must be >= 1"
    if not _positive_int_list(cfg.layout):
        errors["layout"] = "must be a non-empty list of positive grid sizes"
    try:
        Method.parse(cfg.method)
    except ValueError as e:
        errors["method"] = str(e)
    if cfg.nap_rank < 0:
        errors["nap_rank"] = "must be >= 0"
    s = cfg.split
    if s.train_per_class < 1:
        errors["split.train_per_class"] = "must be >= 1"
    if s.trials < 1:
        errors["split.trials"] = "must be >= 1"
    if cfg.workers < 1:
        errors["workers"] = "must be >= 1"
