"""Seeded synthetic patch datasets standing in for a real image corpus.

Every class owns a ground-truth diagonal GMM. Class means and log-stds are
perturbations of a shared base mixture scaled by ``separation``, so
``separation = 0`` makes the classes indistinguishable. Each item draws its
own mixture weights around the class weights and a global feature offset,
which gives within-class nuisance variation for NAP to remove.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .gmm import DiagonalGmm
from .io import save_patches
from .manifest import DatasetManifest, ManifestEntry
from .pipeline import PatchSet


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 5
    K_gen: int = 4
    D: int = 8
    separation: float = 0.2
    patches_per_item: int = 200
    items_per_class: int = 60
    seed: int = 0
    base_spread: float = 2.0
    mean_shift: float = 0.35
    log_std_shift: float = 0.25
    weight_concentration: float = 20.0
    item_offset: float = 0.3

    def __post_init__(self):
        errors = {}
        for name in ("classes", "K_gen", "D", "patches_per_item", "items_per_class"):
            if getattr(self, name) < 1:
                errors[name] = "must be >= 1"
        if self.separation < 0:
            errors["separation"] = "must be >= 0"
        if not self.weight_concentration > 0:
            errors["weight_concentration"] = "must be > 0"
        for name in ("base_spread", "mean_shift", "log_std_shift", "item_offset"):
            if getattr(self, name) < 0:
                errors[name] = "must be >= 0"
        if errors:
            raise ConfigError(errors)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def class_models(spec: SyntheticSpec) -> list:
    """Ground-truth generating GMM of every class."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    shape = (spec.K_gen, spec.D)
    base_means = rng.normal(0.0, spec.base_spread, shape)
    base_log_std = rng.normal(0.0, 0.2, shape)
    base_weights = rng.dirichlet(np.full(spec.K_gen, 5.0))
    models = []
    for _ in range(spec.classes):
        means = base_means + spec.separation * spec.mean_shift * rng.standard_normal(shape)
        log_std = base_log_std + spec.separation * spec.log_std_shift * rng.standard_normal(shape)
        models.append(DiagonalGmm(base_weights, means, np.exp(log_std)))
    return models


def sample_item(model: DiagonalGmm, spec: SyntheticSpec, rng: np.random.Generator) -> PatchSet:
    weights = rng.dirichlet(spec.weight_concentration * model.weights)
    offset = rng.normal(0.0, spec.item_offset, spec.D)
    comp = rng.choice(model.K, size=spec.patches_per_item, p=weights)
    noise = rng.standard_normal((spec.patches_per_item, spec.D))
    features = model.means[comp] + offset + model.stds[comp] * noise
    coords = rng.random((spec.patches_per_item, 2))
    return PatchSet(features, coords)


def class_name(c: int) -> str:
    return f"class{c:02d}"


def synthesize(spec: SyntheticSpec):
    """In-memory dataset: yields ``(item_id, label, PatchSet)`` in manifest order."""
    models = class_models(spec)
    for c, model in enumerate(models):
        for i in range(spec.items_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, c, i]))
            yield f"{class_name(c)}_{i:04d}", class_name(c), sample_item(model, spec, rng)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write one LAGP file per item plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    entries = []
    for item_id, label, patches in synthesize(spec):
        rel = f"patches/{item_id}.lagp"
        save_patches(out / rel, patches)
        entries.append(ManifestEntry(item_id, label, rel))
    manifest = DatasetManifest(
        out,
        entries,
        [class_name(c) for c in range(spec.classes)],
        features="final",
        meta={"synthetic": spec.to_dict()},
    )
    manifest.save(out / "manifest.json")
    return manifest
