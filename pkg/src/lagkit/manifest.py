"""Dataset manifests: labeled items pointing at patch files or images.

``features`` records what the referenced patch files hold: ``"raw"``
descriptors still need PCA and coordinate appending, ``"final"`` ones are
used as they are.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, LagkitError
from .io import atomic_write_text

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm"}
FEATURE_KINDS = ("raw", "final")


class MissingFileError(LagkitError, FileNotFoundError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    label: str
    path: str

    @property
    def is_image(self) -> bool:
        return Path(self.path).suffix.lower() in IMAGE_SUFFIXES


@dataclass
class DatasetManifest:
    root: Path
    entries: list
    classes: list
    features: str = "raw"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ContractError("manifest item ids must be unique")
        unknown = sorted({e.label for e in self.entries} - set(self.classes))
        if unknown:
            raise ContractError(f"labels not in the class list: {unknown}")
        if self.features not in FEATURE_KINDS:
            raise ContractError(f"features must be one of {FEATURE_KINDS}")

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def check_files(self):
        missing = [str(self.resolve(e)) for e in self.entries if not self.resolve(e).exists()]
        if missing:
            more = f" (+{len(missing) - 5} more)" if len(missing) > 5 else ""
            raise MissingFileError(f"missing files: {', '.join(missing[:5])}{more}")

    def labels(self) -> list:
        return [e.label for e in self.entries]

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "features": self.features,
            "entries": [{"id": e.id, "label": e.label, "path": e.path} for e in self.entries],
            "meta": self.meta,
        }

    def save(self, path):
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path, check: bool = True) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"manifest not found: {path}")
        try:
            data = json.loads(path.read_text())
            entries = [ManifestEntry(str(e["id"]), str(e["label"]), str(e["path"])) for e in data["entries"]]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ContractError(f"malformed manifest {path}: {e!r}") from None
        classes = data.get("classes") or sorted({e.label for e in entries})
        m = cls(path.parent, entries, list(classes), data.get("features", "raw"), data.get("meta", {}))
        if check:
            m.check_files()
        return m


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "F", "I"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64)
