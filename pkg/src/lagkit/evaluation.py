"""Random-split evaluation: UBM -> supervectors -> NAP -> nearest centroid.

Everything fitted inside a trial (PCA, UBM, NAP, centroids) sees training
items only. Trial ``t`` uses seed ``cfg.seed + t`` for its split, its
subsampling and its UBM initialization.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .classify import (
    EvalReport,
    confusion_counts,
    nap_project,
    predict_index,
    train_nap,
    train_nc,
)
from .config import RunConfig
from .errors import InsufficientDataError
from .gmm import train_ubm_em
from .io import load_patches
from .manifest import DatasetManifest, read_image
from .pipeline import (
    PatchSet,
    append_coords,
    apply_pca,
    extract_patches,
    fit_pca,
    image_to_supervectors,
)
from .vectorize import Method

log = logging.getLogger(__name__)

THREADS_ENV = "LAGKIT_THREADS"


def worker_budget(requested: int | None = None) -> int:
    """Requested worker count, capped by $LAGKIT_THREADS when set."""
    n = max(1, int(requested or 1))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, env)
    return n


@dataclass
class Dataset:
    """Patch sets in memory, with labels and a fixed class order."""

    ids: list
    labels: list
    classes: list
    patches: list
    features: str = "final"

    def __post_init__(self):
        lookup = {c: i for i, c in enumerate(self.classes)}
        self.label_idx = np.array([lookup[l] for l in self.labels], dtype=int)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, cfg: RunConfig | None = None) -> "Dataset":
        cfg = cfg or RunConfig()
        d = cfg.descriptor
        patches = []
        for e in manifest.entries:
            path = manifest.resolve(e)
            if e.is_image:
                patches.append(
                    extract_patches(read_image(path), d.patch_sizes, d.step, max_side=d.max_side)
                )
            else:
                patches.append(load_patches(path))
        kind = "raw" if any(e.is_image for e in manifest.entries) else manifest.features
        return cls([e.id for e in manifest.entries], manifest.labels(), list(manifest.classes), patches, kind)

    @classmethod
    def from_items(cls, items, classes=None, features: str = "final") -> "Dataset":
        items = list(items)
        ids = [i for i, _, _ in items]
        labels = [l for _, l, _ in items]
        classes = list(classes) if classes is not None else sorted(set(labels))
        return cls(ids, labels, classes, [p for _, _, p in items], features)

    def replace_patches(self, index_to_patches: dict) -> "Dataset":
        patches = [index_to_patches.get(i, p) for i, p in enumerate(self.patches)]
        return Dataset(self.ids, self.labels, self.classes, patches, self.features)


@dataclass
class TrialArtifacts:
    trial: int
    seed: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    ubm: object
    ll_trace: list
    pca: object = None
    naps: dict = field(default_factory=dict)
    centroids: dict = field(default_factory=dict)


@dataclass
class Evaluation:
    reports: dict
    artifacts: list = field(default_factory=list)

    def __getitem__(self, method):
        return self.reports[Method.parse(method)]


def resolve_train_per_class(dataset: Dataset, cfg: RunConfig) -> int:
    counts = np.bincount(dataset.label_idx, minlength=len(dataset.classes))
    want = cfg.split.train_per_class
    smallest = int(counts.min()) if counts.size else 0
    if smallest > want:
        return want
    if not cfg.split.allow_scale_down:
        short = [c for c, n in zip(dataset.classes, counts) if n <= want]
        raise InsufficientDataError(
            f"classes {short} have <= {want} items; need more than train_per_class "
            "(enable split.allow_scale_down for small datasets)"
        )
    scaled = max(1, smallest // 2)
    log.warning("scaling train_per_class down from %d to %d (smallest class has %d items)", want, scaled, smallest)
    return scaled


def split_indices(label_idx: np.ndarray, n_classes: int, n_train: int, rng: np.random.Generator):
    train, test = [], []
    for c in range(n_classes):
        members = np.flatnonzero(label_idx == c)
        perm = rng.permutation(members)
        train.append(perm[:n_train])
        test.append(perm[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def _subsample(X: np.ndarray, limit: int, rng: np.random.Generator) -> np.ndarray:
    if X.shape[0] <= limit:
        return X
    return X[np.sort(rng.choice(X.shape[0], limit, replace=False))]


def _featurize(dataset: Dataset, train_idx, cfg: RunConfig, rng):
    """Final descriptors for every item; PCA is fitted on training patches only."""
    if dataset.features == "final":
        return dataset.patches, None
    d = cfg.descriptor
    train_feats = np.vstack([dataset.patches[i].features for i in train_idx])
    pca = None
    items = dataset.patches
    if d.pca_dim < train_feats.shape[1]:
        pca = fit_pca(_subsample(train_feats, d.pca_max_samples, rng), d.pca_dim)
        items = [apply_pca(pca, p) for p in items]
    if d.append_coords:
        items = [append_coords(p) for p in items]
    return items, pca


def run_trial(dataset: Dataset, cfg: RunConfig, methods, trial: int, n_train: int, workers: int = 1):
    """One random split. Returns ``({method: (true_idx, pred_idx)}, TrialArtifacts)``."""
    seed = cfg.seed + trial
    rng = np.random.default_rng(seed)
    train_idx, test_idx = split_indices(dataset.label_idx, len(dataset.classes), n_train, rng)
    items, pca = _featurize(dataset, train_idx, cfg, rng)

    pooled = np.vstack([items[i].features for i in train_idx])
    pooled = _subsample(pooled, cfg.em.ubm_max_patches, rng)
    ubm, trace = train_ubm_em(pooled, cfg.K, cfg.em_config(seed))

    adapt_cfg = cfg.adaptation_config()
    layout = cfg.pyramid()

    def encode(p: PatchSet):
        return image_to_supervectors(p, ubm, layout, adapt_cfg, methods)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vectors = list(pool.map(encode, items))
    else:
        vectors = [encode(p) for p in items]

    art = TrialArtifacts(trial, seed, train_idx, test_idx, ubm, trace, pca)
    results = {}
    train_labels = [dataset.labels[i] for i in train_idx]
    for m in methods:
        V = np.vstack([v[m].values for v in vectors])
        nap = None
        if len(train_idx) > 1:
            # within-class scatter needs two items per class
            rank = min(cfg.nap_rank, V.shape[1] - 1) if n_train > 1 else 0
            nap = train_nap(V[train_idx], train_labels, rank)
        project = (lambda X: nap_project(nap, X)) if nap is not None else (lambda X: X)
        nc = train_nc(project(V[train_idx]), train_labels, classes=dataset.classes)
        pred = predict_index(nc, project(V[test_idx])) if len(test_idx) else np.zeros(0, dtype=int)
        results[m] = (dataset.label_idx[test_idx], pred)
        art.naps[m] = nap
        art.centroids[m] = nc
    return results, art


def evaluate(
    dataset: Dataset,
    cfg: RunConfig | None = None,
    methods=None,
    workers: int | None = None,
    keep_artifacts: bool = False,
) -> Evaluation:
    """Repeated random-split evaluation of one or more vectorization methods."""
    cfg = cfg or RunConfig()
    methods = [Method.parse(m) for m in (methods or [cfg.method])]
    workers = worker_budget(workers if workers is not None else cfg.workers)
    n_train = resolve_train_per_class(dataset, cfg)
    n_classes = len(dataset.classes)

    accuracies = {m: [] for m in methods}
    counts = {m: np.zeros((n_classes, n_classes), dtype=np.int64) for m in methods}
    artifacts = []
    for t in range(cfg.split.trials):
        results, art = run_trial(dataset, cfg, methods, t, n_train, workers)
        for m, (true, pred) in results.items():
            accuracies[m].append(100.0 * float(np.mean(true == pred)) if len(true) else 100.0)
            counts[m] += confusion_counts(true, pred, n_classes)
        if keep_artifacts:
            artifacts.append(art)
        log.info("trial %d: %s", t, {m.value: accuracies[m][-1] for m in methods})

    settings = {
        "K": cfg.K,
        "trials": cfg.split.trials,
        "train_per_class": n_train,
        "seed": cfg.seed,
        "nap_rank": cfg.nap_rank,
        "relevance": cfg.adaptation.relevance,
        "layout": list(cfg.layout),
    }
    reports = {
        m: EvalReport(m.value, list(dataset.classes), accuracies[m], counts[m], dict(settings, method=m.value))
        for m in methods
    }
    return Evaluation(reports, artifacts)


FULL_K_GRID = (32, 64, 128, 256, 512, 1024)
DESK_K_GRID = (8, 16, 32)


def sweep_k(dataset: Dataset, cfg: RunConfig | None = None, ks=DESK_K_GRID, methods=tuple(Method), workers=None) -> dict:
    """``{K: {method: EvalReport}}`` over a grid of mixture sizes."""
    cfg = cfg or RunConfig()
    table = {}
    for K in ks:
        ev = evaluate(dataset, cfg.replace(K=int(K)), methods, workers)
        table[int(K)] = ev.reports
    return table
