"""Nuisance attribute projection and nearest-centroid classification.

The NAP here is the standard core: the removed subspace is spanned by the
leading eigenvectors of the within-class scatter matrix, found through the
N x N Gram matrix because supervectors are much longer than the number of
training items.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

DEFAULT_NAP_RANK = 32
# eigenvalues below this fraction of the largest are treated as zero scatter
_RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class NapModel:
    mean: np.ndarray
    nuisance_basis: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.nuisance_basis.shape[0]


def _encode_labels(labels, classes=None):
    labels = list(labels)
    if classes is None:
        classes = sorted(set(labels))
    classes = list(classes)
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        idx = np.array([lookup[l] for l in labels], dtype=int)
    except KeyError as e:
        raise ContractError(f"label {e.args[0]!r} is not in the class list") from None
    return classes, idx


def train_nap(vectors, labels, rank: int = DEFAULT_NAP_RANK) -> NapModel:
    """Fit a NAP removing up to ``rank`` within-class directions.

    Directions with (numerically) zero within-class scatter are never
    removed, so the effective rank can be smaller than requested.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ContractError("NAP needs an N x dim matrix with N >= 2")
    N, dim = X.shape
    if rank < 0 or rank >= dim:
        raise ContractError(f"NAP rank must be in [0, {dim}), got {rank}")
    if len(labels) != N:
        raise ContractError("one label per vector is required")
    mean = X.mean(axis=0)
    if rank == 0:
        return NapModel(mean, np.zeros((0, dim)))

    classes, idx = _encode_labels(labels)
    counts = np.bincount(idx, minlength=len(classes))
    if np.any(counts < 2):
        bad = [classes[i] for i in np.flatnonzero(counts < 2)]
        raise ContractError(f"NAP with rank > 0 needs >= 2 samples per class; singleton classes: {bad}")

    W = X.copy()
    for c in range(len(classes)):
        rows = idx == c
        W[rows] -= X[rows].mean(axis=0)

    gram = W @ W.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = evals > _RANK_TOL * max(evals[0], 0.0)
    keep[rank:] = False
    evals, evecs = evals[keep], evecs[:, keep]
    basis = (W.T @ evecs / np.sqrt(evals)).T
    # re-orthonormalize against round-off in the dual construction
    if basis.shape[0]:
        q, r = np.linalg.qr(basis.T)
        basis = (q * np.sign(np.diag(r))).T
    return NapModel(mean, basis, evals)


def nap_project(model: NapModel, v) -> np.ndarray:
    """(I - V^T V)(v - mean) for a vector or a batch of row vectors."""
    x = np.asarray(v, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ContractError(f"expected vectors of length {model.dim}, got {x.shape[-1]}")
    c = x - model.mean
    if model.rank:
        c = c - (c @ model.nuisance_basis.T) @ model.nuisance_basis
    return c


def l2_normalize(X, eps: float = 1e-12) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norm = np.linalg.norm(X, axis=-1, keepdims=True)
    return X / np.maximum(norm, eps)


@dataclass(frozen=True, eq=False)
class CentroidModel:
    classes: list
    centroids: np.ndarray
    normalize: bool = True


def train_nc(vectors, labels, classes=None, normalize: bool = True) -> CentroidModel:
    """Per-class means of the (optionally L2-normalized) vectors."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise ContractError("train_nc needs an N x dim matrix and N labels")
    classes, idx = _encode_labels(labels, classes)
    if normalize:
        X = l2_normalize(X)
    counts = np.bincount(idx, minlength=len(classes))
    if np.any(counts == 0):
        empty = [classes[i] for i in np.flatnonzero(counts == 0)]
        raise ContractError(f"classes without training vectors: {empty}")
    centroids = np.zeros((len(classes), X.shape[1]))
    np.add.at(centroids, idx, X)
    centroids /= counts[:, None]
    return CentroidModel(classes, centroids, normalize)


def predict_index(model: CentroidModel, vectors) -> np.ndarray:
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if X.shape[1] != model.centroids.shape[1]:
        raise ContractError("query dimension does not match the centroids")
    if model.normalize:
        X = l2_normalize(X)
    # exact squared distances; argmin keeps the first (lowest-index) minimum
    d = np.empty((X.shape[0], len(model.classes)))
    for c, centroid in enumerate(model.centroids):
        d[:, c] = ((X - centroid) ** 2).sum(axis=1)
    return np.argmin(d, axis=1)


def predict(model: CentroidModel, vector):
    """Label of the nearest centroid; ties go to the lowest class index."""
    return model.classes[int(predict_index(model, vector)[0])]


def predict_many(model: CentroidModel, vectors) -> list:
    return [model.classes[i] for i in predict_index(model, vectors)]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def confusion_counts(true_idx, pred_idx, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true_idx), np.asarray(pred_idx)), 1)
    return cm


def confusion_percent(counts: np.ndarray) -> np.ndarray:
    """Row-normalized percentages; rows with no samples stay zero."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(100.0 * counts, totals, out=np.zeros_like(counts), where=totals > 0)


@dataclass
class EvalReport:
    method: str
    classes: list
    accuracies: list
    confusion_counts: np.ndarray
    settings: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def confusion(self) -> np.ndarray:
        return confusion_percent(self.confusion_counts)

    def to_dict(self, digits: int = 6) -> dict:
        def r(x):
            return round(float(x), digits)

        return {
            "method": self.method,
            "classes": list(self.classes),
            "trials": len(self.accuracies),
            "accuracies": [r(a) for a in self.accuracies],
            "mean": r(self.mean),
            "std": r(self.std),
            "confusion": [[r(x) for x in row] for row in self.confusion],
            "confusion_counts": self.confusion_counts.tolist(),
            "settings": self.settings,
        }
