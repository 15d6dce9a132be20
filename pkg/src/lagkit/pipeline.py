"""From images to patch sets, and from patch sets to pyramid supervectors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ContractError
from .gmm import AdaptationConfig, DiagonalGmm, accumulate_stats, map_adapt
from .vectorize import Method, SupervectorBundle, concat_regions, vectorize

MAX_SIDE = 300
DEFAULT_PATCH_SIZES = (16, 24)
DEFAULT_STEP = 4
DEFAULT_PCA_DIM = 50


@dataclass(frozen=True, eq=False)
class PatchSet:
    """T local descriptors plus their normalized (row, col) window centres."""

    features: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        c = np.asarray(self.coords, dtype=np.float64)
        if f.ndim != 2:
            raise ContractError(f"features must be T x D, got {f.shape}")
        if c.shape != (f.shape[0], 2):
            raise ContractError(f"coords must be {f.shape[0]} x 2, got {c.shape}")
        if c.size and (c.min() < 0.0 or c.max() > 1.0):
            raise ContractError("coords must lie in [0, 1]")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "coords", c)

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def subset(self, mask) -> "PatchSet":
        return PatchSet(self.features[mask], self.coords[mask])

    @classmethod
    def empty(cls, D: int) -> "PatchSet":
        return cls(np.zeros((0, D)), np.zeros((0, 2)))


@dataclass(frozen=True)
class PyramidLayout:
    levels: tuple = (1, 2)

    def __post_init__(self):
        levels = tuple(int(g) for g in self.levels)
        if not levels or any(g < 1 for g in levels):
            raise ContractError("pyramid levels must be positive grid sizes")
        object.__setattr__(self, "levels", levels)

    @property
    def regions(self) -> int:
        return sum(g * g for g in self.levels)


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------


class DescriptorPlugin:
    """Maps a batch of square grayscale windows (N x s x s) to N x dim."""

    name = "base"
    dim = 0

    def __call__(self, windows: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights (n_out x n_in) at pixel centres."""
    R = np.zeros((n_out, n_in))
    for i in range(n_out):
        x = (i + 0.5) * n_in / n_out - 0.5
        x = min(max(x, 0.0), n_in - 1.0)
        lo = int(np.floor(x))
        hi = min(lo + 1, n_in - 1)
        t = x - lo
        R[i, lo] += 1.0 - t
        R[i, hi] += t
    return R


class RawPixelPlugin(DescriptorPlugin):
    """Contrast-normalized grayscale pixels on a fixed ``grid`` x ``grid`` raster.

    Windows of any size are linearly resampled to the grid so that every
    patch size yields the same descriptor length.
    """

    name = "raw-pixel"

    def __init__(self, grid: int = 16, eps: float = 1e-8):
        self.grid = grid
        self.eps = eps
        self.dim = grid * grid

    def __call__(self, windows):
        w = np.asarray(windows, dtype=np.float64)
        s = w.shape[-1]
        if s != self.grid:
            R = _resample_matrix(s, self.grid)
            w = np.einsum("ij,njk,lk->nil", R, w, R, optimize=True)
        flat = w.reshape(w.shape[0], -1)
        flat = flat - flat.mean(axis=1, keepdims=True)
        return flat / (flat.std(axis=1, keepdims=True) + self.eps)


def to_grayscale(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] >= 3:
            img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
        else:
            img = img[..., 0]
    if img.ndim != 2 or img.size == 0:
        raise ContractError(f"expected a non-empty H x W (x C) image, got shape {np.shape(image)}")
    return img


def limit_size(gray: np.ndarray, max_side: int = MAX_SIDE) -> np.ndarray:
    """Bilinear downscale so that max(H, W) <= max_side; never upscales."""
    H, W = gray.shape
    if max(H, W) <= max_side:
        return gray
    scale = max_side / max(H, W)
    size = (max(1, round(W * scale)), max(1, round(H * scale)))
    out = Image.fromarray(gray.astype(np.float32), mode="F").resize(size, Image.BILINEAR)
    return np.asarray(out, dtype=np.float64)


def extract_patches(
    image,
    patch_sizes: Sequence[int] = DEFAULT_PATCH_SIZES,
    step: int = DEFAULT_STEP,
    plugin: DescriptorPlugin | None = None,
    max_side: int = MAX_SIDE,
) -> PatchSet:
    """Dense square windows on a ``step`` grid, for each size in ``patch_sizes``."""
    plugin = plugin or RawPixelPlugin()
    gray = limit_size(to_grayscale(image), max_side)
    H, W = gray.shape
    if min(H, W) < min(patch_sizes):
        raise ContractError(
            f"image {H}x{W} is smaller than the smallest patch size {min(patch_sizes)}"
        )
    feats, coords = [], []
    for s in patch_sizes:
        if s > H or s > W:
            continue
        win = np.lib.stride_tricks.sliding_window_view(gray, (s, s))[::step, ::step]
        nr, nc = win.shape[:2]
        feats.append(plugin(win.reshape(nr * nc, s, s)))
        rows = (np.arange(nr) * step + s / 2.0) / H
        cols = (np.arange(nc) * step + s / 2.0) / W
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        coords.append(np.column_stack([rr.ravel(), cc.ravel()]))
    return PatchSet(np.vstack(feats), np.vstack(coords))


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray = field(default=None)

    @property
    def input_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def output_dim(self) -> int:
        return self.basis.shape[0]

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ContractError(f"expected N x {self.input_dim} input, got {X.shape}")
        return (X - self.mean) @ self.basis.T


def fit_pca(features, output_dim: int = DEFAULT_PCA_DIM) -> PcaModel:
    """Top ``output_dim`` eigenvectors of the sample covariance.

    Each basis row is sign-normalized so its largest-magnitude entry is
    positive, which makes the fit deterministic.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError(f"features must be N x D, got {X.shape}")
    N, D = X.shape
    if output_dim < 1 or output_dim > D:
        raise ContractError(f"output_dim must be in [1, {D}], got {output_dim}")
    if N <= output_dim:
        raise ContractError(f"PCA to {output_dim} dims needs more than {output_dim} samples, got {N}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (N - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:output_dim]
    basis = evecs[:, order].T
    pivot = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(output_dim), pivot])
    basis = basis * signs[:, None]
    return PcaModel(mean, basis, evals[order])


def apply_pca(model: PcaModel, patches: PatchSet) -> PatchSet:
    return PatchSet(model.transform(patches.features), patches.coords)


def append_coords(patches: PatchSet) -> PatchSet:
    return PatchSet(np.hstack([patches.features, patches.coords]), patches.coords)


# ---------------------------------------------------------------------------
# Spatial pyramid and supervectors
# ---------------------------------------------------------------------------


def cell_index(coords: np.ndarray, grid: int) -> np.ndarray:
    """Row-major cell id per patch; a coordinate on a boundary goes to the higher cell."""
    cells = np.minimum(np.floor(coords * grid).astype(int), grid - 1)
    return cells[:, 0] * grid + cells[:, 1]


def region_masks(coords: np.ndarray, layout: PyramidLayout) -> list:
    masks = []
    for g in layout.levels:
        idx = cell_index(coords, g)
        masks.extend(idx == c for c in range(g * g))
    return masks


def pyramid_partition(patches: PatchSet, layout: PyramidLayout | None = None) -> list:
    layout = layout or PyramidLayout()
    return [patches.subset(m) for m in region_masks(patches.coords, layout)]


def image_to_supervector(
    patches: PatchSet,
    ubm: DiagonalGmm,
    layout: PyramidLayout | None = None,
    cfg: AdaptationConfig | None = None,
    method=Method.LAG,
) -> SupervectorBundle:
    """Adapt ``ubm`` to each pyramid region and concatenate the supervectors."""
    return image_to_supervectors(patches, ubm, layout, cfg, [method])[Method.parse(method)]


def image_to_supervectors(
    patches: PatchSet,
    ubm: DiagonalGmm,
    layout: PyramidLayout | None = None,
    cfg: AdaptationConfig | None = None,
    methods: Sequence = tuple(Method),
) -> dict:
    """Like :func:`image_to_supervector` for several methods, adapting only once."""
    if patches.D != ubm.D:
        raise ContractError(f"patch dimension {patches.D} does not match UBM dimension {ubm.D}")
    methods = [Method.parse(m) for m in methods]
    per_method = {m: [] for m in methods}
    for region in pyramid_partition(patches, layout):
        adapted, _ = map_adapt(ubm, accumulate_stats(ubm, region.features), cfg)
        for m in methods:
            per_method[m].append(vectorize(ubm, adapted, m))
    return {m: concat_regions(v) for m, v in per_method.items()}

