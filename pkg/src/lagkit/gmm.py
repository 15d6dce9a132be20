"""Diagonal-covariance Gaussian mixtures: UBM training and MAP adaptation.

A :class:`DiagonalGmm` stores standard deviations (not variances). The
universal background model (UBM) is an ordinary ``DiagonalGmm`` trained on
pooled patches with :func:`train_ubm_em`; per-item models come from
:func:`accumulate_stats` followed by :func:`map_adapt`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InsufficientDataError

LOG_2PI = math.log(2.0 * math.pi)

DEFAULT_RELEVANCE = 16.0
DEFAULT_VARIANCE_FLOOR = 1e-4
# below this soft count the per-component moments are 0/0
COUNT_EPSILON = 1e-10

_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class DiagonalGmm:
    """K-component mixture with diagonal covariances.

    Arrays are copied to read-only float64 on construction, so an instance
    can be shared between threads.
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        mu = np.array(self.means, dtype=np.float64)
        sd = np.array(self.stds, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ContractError("weights must be a non-empty vector")
        if mu.ndim != 2 or mu.shape[0] != w.size or mu.shape[1] < 1:
            raise ContractError(f"means must be {w.size}xD, got {mu.shape}")
        if sd.shape != mu.shape:
            raise ContractError(f"stds shape {sd.shape} != means shape {mu.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ContractError("weights must be nonnegative and sum to 1")
        if not np.all(sd > 0):
            raise ContractError("stds must be strictly positive")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sd))):
            raise ContractError("non-finite GMM parameters")
        for a in (w, mu, sd):
            a.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]

    @property
    def variances(self) -> np.ndarray:
        return self.stds**2

    def __eq__(self, other):
        if not isinstance(other, DiagonalGmm):
            return NotImplemented
        return (
            np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.stds, other.stds)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Zeroth, first and second order statistics of a patch set.

    ``mean_acc`` and ``sqmean_acc`` are already divided by the soft counts,
    i.e. they hold E_k(s) and E_k(s^2) rather than raw sums.
    """

    counts: np.ndarray
    mean_acc: np.ndarray
    sqmean_acc: np.ndarray
    total_patches: int

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def D(self) -> int:
        return self.mean_acc.shape[1]

    def merge(self, other: "SufficientStats") -> "SufficientStats":
        """Combine statistics of two disjoint patch sets (count-weighted)."""
        if other.mean_acc.shape != self.mean_acc.shape:
            raise ContractError("cannot merge statistics of different shapes")
        n = self.counts + other.counts
        mean = _weighted_merge(self.counts, self.mean_acc, other.counts, other.mean_acc, n)
        sq = _weighted_merge(self.counts, self.sqmean_acc, other.counts, other.sqmean_acc, n)
        return SufficientStats(n, mean, sq, self.total_patches + other.total_patches)


def _weighted_merge(n1, a1, n2, a2, n):
    out = a1.copy()
    live = n >= COUNT_EPSILON
    out[live] = (n1[live, None] * a1[live] + n2[live, None] * a2[live]) / n[live, None]
    return out


@dataclass(frozen=True)
class AdaptationConfig:
    relevance: float = DEFAULT_RELEVANCE
    adapt_weights: bool = True
    adapt_means: bool = True
    adapt_stds: bool = True
    variance_floor: float = DEFAULT_VARIANCE_FLOOR

    def __post_init__(self):
        if not self.relevance > 0:
            raise ContractError("relevance must be > 0")
        if not self.variance_floor > 0:
            raise ContractError("variance_floor must be > 0")


@dataclass(frozen=True)
class EmConfig:
    max_iterations: int = 100
    ll_tolerance: float = 1e-6
    seed: int = 0
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    init_subsample_per_component: int = 100
    kmeans_iterations: int = 10

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ContractError("max_iterations must be >= 1")
        if not self.ll_tolerance > 0:
            raise ContractError("ll_tolerance must be > 0")
        if not self.variance_floor > 0:
            raise ContractError("variance_floor must be > 0")


@dataclass
class EmResult:
    model: DiagonalGmm
    ll_trace: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.ll_trace)

    def __iter__(self):
        # allows ``model, trace = train_ubm_em(...)``
        return iter((self.model, self.ll_trace))


def _as_patches(model: DiagonalGmm, patches) -> np.ndarray:
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, model.D)
    if X.ndim != 2 or X.shape[1] != model.D:
        raise ContractError(f"expected patches with {model.D} columns, got shape {X.shape}")
    return X


def log_joint(model: DiagonalGmm, X: np.ndarray) -> np.ndarray:
    """log(w_k N(x_t; mu_k, sigma_k)) for every patch/component pair, T x K."""
    prec = 1.0 / model.variances
    const = (
        np.log(model.weights)
        - 0.5 * model.D * LOG_2PI
        - np.log(model.stds).sum(axis=1)
        - 0.5 * np.sum(model.means**2 * prec, axis=1)
    )
    out = np.empty((X.shape[0], model.K))
    for s in range(0, X.shape[0], _CHUNK):
        x = X[s : s + _CHUNK]
        out[s : s + _CHUNK] = x @ (model.means * prec).T - 0.5 * (x**2) @ prec.T + const
    return out


def _normalize_log(lj: np.ndarray):
    """Row-wise logsumexp and posteriors with max-subtraction."""
    m = lj.max(axis=1, keepdims=True)
    e = np.exp(lj - m)
    s = e.sum(axis=1, keepdims=True)
    return (m + np.log(s))[:, 0], e / s


def posteriors(model: DiagonalGmm, patches) -> np.ndarray:
    """Component posteriors for every row of ``patches`` (T x K)."""
    X = _as_patches(model, patches)
    if X.shape[0] == 0:
        return np.zeros((0, model.K))
    return _normalize_log(log_joint(model, X))[1]


def component_posteriors(model: DiagonalGmm, patch) -> np.ndarray:
    """Posterior Pr(k | s) of each component for a single patch."""
    x = np.asarray(patch, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.D:
        raise ContractError(f"patch must have length {model.D}, got shape {x.shape}")
    return posteriors(model, x[None, :])[0]


def log_likelihood(model: DiagonalGmm, patches) -> float:
    X = _as_patches(model, patches)
    if X.shape[0] == 0:
        return 0.0
    return float(_normalize_log(log_joint(model, X))[0].sum())


def accumulate_stats(model: DiagonalGmm, patches) -> SufficientStats:
    """Soft counts and normalized first/second moments against ``model``.

    Components whose count falls below ``COUNT_EPSILON`` get the model's own
    moments (mu, sigma^2 + mu^2) so that later blending stays well defined.
    """
    X = _as_patches(model, patches)
    K, D = model.K, model.D
    counts = np.zeros(K)
    first = np.zeros((K, D))
    second = np.zeros((K, D))
    if X.shape[0]:
        post = posteriors(model, X)
        counts = post.sum(axis=0)
        first = post.T @ X
        second = post.T @ (X**2)
    mean_acc = model.means.copy()
    sqmean_acc = model.variances + model.means**2
    live = counts >= COUNT_EPSILON
    mean_acc[live] = first[live] / counts[live, None]
    sqmean_acc[live] = second[live] / counts[live, None]
    return SufficientStats(counts, mean_acc, sqmean_acc, X.shape[0])


def map_adapt(ubm: DiagonalGmm, stats: SufficientStats, cfg: AdaptationConfig | None = None):
    """One-iteration MAP adaptation of ``ubm`` towards ``stats``.

    Returns ``(adapted_model, {"alphas": ..., "gamma": ...})``. Components
    with alpha == 0 keep the UBM parameters bit for bit.
    """
    cfg = cfg or AdaptationConfig()
    if stats.counts.shape != (ubm.K,) or stats.mean_acc.shape != ubm.means.shape:
        raise ContractError("statistics do not match the UBM's K and D")
    n = stats.counts
    alphas = n / (n + cfg.relevance)
    a = alphas[:, None]
    T = stats.total_patches

    weights, gamma = ubm.weights, 1.0
    if cfg.adapt_weights and T > 0:
        raw = alphas * n / T + (1.0 - alphas) * ubm.weights
        gamma = 1.0 / raw.sum()
        weights = raw * gamma

    means = ubm.means
    if cfg.adapt_means:
        means = ubm.means + a * (stats.mean_acc - ubm.means)

    stds = ubm.stds
    if cfg.adapt_stds:
        # algebraically a*E2 + (1-a)(sb^2 + mb^2) - mu^2, rearranged so a == 0
        # reproduces the UBM variance exactly
        shift = means - ubm.means
        var = (
            ubm.variances
            + a * (stats.sqmean_acc - ubm.variances - ubm.means**2)
            - shift * (2.0 * ubm.means + shift)
        )
        var = np.maximum(var, cfg.variance_floor)
        stds = np.where(a > 0, np.sqrt(var), ubm.stds)

    model = DiagonalGmm(weights, means, stds)
    return model, {"alphas": alphas, "gamma": float(gamma)}


def adapt(ubm: DiagonalGmm, patches, cfg: AdaptationConfig | None = None) -> DiagonalGmm:
    """Convenience wrapper: statistics then MAP adaptation."""
    return map_adapt(ubm, accumulate_stats(ubm, patches), cfg)[0]


# ---------------------------------------------------------------------------
# UBM training
# ---------------------------------------------------------------------------


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[k] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[k]) ** 2, axis=1))
    return centers


def _nearest(X, centers):
    d = (X**2).sum(1)[:, None] - 2.0 * X @ centers.T + (centers**2).sum(1)[None, :]
    return np.argmin(d, axis=1)


def _init_from_kmeans(X: np.ndarray, K: int, cfg: EmConfig) -> np.ndarray:
    """Hard responsibilities from seeded k-means++ on a subsample."""
    rng = np.random.default_rng(cfg.seed)
    n_sub = min(X.shape[0], cfg.init_subsample_per_component * K)
    sub = X[np.sort(rng.choice(X.shape[0], n_sub, replace=False))] if n_sub < X.shape[0] else X
    centers = _kmeans_pp(sub, K, rng)
    for _ in range(cfg.kmeans_iterations):
        lab = _nearest(sub, centers)
        for k in range(K):
            members = sub[lab == k]
            if len(members):
                centers[k] = members.mean(axis=0)
    lab = _nearest(X, centers)
    resp = np.zeros((X.shape[0], K))
    resp[np.arange(X.shape[0]), lab] = 1.0
    return resp


def _m_step(X, resp, floor, previous: DiagonalGmm | None):
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = (resp.T @ X) / nk[:, None]
    var = (resp.T @ (X**2)) / nk[:, None] - means**2
    var = np.maximum(var, floor)
    dead = nk < 1e-8
    if previous is not None and np.any(dead):
        means[dead] = previous.means[dead]
        var[dead] = previous.variances[dead]
    weights = nk / nk.sum()
    return DiagonalGmm(weights, means, np.sqrt(var))


def train_ubm_em(patches, K: int, cfg: EmConfig | None = None) -> EmResult:
    """Fit a K-component diagonal GMM to pooled patches by EM.

    The returned :class:`EmResult` unpacks as ``(model, ll_trace)`` where
    ``ll_trace[i]`` is the total log-likelihood after the i-th M-step.
    """
    cfg = cfg or EmConfig()
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ContractError(f"patches must be a T x D matrix, got shape {X.shape}")
    if K < 1:
        raise ContractError("K must be positive")
    if X.shape[0] < K:
        raise InsufficientDataError(
            f"insufficient data for K components (T={X.shape[0]}, K={K})"
        )

    resp = _init_from_kmeans(X, K, cfg)
    model = None
    trace = []
    for _ in range(cfg.max_iterations):
        model = _m_step(X, resp, cfg.variance_floor, model)
        ll_rows, resp = _normalize_log(log_joint(model, X))
        ll = float(ll_rows.sum())
        trace.append(ll)
        if len(trace) > 1 and (ll - trace[-2]) < cfg.ll_tolerance * abs(trace[-2]):
            break
    return EmResult(model, trace)
