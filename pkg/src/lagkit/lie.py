"""Gaussians as upper-triangular affine transforms and their matrix logarithm.

A diagonal Gaussian N(mu, diag(sigma^2)) corresponds to the affine map
x -> sigma * x + mu, i.e. the matrix [[diag(sigma), mu], [0, 1]]. Because
the dimensions decouple, the logarithm of ``anchor^-1 @ point`` reduces to
one closed-form pair (log-scale, translation) per dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

# relative |sigma - sigma_bar| / sigma_bar below which the limit form is used
SWITCH_EPSILON = 1e-8


@dataclass(frozen=True, eq=False)
class UtdatDiag:
    """Diagonal UTDAT: ``scale`` is the std per dimension, ``shift`` the mean."""

    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        scale = np.asarray(self.scale, dtype=np.float64)
        shift = np.asarray(self.shift, dtype=np.float64)
        if scale.shape != shift.shape:
            raise ContractError(f"scale {scale.shape} and shift {shift.shape} differ")
        if not np.all(scale > 0):
            raise ContractError("UTDAT scale entries must be strictly positive")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "shift", shift)

    @property
    def D(self) -> int:
        return self.scale.shape[-1]

    def as_matrix(self) -> np.ndarray:
        """Dense (D+1) x (D+1) matrix; only meaningful for 1-d arrays."""
        D = self.D
        M = np.eye(D + 1)
        M[np.arange(D), np.arange(D)] = self.scale
        M[:D, D] = self.shift
        return M


@dataclass(frozen=True)
class TangentVector:
    log_scale: np.ndarray
    translation: np.ndarray

    @property
    def D(self) -> int:
        return self.log_scale.shape[-1]

    def flatten(self) -> np.ndarray:
        """(log_scale..., translation...) along the last axis."""
        return np.concatenate([self.log_scale, self.translation], axis=-1)


def to_utdat(means, stds) -> UtdatDiag:
    return UtdatDiag(scale=stds, shift=means)


def from_utdat(u: UtdatDiag):
    """Inverse of :func:`to_utdat`: returns ``(means, stds)``."""
    return u.shift.copy(), u.scale.copy()


def tangent_arrays(anchor_means, anchor_stds, means, stds):
    """Vectorized core of :func:`log_utdat_scalar` on broadcastable arrays.

    Returns ``(log_scale, translation)``.
    """
    mb = np.asarray(anchor_means, dtype=np.float64)
    sb = np.asarray(anchor_stds, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    sd = np.asarray(stds, dtype=np.float64)
    # difference of logs keeps log_scale exactly antisymmetric and exactly 0 at the anchor
    log_scale = np.log(sd) - np.log(sb)
    rel = (sd - sb) / sb
    far = np.abs(rel) > SWITCH_EPSILON
    # log(s/sb)/(s - sb) == log1p(rel) / (rel * sb); log1p avoids cancellation
    safe = np.where(far, rel, 1.0)
    # near the anchor: Taylor series of log1p(x)/x, exactly 1 at x == 0
    ratio = np.where(far, np.log1p(safe) / safe, 1.0 - rel / 2.0 + rel * rel / 3.0)
    translation = (mu - mb) * ratio / sb
    return log_scale, translation


def log_utdat_scalar(anchor: UtdatDiag, point: UtdatDiag) -> TangentVector:
    """Closed-form log(anchor^-1 @ point) for diagonal UTDATs."""
    if anchor.scale.shape != point.scale.shape:
        raise ContractError("anchor and point dimensions differ")
    a, b = tangent_arrays(anchor.shift, anchor.scale, point.shift, point.scale)
    return TangentVector(a, b)


def reduced_tangent(anchor: UtdatDiag, point: UtdatDiag) -> np.ndarray:
    """Mean-only tangent: (mu - mu_bar) / sigma_bar. ``point.scale`` is ignored."""
    if anchor.shift.shape != point.shift.shape:
        raise ContractError("anchor and point dimensions differ")
    return (point.shift - anchor.shift) / anchor.scale


# ---------------------------------------------------------------------------
# Series oracle for 2x2 UTDATs
# ---------------------------------------------------------------------------


def _mul2(p, q):
    return (
        (p[0][0] * q[0][0] + p[0][1] * q[1][0], p[0][0] * q[0][1] + p[0][1] * q[1][1]),
        (p[1][0] * q[0][0] + p[1][1] * q[1][0], p[1][0] * q[0][1] + p[1][1] * q[1][1]),
    )


def _sqrt_utdat2(a, b):
    # [[r, b/(r+1)], [0, 1]] squares to [[a, b], [0, 1]] with r = sqrt(a)
    r = math.sqrt(a)
    return r, b / (r + 1.0)


def log_matrix2_oracle(M, max_terms: int = 200, tol: float = 1e-15) -> np.ndarray:
    """Matrix logarithm of a 1-d UTDAT [[a, b], [0, 1]] by power series.

    Independent of the closed form: the input is first brought near the
    identity by repeated principal square roots, then scaled by lambda so
    that log(M) = log(lambda) I + log(I + B) with B = M / lambda - I, and
    the Mercator series of log(I + B) is summed until the term norm drops
    below ``tol``.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (2, 2):
        raise ContractError(f"expected a 2x2 matrix, got {M.shape}")
    a, b = float(M[0, 0]), float(M[0, 1])
    if M[1, 0] != 0.0 or M[1, 1] != 1.0 or not a > 0 or not math.isfinite(b):
        raise ContractError("log_matrix2_oracle needs [[a, b], [0, 1]] with a > 0")

    squarings = 0
    while abs(math.log(a)) > 0.25:
        a, b = _sqrt_utdat2(a, b)
        squarings += 1
        if squarings > 64:
            raise ContractError("square-root reduction did not converge")

    # lambda at the geometric midpoint of the diagonal entries a and 1
    lam = math.sqrt(a)
    if max(abs(a / lam - 1.0), abs(1.0 / lam - 1.0)) >= 1.0:
        raise ContractError("scaled matrix has spectral radius >= 1")

    B = ((a / lam - 1.0, b / lam), (0.0, 1.0 / lam - 1.0))
    acc = [[0.0, 0.0], [0.0, 0.0]]
    power = B
    for n in range(1, max_terms + 1):
        coef = (1.0 if n % 2 else -1.0) / n
        acc[0][0] += coef * power[0][0]
        acc[0][1] += coef * power[0][1]
        acc[1][1] += coef * power[1][1]
        norm = abs(power[0][0]) + abs(power[0][1]) + abs(power[1][1])
        if abs(coef) * norm < tol:
            break
        power = _mul2(power, B)
    else:
        raise ContractError("series did not converge within max_terms")

    log_lam = math.log(lam)
    scale = float(2**squarings)
    return np.array(
        [
            [(acc[0][0] + log_lam) * scale, acc[0][1] * scale],
            [0.0, (acc[1][1] + log_lam) * scale],
        ]
    )


def relative_utdat2(anchor_mean, anchor_std, mean, std) -> np.ndarray:
    """M_bar^-1 @ M for 1-d Gaussians, formed by explicit 2x2 products."""
    inv_anchor = ((1.0 / anchor_std, -anchor_mean / anchor_std), (0.0, 1.0))
    M = ((std, mean), (0.0, 1.0))
    return np.array(_mul2(inv_anchor, M))
