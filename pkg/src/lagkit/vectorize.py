"""Supervectors from UBM-adapted mixtures: LAG, reduced LAG and KLVec."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .gmm import DiagonalGmm
from .lie import tangent_arrays


class Method(str, enum.Enum):
    LAG = "LAG"
    RLAG = "RLAG"
    KLVEC = "KLVEC"

    @property
    def tag(self) -> int:
        return _TAGS[self]

    @classmethod
    def from_tag(cls, tag: int) -> "Method":
        for m, t in _TAGS.items():
            if t == tag:
                return m
        raise ValueError(f"unknown method tag {tag}")

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, Method):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown method {value!r}; expected one of LAG, RLAG, KLVEC") from None

    def block_size(self, D: int) -> int:
        return 2 * D if self is Method.LAG else D


_TAGS = {Method.LAG: 0, Method.RLAG: 1, Method.KLVEC: 2}


def supervector_length(method, K: int, D: int, regions: int = 1) -> int:
    return regions * K * Method.parse(method).block_size(D)


@dataclass(frozen=True, eq=False)
class SupervectorBundle:
    method: Method
    K: int
    D: int
    regions: int
    values: np.ndarray

    def __post_init__(self):
        method = Method.parse(self.method)
        values = np.asarray(self.values, dtype=np.float64).ravel()
        expected = supervector_length(method, self.K, self.D, self.regions)
        if values.shape[0] != expected:
            raise ContractError(
                f"{method.value} supervector for K={self.K}, D={self.D}, "
                f"regions={self.regions} must have length {expected}, got {values.shape[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractError("supervector has non-finite entries")
        object.__setattr__(self, "method", method)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    def region(self, i: int) -> np.ndarray:
        n = self.K * self.method.block_size(self.D)
        return self.values[i * n : (i + 1) * n]


def _check_pair(ubm: DiagonalGmm, adapted: DiagonalGmm):
    if ubm.means.shape != adapted.means.shape:
        raise ContractError(
            f"adapted model ({adapted.K}x{adapted.D}) does not match UBM ({ubm.K}x{ubm.D})"
        )


def lag_blocks(ubm: DiagonalGmm, adapted: DiagonalGmm) -> np.ndarray:
    """K x 2D array of unweighted tangent blocks (log-scale then translation)."""
    _check_pair(ubm, adapted)
    log_scale, translation = tangent_arrays(ubm.means, ubm.stds, adapted.means, adapted.stds)
    return np.concatenate([log_scale, translation], axis=1)


def rlag_blocks(ubm: DiagonalGmm, adapted: DiagonalGmm) -> np.ndarray:
    _check_pair(ubm, adapted)
    return (adapted.means - ubm.means) / ubm.stds


def klvec_blocks(ubm: DiagonalGmm, adapted: DiagonalGmm) -> np.ndarray:
    _check_pair(ubm, adapted)
    return adapted.means / ubm.stds


_BLOCKS = {Method.LAG: lag_blocks, Method.RLAG: rlag_blocks, Method.KLVEC: klvec_blocks}


def vectorize(ubm: DiagonalGmm, adapted: DiagonalGmm, method) -> SupervectorBundle:
    """sqrt(w_k)-weighted blocks of ``method``, concatenated in component order."""
    method = Method.parse(method)
    blocks = _BLOCKS[method](ubm, adapted)
    values = (np.sqrt(adapted.weights)[:, None] * blocks).ravel()
    return SupervectorBundle(method, ubm.K, ubm.D, 1, values)


def lag_vector(ubm: DiagonalGmm, adapted: DiagonalGmm) -> SupervectorBundle:
    return vectorize(ubm, adapted, Method.LAG)


def rlag_vector(ubm: DiagonalGmm, adapted: DiagonalGmm) -> SupervectorBundle:
    return vectorize(ubm, adapted, Method.RLAG)


def klvec_vector(ubm: DiagonalGmm, adapted: DiagonalGmm) -> SupervectorBundle:
    return vectorize(ubm, adapted, Method.KLVEC)


def concat_regions(bundles) -> SupervectorBundle:
    """Join single- or multi-region bundles of one method into one bundle."""
    bundles = list(bundles)
    if not bundles:
        raise ContractError("nothing to concatenate")
    first = bundles[0]
    for b in bundles[1:]:
        if (b.method, b.K, b.D) != (first.method, first.K, first.D):
            raise ContractError("cannot concatenate supervectors of different layouts")
    return SupervectorBundle(
        first.method,
        first.K,
        first.D,
        sum(b.regions for b in bundles),
        np.concatenate([b.values for b in bundles]),
    )


def gmm_product_kernel(ubm: DiagonalGmm, a: DiagonalGmm, b: DiagonalGmm, method) -> float:
    """sum_k sqrt(w_k^a w_k^b) <m_k^a, m_k^b>, evaluated component by component."""
    method = Method.parse(method)
    if method is Method.KLVEC:
        raise ContractError("product kernel is defined for LAG and RLAG only")
    _check_pair(ubm, a)
    _check_pair(ubm, b)
    blocks = _BLOCKS[method]
    ma, mb = blocks(ubm, a), blocks(ubm, b)
    total = 0.0
    for k in range(ubm.K):
        total += np.sqrt(a.weights[k] * b.weights[k]) * float(ma[k] @ mb[k])
    return float(total)
