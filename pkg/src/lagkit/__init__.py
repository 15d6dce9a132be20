"""Lie algebrized Gaussians: GMM supervectors in the tangent space of a UBM."""

from .gmm import (
    AdaptationConfig,
    DiagonalGmm,
    EmConfig,
    SufficientStats,
    accumulate_stats,
    component_posteriors,
    log_likelihood,
    map_adapt,
    train_ubm_em,
)
from .lie import (
    TangentVector,
    UtdatDiag,
    from_utdat,
    log_matrix2_oracle,
    log_utdat_scalar,
    reduced_tangent,
    to_utdat,
)
from .vectorize import (
    Method,
    SupervectorBundle,
    gmm_product_kernel,
    klvec_vector,
    lag_vector,
    rlag_vector,
)

__version__ = "0.1.0"
