"""Instrumental-variable estimation under spatial confounding and interference."""

__version__ = "0.1.0"

from spatial_iv.errors import (
    ConfigError,
    FitError,
    IsolatedSiteError,
    NumericalDegeneracyError,
    SingularDesignError,
    UnattainableTargetError,
    WeakInstrumentError,
)
from spatial_iv.geo import (
    CovarianceSpec,
    KernelSpec,
    SiteSet,
    build_grid,
    exp_cov,
    kernel_matrix,
    kernel_weights,
    practical_range,
)
from spatial_iv.gp import sample_gp, sample_iid
from spatial_iv.regress import FitResult, gp_mle_fit, ols_fit, spatial_fraction
from spatial_iv.iv import (
    CausalDataset,
    CausalEstimate,
    no_instrument,
    no_iv,
    spillover_type0,
    spillover_type1,
    spillover_type2,
    two_stage_iv,
)
