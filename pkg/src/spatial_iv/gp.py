"""Exact sampling of exponential-covariance Gaussian random fields."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
from scipy import linalg

from spatial_iv.errors import ConfigError, NumericalDegeneracyError
from spatial_iv.geo import CovarianceSpec, SiteSet, exp_cov

JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_CACHE_SIZE = 8
_factor_cache: OrderedDict = OrderedDict()


def as_generator(seed) -> np.random.Generator:
    """Accept an int, SeedSequence or Generator and return a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def covariance_matrix(sites: SiteSet, spec: CovarianceSpec) -> np.ndarray:
    return exp_cov(sites.distances, spec)


def cholesky_with_jitter(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter from 1e-10 to 1e-6."""
    for jitter in JITTERS:
        a = cov + jitter * np.eye(cov.shape[0]) if jitter else cov
        try:
            return linalg.cholesky(a, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
    raise NumericalDegeneracyError(
        f"covariance of size {cov.shape[0]} not positive definite with jitter {JITTERS[-1]:g}"
    )


def gp_factor(sites: SiteSet, spec: CovarianceSpec) -> np.ndarray:
    """Cached Cholesky factor of the covariance matrix of ``sites`` under ``spec``."""
    key = (sites.fingerprint, spec.partial_sill, spec.range, spec.nugget)
    if key in _factor_cache:
        _factor_cache.move_to_end(key)
        return _factor_cache[key]
    factor = cholesky_with_jitter(covariance_matrix(sites, spec))
    factor.setflags(write=False)
    _factor_cache[key] = factor
    if len(_factor_cache) > _CACHE_SIZE:
        _factor_cache.popitem(last=False)
    return factor


def sample_gp(sites: SiteSet, spec: CovarianceSpec, seed, size: int | None = None) -> np.ndarray:
    """Draw a zero-mean Gaussian field with exponential covariance.

    With ``size=None`` returns one field of shape ``(n,)``; otherwise an
    ``(n, size)`` array of independent fields. Identical seeds give
    identical output.
    """
    rng = as_generator(seed)
    factor = gp_factor(sites, spec)
    k = 1 if size is None else int(size)
    draws = factor @ rng.standard_normal((len(sites), k))
    return draws[:, 0] if size is None else draws


def sample_iid(sites: SiteSet, sd: float, seed, size: int | None = None) -> np.ndarray:
    """Independent Normal(0, sd^2) values, one per site."""
    if not sd > 0:
        raise ConfigError(f"sd must be > 0, got {sd}")
    rng = as_generator(seed)
    shape = (len(sites),) if size is None else (len(sites), int(size))
    return sd * rng.standard_normal(shape)
