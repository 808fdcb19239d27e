"""Site geometry, exponential covariance and inverse-distance kernel weights."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from spatial_iv.errors import ConfigError, IsolatedSiteError

LN20 = math.log(20.0)


class SiteSet:
    """Ordered 2-D locations with lazily cached pairwise Euclidean distances.

    Coordinates are copied and frozen on construction, so a SiteSet can be
    shared freely between replicate workers.
    """

    def __init__(self, coordinates):
        coords = np.array(coordinates, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ConfigError(f"coordinates must have shape (n, 2), got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ConfigError("coordinates must be finite")
        coords.setflags(write=False)
        self.coordinates = coords

    def __len__(self):
        return self.coordinates.shape[0]

    def __repr__(self):
        return f"SiteSet(n={len(self)}, max_distance={self.max_distance:.4g})"

    @cached_property
    def distances(self) -> np.ndarray:
        d = cdist(self.coordinates, self.coordinates)
        # exact symmetry; cdist can differ in the last ulp across the diagonal
        d = np.minimum(d, d.T)
        np.fill_diagonal(d, 0.0)
        d.setflags(write=False)
        return d

    @cached_property
    def max_distance(self) -> float:
        return float(self.distances.max())

    @cached_property
    def fingerprint(self) -> str:
        """Content hash used as a cache key for factorizations."""
        return hashlib.sha1(self.coordinates.tobytes()).hexdigest()


@dataclass(frozen=True)
class CovarianceSpec:
    """Exponential covariance: partial sill, range and nugget."""

    partial_sill: float
    range: float
    nugget: float = 0.0

    def __post_init__(self):
        if not self.partial_sill > 0:
            raise ConfigError(f"partial_sill must be > 0, got {self.partial_sill}")
        if not self.range > 0:
            raise ConfigError(f"range must be > 0, got {self.range}")
        if not self.nugget >= 0:
            raise ConfigError(f"nugget must be >= 0, got {self.nugget}")

    @property
    def total_variance(self) -> float:
        return self.partial_sill + self.nugget


@dataclass(frozen=True)
class KernelSpec:
    """Truncated inverse-distance kernel, w(d) = 1/d for 0 < d < truncation."""

    truncation: float

    def __post_init__(self):
        if not self.truncation > 0:
            raise ConfigError(f"truncation must be > 0, got {self.truncation}")

    @classmethod
    def queen(cls, spacing: float) -> "KernelSpec":
        """Kernel covering exactly the eight queen neighbours of a regular grid."""
        return cls(truncation=1.5 * spacing)


def build_grid(n_per_side: int, extent: float = 1.0) -> SiteSet:
    """Regular ``n_per_side`` x ``n_per_side`` grid over ``[0, extent]^2``.

    Sites are ordered row by row with the x coordinate varying fastest.
    """
    if int(n_per_side) != n_per_side or n_per_side < 2:
        raise ConfigError(f"n_per_side must be an integer >= 2, got {n_per_side}")
    if not extent > 0:
        raise ConfigError(f"extent must be > 0, got {extent}")
    ticks = np.linspace(0.0, extent, int(n_per_side))
    xx, yy = np.meshgrid(ticks, ticks)
    return SiteSet(np.column_stack([xx.ravel(), yy.ravel()]))


def grid_spacing(n_per_side: int, extent: float = 1.0) -> float:
    return extent / (n_per_side - 1)


def exp_cov(distance, spec: CovarianceSpec):
    """Exponential covariance with the nugget added at exactly zero distance.

    Works elementwise on arrays.
    """
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ConfigError("distance must be nonnegative")
    out = spec.partial_sill * np.exp(-d / spec.range)
    out = np.where(d == 0, spec.partial_sill + spec.nugget, out)
    return out if out.ndim else float(out)


def practical_range(phi: float) -> float:
    """Distance at which exponential correlation has decayed to 0.05."""
    if not phi > 0:
        raise ConfigError(f"phi must be > 0, got {phi}")
    return phi * LN20


def kernel_weights(sites: SiteSet, target_index: int, kernel: KernelSpec):
    """Normalized inverse-distance weights of ``target_index``'s neighbours.

    Returns ``(indices, weights)``; weights are positive and sum to one.
    Raises IsolatedSiteError when no other site lies within the truncation.
    """
    d = sites.distances[target_index]
    idx = np.flatnonzero((d > 0) & (d < kernel.truncation))
    if idx.size == 0:
        raise IsolatedSiteError(target_index, kernel.truncation)
    w = 1.0 / d[idx]
    return idx, w / w.sum()


def kernel_matrix(sites: SiteSet, kernel: KernelSpec) -> sparse.csr_matrix:
    """Row-stochastic sparse matrix K so that ``K @ a`` is the kernel average."""
    rows, cols, vals = [], [], []
    for i in range(len(sites)):
        idx, w = kernel_weights(sites, i, kernel)
        rows.append(np.full(idx.size, i))
        cols.append(idx)
        vals.append(w)
    n = len(sites)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
