"""Linear regression with i.i.d. errors or exponential-covariance GP errors.

The GP-error fit maximizes the Gaussian likelihood with the regression
coefficients and the total variance profiled out, leaving a two-dimensional
search over ``(log range, logit nugget fraction)``:

    cov(e) = s2 * [(1 - nu) * R(phi) + nu * I],   R(phi)_ij = exp(-d_ij / phi)

so that the partial sill is ``(1 - nu) * s2`` and the nugget ``nu * s2``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, logit

from spatial_iv.errors import DegenerateVarianceError, FitError, SingularDesignError
from spatial_iv.geo import CovarianceSpec, SiteSet

Z95 = 1.96
RANK_TOL = 1e-10
LOGIT_BOUND = 10.0
LOGIT_CORNER = 30.0  # nugget-only limit: nu = 1 - 1e-13, equivalent to i.i.d. errors
PHI_BOUNDS = (1e-3, 10.0)  # multiples of the maximum pairwise distance
N_STARTS = 5
_LOG_2PI = math.log(2 * math.pi)


@dataclass
class Design:
    """Response plus named regressor columns; the intercept is column 0."""

    response: np.ndarray
    matrix: np.ndarray
    names: tuple

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def p(self):
        return self.matrix.shape[1]


def make_design(response, columns=None, intercept=True) -> Design:
    """Build a Design from a response vector and a ``{name: values}`` mapping."""
    y = np.asarray(response, dtype=float).ravel()
    cols, names = [], []
    if intercept:
        cols.append(np.ones_like(y))
        names.append("intercept")
    for name, values in (columns or {}).items():
        v = np.asarray(values, dtype=float).ravel()
        if v.shape != y.shape:
            raise ValueError(f"column {name!r} has length {v.size}, response has {y.size}")
        cols.append(v)
        names.append(name)
    if not cols:
        raise ValueError("design has no columns")
    if not (np.all(np.isfinite(y)) and all(np.all(np.isfinite(c)) for c in cols)):
        raise ValueError("design contains non-finite values")
    return Design(y, np.column_stack(cols), tuple(names))


@dataclass
class FitResult:
    coefficients: dict
    std_errors: dict
    wald_ci: dict
    error_model: str
    cov_params: CovarianceSpec | None
    sigma2: float
    loglik: float
    aic: float
    residuals: np.ndarray
    fitted: np.ndarray
    n_params: int
    optimizer: dict = field(default_factory=dict)

    def coef(self, name):
        return self.coefficients[name]

    def se(self, name):
        return self.std_errors[name]

    def ci(self, name):
        return self.wald_ci[name]


def check_rank(x: np.ndarray) -> None:
    n, p = x.shape
    if n <= p:
        raise SingularDesignError(f"need more rows than columns, got {n} x {p}")
    sv = linalg.svd(x, compute_uv=False, check_finite=False)
    if sv[-1] < RANK_TOL * sv[0]:
        raise SingularDesignError(
            f"design is rank deficient (singular value ratio {sv[-1] / sv[0]:.3g})"
        )


def _package(design, beta, cov_beta, sigma2, loglik, n_params, error_model, cov_params, optimizer=None):
    se = np.sqrt(np.clip(np.diag(cov_beta), 0.0, None))
    fitted = design.matrix @ beta
    names = design.names
    return FitResult(
        coefficients={k: float(b) for k, b in zip(names, beta)},
        std_errors={k: float(s) for k, s in zip(names, se)},
        wald_ci={k: (float(b - Z95 * s), float(b + Z95 * s)) for k, b, s in zip(names, beta, se)},
        error_model=error_model,
        cov_params=cov_params,
        sigma2=float(sigma2),
        loglik=float(loglik),
        aic=float(-2.0 * loglik + 2.0 * n_params),
        residuals=design.response - fitted,
        fitted=fitted,
        n_params=n_params,
        optimizer=optimizer or {},
    )


def ols_fit(design: Design) -> FitResult:
    """Ordinary least squares with classical standard errors."""
    x, y = design.matrix, design.response
    check_rank(x)
    n, p = x.shape
    q, r = linalg.qr(x, mode="economic", check_finite=False)
    beta = linalg.solve_triangular(r, q.T @ y, check_finite=False)
    resid = y - x @ beta
    rss = float(resid @ resid)
    rinv = linalg.solve_triangular(r, np.eye(p), check_finite=False)
    s2 = rss / (n - p)
    cov_beta = s2 * (rinv @ rinv.T)
    ml_var = rss / n
    loglik = -0.5 * n * (_LOG_2PI + math.log(ml_var) + 1.0) if ml_var > 0 else math.inf
    return _package(design, beta, cov_beta, s2, loglik, p + 1, "iid", None)


# --- spatial errors --------------------------------------------------------

_EIGH_CACHE_SIZE = 12
_eigh_cache: OrderedDict = OrderedDict()


def _correlation_eigh(sites: SiteSet, phi: float):
    key = (sites.fingerprint, phi)
    if key in _eigh_cache:
        _eigh_cache.move_to_end(key)
        return _eigh_cache[key]
    lam, vec = linalg.eigh(np.exp(-sites.distances / phi), check_finite=False)
    out = (np.clip(lam, 0.0, None), vec)
    _eigh_cache[key] = out
    if len(_eigh_cache) > _EIGH_CACHE_SIZE:
        _eigh_cache.popitem(last=False)
    return out


class ProfileLikelihood:
    """Profile log-likelihood of a GP-error regression on (log phi, logit nu)."""

    def __init__(self, design: Design, sites: SiteSet):
        if len(sites) != design.n:
            raise ValueError(f"design has {design.n} rows but there are {len(sites)} sites")
        self.design = design
        self.sites = sites
        self.dist = sites.distances
        self.yx = np.column_stack([design.response, design.matrix])
        self._buf = np.empty_like(self.dist)
        dmax = sites.max_distance
        self.log_phi_bounds = (math.log(PHI_BOUNDS[0] * dmax), math.log(PHI_BOUNDS[1] * dmax))
        self.logit_bounds = (-LOGIT_BOUND, LOGIT_BOUND)
        self.nfev = 0

    def _factor(self, phi, nu):
        buf = self._buf
        np.multiply(self.dist, -1.0 / phi, out=buf)
        np.exp(buf, out=buf)
        buf *= 1.0 - nu
        buf.flat[:: buf.shape[0] + 1] += nu
        try:
            return linalg.cholesky(buf, lower=True, overwrite_a=True, check_finite=False)
        except linalg.LinAlgError:
            return None

    def evaluate(self, theta):
        """Return (loglik, beta, s2, cov_beta_unscaled) at ``theta``."""
        self.nfev += 1
        phi, nu = math.exp(theta[0]), float(expit(theta[1]))
        chol = self._factor(phi, nu)
        if chol is None:
            return -math.inf, None, None, None
        w = linalg.solve_triangular(chol, self.yx, lower=True, check_finite=False)
        wy, wx = w[:, 0], w[:, 1:]
        q, r = linalg.qr(wx, mode="economic", check_finite=False)
        qty = q.T @ wy
        beta = linalg.solve_triangular(r, qty, check_finite=False)
        n = self.design.n
        rss = float(wy @ wy - qty @ qty)
        s2 = max(rss, 0.0) / n
        if s2 <= 0:
            return -math.inf, None, None, None
        logdet = 2.0 * float(np.log(np.diag(chol)).sum())
        ll = -0.5 * (n * (_LOG_2PI + math.log(s2) + 1.0) + logdet)
        rinv = linalg.solve_triangular(r, np.eye(r.shape[0]), check_finite=False)
        return ll, beta, s2, rinv @ rinv.T

    def __call__(self, theta):
        return self.evaluate(theta)[0]

    def screen(self, log_phi):
        """Best logit nugget fraction at fixed range, via a cached eigendecomposition."""
        lam, vec = _correlation_eigh(self.sites, math.exp(log_phi))
        t = vec.T @ self.yx
        ty, tx = t[:, 0], t[:, 1:]
        n = self.design.n

        def negll(eta):
            nu = expit(eta)
            d = (1.0 - nu) * lam + nu
            sw = 1.0 / np.sqrt(d)
            bx, by = tx * sw[:, None], ty * sw
            beta, *_ = linalg.lstsq(bx, by, check_finite=False)
            r = by - bx @ beta
            s2 = float(r @ r) / n
            if s2 <= 0:
                return math.inf
            return 0.5 * (n * (_LOG_2PI + math.log(s2) + 1.0) + float(np.log(d).sum()))

        res = optimize.minimize_scalar(
            negll, bounds=self.logit_bounds, method="bounded", options={"xatol": 1e-3}
        )
        return -float(res.fun), float(res.x)


def gp_mle_fit(
    design: Design,
    sites: SiteSet,
    *,
    n_starts: int = N_STARTS,
    xatol: float = 1e-6,
    fatol: float = 1e-8,
    maxfev: int = 3000,
) -> FitResult:
    """Maximum-likelihood regression with exponential-covariance GP errors.

    Five log-spaced ranges across ``[1e-3, 10] * max distance`` are screened
    with the nugget fraction profiled exactly; Nelder-Mead then refines the
    best start. Standard errors are plug-in, conditional on the estimated
    covariance parameters.
    """
    check_rank(design.matrix)
    prof = ProfileLikelihood(design, sites)
    lo, hi = prof.log_phi_bounds
    starts = np.linspace(lo, hi, n_starts + 2)[1:-1] if n_starts > 1 else [0.5 * (lo + hi)]
    screened = [(prof.screen(s), s) for s in starts]
    (_, eta0), lp0 = max(screened, key=lambda t: t[0][0])
    bounds = [prof.log_phi_bounds, prof.logit_bounds]
    x0 = np.array([lp0, np.clip(eta0, -LOGIT_BOUND + 0.5, LOGIT_BOUND - 0.5)])
    simplex = np.array([x0, x0 + [0.25, 0.0], x0 + [0.0, 0.5]])
    simplex[:, 0] = np.clip(simplex[:, 0], lo, hi)
    res = optimize.minimize(
        lambda th: -prof(th),
        x0,
        method="Nelder-Mead",
        bounds=bounds,
        options={"xatol": xatol, "fatol": fatol, "maxfev": maxfev, "initial_simplex": simplex},
    )
    theta = np.clip(res.x, [lo, -LOGIT_BOUND], [hi, LOGIT_BOUND])
    if not res.success:
        raise FitError(
            f"Nelder-Mead did not converge: {res.message}",
            best={"phi": math.exp(theta[0]), "nugget_fraction": float(expit(theta[1])), "loglik": -res.fun},
        )
    # the nugget-only corner reproduces the i.i.d. model; keep it if it is better
    corner = np.array([lo, LOGIT_CORNER])
    ll, beta, s2, xtvx_inv = prof.evaluate(theta)
    ll_c, *rest_c = prof.evaluate(corner)
    if ll_c > ll:
        theta, ll, (beta, s2, xtvx_inv) = corner, ll_c, rest_c
    if beta is None:
        raise FitError("likelihood not finite at the optimum", best={"theta": theta.tolist()})
    phi, nu = math.exp(theta[0]), float(expit(theta[1]))
    spec = CovarianceSpec(partial_sill=(1.0 - nu) * s2, range=phi, nugget=nu * s2)
    at_boundary = bool(
        np.isclose(theta[0], lo, atol=1e-4) or np.isclose(theta[0], hi, atol=1e-4)
        or abs(theta[1]) >= LOGIT_BOUND - 1e-4
    )
    info = {
        "phi": phi,
        "nugget_fraction": nu,
        "theta": theta.tolist(),
        "nfev": prof.nfev,
        "at_boundary": at_boundary,
    }
    return _package(design, beta, s2 * xtvx_inv, s2, ll, design.p + 3, "spatial", spec, info)


def profile_loglik(design: Design, sites: SiteSet, log_phi: float, logit_nugget: float) -> float:
    """Profile log-likelihood at a single ``(log phi, logit nugget fraction)`` point."""
    return ProfileLikelihood(design, sites)(np.array([log_phi, logit_nugget]))


def fit(design: Design, error_model: str, sites: SiteSet | None = None) -> FitResult:
    """Dispatch to :func:`ols_fit` or :func:`gp_mle_fit` by error model name."""
    if error_model == "iid":
        return ols_fit(design)
    if error_model == "spatial":
        if sites is None:
            raise ValueError("spatial error model needs sites")
        return gp_mle_fit(design, sites)
    raise ValueError(f"unknown error model {error_model!r}")


def spatial_fraction(spec: CovarianceSpec) -> float:
    """Share of the error variance that is spatially structured."""
    total = spec.partial_sill + spec.nugget
    if not total > 0:
        raise DegenerateVarianceError("total variance is zero")
    return spec.partial_sill / total
