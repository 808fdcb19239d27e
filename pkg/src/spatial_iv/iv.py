"""Causal estimators: naive regression, two-stage IV and spillover IV.

Every stage can be fit with i.i.d. (``"iid"``) or exponential GP
(``"spatial"``) errors. Stage-2 standard errors are the naive regression
standard errors on the generated regressors; first-stage uncertainty is not
propagated.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from spatial_iv.errors import WeakInstrumentError
from spatial_iv.geo import KernelSpec, SiteSet, kernel_matrix
from spatial_iv.regress import Z95, FitResult, fit, make_design

STAGES = ("both", "stage1", "stage2")


@dataclass
class CausalDataset:
    """Instrument ``z``, treatment ``a`` and response ``y`` on shared sites.

    ``covariate_stages`` maps a covariate name to ``"stage1"``, ``"stage2"`` or
    ``"both"``; unlisted covariates enter both stages.
    """

    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    sites: SiteSet
    covariates: dict = field(default_factory=dict)
    covariate_stages: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.sites)
        self.z = np.asarray(self.z, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        for name, v in [("z", self.z), ("a", self.a), ("y", self.y), *self.covariates.items()]:
            if np.shape(v) != (n,):
                raise ValueError(f"field {name!r} has shape {np.shape(v)}, expected ({n},)")
        for name, stage in self.covariate_stages.items():
            if stage not in STAGES:
                raise ValueError(f"covariate {name!r}: stage must be one of {STAGES}")

    def stage_covariates(self, stage: str) -> dict:
        return {
            k: v
            for k, v in self.covariates.items()
            if self.covariate_stages.get(k, "both") in ("both", stage)
        }


@dataclass(frozen=True)
class Effect:
    estimate: float
    se: float
    ci: tuple

    def covers(self, truth: float) -> bool:
        return self.ci[0] <= truth <= self.ci[1]


@dataclass
class CausalEstimate:
    delta1: Effect
    stage2: FitResult
    stage1: FitResult | None = None
    delta2: Effect | None = None
    iv_residual_cor: float | None = None
    extra_stage1: FitResult | None = None


def _effect(fr: FitResult, name: str, scale: float = 1.0) -> Effect:
    est = fr.coef(name) / scale
    se = fr.se(name) / abs(scale)
    return Effect(est, se, (est - Z95 * se, est + Z95 * se))


def _check_instrument(z, label="instrument"):
    z = np.asarray(z, dtype=float)
    if z.std() <= 1e-12 * max(1.0, abs(z.mean())):
        raise WeakInstrumentError(f"{label} has zero sample variance")


def _cor(u, v) -> float:
    u = u - u.mean()
    v = v - v.mean()
    den = np.sqrt((u @ u) * (v @ v))
    return float(np.clip((u @ v) / den, -1.0, 1.0)) if den > 0 else float("nan")


_KERNEL_CACHE: OrderedDict = OrderedDict()


def _kernel(sites: SiteSet, kernel):
    if not isinstance(kernel, KernelSpec):
        return kernel
    key = (sites.fingerprint, kernel.truncation)
    if key not in _KERNEL_CACHE:
        _KERNEL_CACHE[key] = kernel_matrix(sites, kernel)
        if len(_KERNEL_CACHE) > 4:
            _KERNEL_CACHE.popitem(last=False)
    return _KERNEL_CACHE[key]


def no_iv(data: CausalDataset, error_model: str = "iid") -> CausalEstimate:
    """Regress Y on A (plus stage-2 covariates)."""
    design = make_design(data.y, {"A": data.a, **data.stage_covariates("stage2")})
    s2 = fit(design, error_model, data.sites)
    return CausalEstimate(
        delta1=_effect(s2, "A"), stage2=s2, iv_residual_cor=_cor(data.z, s2.residuals)
    )


def first_stage(data: CausalDataset, error_model: str) -> FitResult:
    """Fit A on Z (plus stage-1 covariates); fitted values are A-hat."""
    _check_instrument(data.z)
    design = make_design(data.a, {"Z": data.z, **data.stage_covariates("stage1")})
    return fit(design, error_model, data.sites)


def two_stage_iv(
    data: CausalDataset,
    error_model_s1: str = "iid",
    error_model_s2: str = "iid",
    stage1: FitResult | None = None,
) -> CausalEstimate:
    """Two-stage IV estimate of the direct effect.

    ``stage1`` may be passed to reuse an existing first-stage fit.
    """
    s1 = stage1 if stage1 is not None else first_stage(data, error_model_s1)
    design = make_design(data.y, {"A_hat": s1.fitted, **data.stage_covariates("stage2")})
    s2 = fit(design, error_model_s2, data.sites)
    return CausalEstimate(
        delta1=_effect(s2, "A_hat"),
        stage2=s2,
        stage1=s1,
        iv_residual_cor=_cor(data.z, s2.residuals),
    )


# --- interference ----------------------------------------------------------


def no_instrument(data: CausalDataset, kernel, error_model: str = "spatial") -> CausalEstimate:
    """Regress Y on A and its kernel average directly, with no first stage."""
    k = _kernel(data.sites, kernel)
    design = make_design(
        data.y, {"A": data.a, "A_tilde": k @ data.a, **data.stage_covariates("stage2")}
    )
    s2 = fit(design, error_model, data.sites)
    return CausalEstimate(
        delta1=_effect(s2, "A"),
        delta2=_effect(s2, "A_tilde"),
        stage2=s2,
        iv_residual_cor=_cor(data.z, s2.residuals),
    )


def spillover_estimates(
    data: CausalDataset,
    kernel,
    error_model_s1: str = "spatial",
    error_model_s2: str = "spatial",
    types=("type0", "type1", "type2"),
) -> dict:
    """Run several spillover estimators sharing their common fits.

    The stage-1 fit of A on Z is shared by all types. When stage 1 has no
    covariates, both the type-1 and type-2 spillover regressors are exact
    affine functions of the kernel-averaged instrument Z~, so their stage-2
    regressions span the same columns; that regression is fit once on
    ``[A_hat, Z_tilde]`` and the Z~ coefficient is rescaled by each type's
    slope to give its indirect effect.
    """
    k = _kernel(data.sites, kernel)
    s1 = first_stage(data, error_model_s1)
    a_hat = s1.fitted
    cov2 = data.stage_covariates("stage2")
    cov1 = data.stage_covariates("stage1")
    z_tilde = k @ data.z
    out = {}

    def finish(s2, d2_name, d2_scale=1.0, extra=None):
        return CausalEstimate(
            delta1=_effect(s2, "A_hat"),
            delta2=_effect(s2, d2_name, d2_scale),
            stage2=s2,
            stage1=s1,
            iv_residual_cor=_cor(data.z, s2.residuals),
            extra_stage1=extra,
        )

    if "type0" in types:
        design = make_design(data.y, {"A_hat": a_hat, "A_tilde": k @ data.a, **cov2})
        out["type0"] = finish(fit(design, error_model_s2, data.sites), "A_tilde")

    s1b = None
    if "type2" in types:
        _check_instrument(z_tilde, "kernel-averaged instrument")
        design = make_design(k @ data.a, {"Z_tilde": z_tilde, **cov1})
        s1b = fit(design, error_model_s1, data.sites)

    shared = None
    if not cov1 and ("type1" in types or "type2" in types):
        _check_instrument(z_tilde, "kernel-averaged instrument")
        design = make_design(data.y, {"A_hat": a_hat, "Z_tilde": z_tilde, **cov2})
        shared = fit(design, error_model_s2, data.sites)

    if "type1" in types:
        if shared is not None:
            out["type1"] = finish(shared, "Z_tilde", s1.coef("Z"))
        else:
            design = make_design(data.y, {"A_hat": a_hat, "A_tilde_hat": k @ a_hat, **cov2})
            out["type1"] = finish(fit(design, error_model_s2, data.sites), "A_tilde_hat")

    if "type2" in types:
        if shared is not None:
            out["type2"] = finish(shared, "Z_tilde", s1b.coef("Z_tilde"), extra=s1b)
        else:
            design = make_design(data.y, {"A_hat": a_hat, "A_tilde_hat": s1b.fitted, **cov2})
            out["type2"] = finish(
                fit(design, error_model_s2, data.sites), "A_tilde_hat", extra=s1b
            )
    return out


def spillover_type0(data, kernel, error_model_s1="spatial", error_model_s2="spatial"):
    """Stage 2 on A-hat and the kernel average of the observed treatment."""
    return spillover_estimates(data, kernel, error_model_s1, error_model_s2, ("type0",))["type0"]


def spillover_type1(data, kernel, error_model_s1="spatial", error_model_s2="spatial"):
    """Stage 2 on A-hat and the kernel average of A-hat."""
    return spillover_estimates(data, kernel, error_model_s1, error_model_s2, ("type1",))["type1"]


def spillover_type2(data, kernel, error_model_s1="spatial", error_model_s2="spatial"):
    """Stage 2 on A-hat and the fit of A~ on the kernel-averaged instrument."""
    return spillover_estimates(data, kernel, error_model_s1, error_model_s2, ("type2",))["type2"]
