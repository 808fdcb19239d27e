"""Data-generating mechanisms for the simulation studies.

Each generator draws candidate datasets in batches and keeps the first one
whose realized correlations fall inside the configured acceptance window.
Candidates are examined in draw order, so a seed always yields the same
accepted replicate and attempt count.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from spatial_iv.errors import ConfigError, UnattainableTargetError
from spatial_iv.geo import (
    CovarianceSpec,
    KernelSpec,
    SiteSet,
    build_grid,
    grid_spacing,
    kernel_matrix,
    practical_range,
)
from spatial_iv.gp import gp_factor
from spatial_iv.iv import CausalDataset

GENERATORS = ("valid_iv", "invalid_iv", "real_inspired", "interference")
# Real-inspired correlation targets hold either in expectation over
# replicates or for every accepted replicate.
COR_MODES = ("expected", "per_replicate")

DEFAULTS = {
    "valid_iv": {
        "n_per_side": 30,
        "coefficients": {
            "beta1": 1.0, "beta2": 1.1, "beta3": 0.5,
            "delta1": 1.0, "delta2": 1.0, "delta3": 1.0,
            "treatment_noise_sd": 0.0,
        },
        "gp_ranges": {"z_spatial": 0.2, "u": 0.2, "v": 0.2},
        "targets": {"cor_za": 0.7, "cor_zu": 0.0, "tolerance": 0.02},
    },
    "invalid_iv": {
        "n_per_side": 30,
        "coefficients": {
            "gamma1": 0.1, "gamma2": 0.1,
            "beta1": 1.0, "beta2": 1.0, "beta3": 0.5,
            "delta1": 1.0, "delta2": 1.0, "delta3": 1.0,
            "treatment_noise_sd": 0.0,
        },
        "gp_ranges": {"z_spatial": 0.2, "v": 0.2, "w": 0.2},
        "targets": {"cor_za": 0.7, "cor_zu": 0.1, "tolerance": 0.02},
    },
    "real_inspired": {
        "n_per_side": 20,
        "coefficients": {"a": 0.27, "b": 0.25, "c": 0.48, "f": 0.063, "g": 0.023, "j": 0.914},
        "gp_ranges": {"z": 0.0436, "u": 0.15, "w": 1.8},
        "targets": {
            "cor": {"za": 0.661, "zy": 0.128, "ay": 0.283, "zu": 0.0},
            "cor_mode": "expected",
            "expected_draws": 400,
            "tolerance": 0.035,
            "range_ratio_z": None,
            "range_ratio_tolerance": 0.02,
        },
    },
    "interference": {
        "n_per_side": 32,
        "coefficients": {
            "gamma0": 0.0, "gamma1": 2.3, "gamma2": 2.0,
            "beta0": 0.0, "beta1": 2.0, "beta2": 1.0,
            "delta1": 1.0, "delta2": 1.0,
        },
        "gp_ranges": {"z": 0.2, "u": 0.2, "v": 0.1},
        "targets": {"cor_za": 0.75, "tolerance": 0.02},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ScenarioConfig:
    """One simulation cell: generator, coefficients, targets and run sizes."""

    name: str
    generator: str
    n_per_side: int = 30
    extent: float = 1.0
    coefficients: dict = field(default_factory=dict)
    gp_ranges: dict = field(default_factory=dict)
    targets: dict = field(default_factory=dict)
    max_attempts: int = 10_000
    batch_size: int = 64
    replicates: int = 500
    base_seed: int = 0
    models: list = field(default_factory=list)
    error_models: list = field(default_factory=lambda: ["iid", "spatial"])
    tune: bool = False

    @classmethod
    def build(cls, name: str, generator: str, **overrides) -> "ScenarioConfig":
        """Fill generator defaults, then apply nested overrides."""
        if generator not in GENERATORS:
            raise ConfigError(f"generator: unknown {generator!r}, expected one of {GENERATORS}")
        merged = _merge(DEFAULTS[generator], overrides)
        cfg = cls(name=name, generator=generator, **merged)
        cfg.validate()
        return cfg

    def validate(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator: unknown {self.generator!r}")
        if int(self.n_per_side) != self.n_per_side or self.n_per_side < 2:
            raise ConfigError(f"n_per_side: must be an integer >= 2, got {self.n_per_side}")
        if not self.extent > 0:
            raise ConfigError(f"extent: must be > 0, got {self.extent}")
        if not (isinstance(self.replicates, int) and self.replicates >= 1):
            raise ConfigError(f"replicates: must be a positive integer, got {self.replicates}")
        if not (isinstance(self.max_attempts, int) and self.max_attempts >= 1):
            raise ConfigError(f"max_attempts: must be >= 1, got {self.max_attempts}")
        if not self.targets.get("tolerance", 0) > 0:
            raise ConfigError("targets.tolerance: must be > 0")
        for k, phi in self.gp_ranges.items():
            if not (isinstance(phi, (int, float)) and phi > 0):
                raise ConfigError(f"gp_ranges.{k}: must be > 0, got {phi}")
        for k, v in self.coefficients.items():
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"coefficients.{k}: must be a finite number, got {v!r}")
        if self.coefficients.get("treatment_noise_sd", 0.0) < 0:
            raise ConfigError("coefficients.treatment_noise_sd: must be >= 0")
        if self.generator == "real_inspired":
            _check_range_ratio(self)
            if self.targets.get("cor_mode") not in COR_MODES:
                raise ConfigError(f"targets.cor_mode: expected one of {COR_MODES}, "
                                  f"got {self.targets.get('cor_mode')!r}")

    @property
    def sites(self) -> SiteSet:
        return build_grid(self.n_per_side, self.extent)

    @property
    def true_effects(self) -> tuple:
        c = self.coefficients
        if self.generator == "real_inspired":
            return (math.sqrt(c["f"]), None)
        if self.generator == "interference":
            return (c["delta1"], c["delta2"])
        return (c["delta1"], None)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "generator": self.generator,
            "n_per_side": self.n_per_side,
            "extent": self.extent,
            "coefficients": dict(sorted(self.coefficients.items())),
            "gp_ranges": dict(sorted(self.gp_ranges.items())),
            "targets": self.targets,
            "max_attempts": self.max_attempts,
            "batch_size": self.batch_size,
            "replicates": self.replicates,
            "base_seed": self.base_seed,
            "models": list(self.models),
            "error_models": list(self.error_models),
            "tune": self.tune,
        }


def _check_range_ratio(cfg: ScenarioConfig):
    target = cfg.targets.get("range_ratio_z")
    if target is None:
        return
    ratio = practical_range(cfg.gp_ranges["z"]) / (math.sqrt(2.0) * cfg.extent)
    tol = cfg.targets.get("range_ratio_tolerance", 0.02)
    if abs(ratio - target) > tol:
        raise ConfigError(
            f"gp_ranges.z: practical-range ratio {ratio:.4f} is more than {tol} "
            f"from the observed {target:.4f}"
        )


@dataclass
class GeneratedReplicate:
    """An accepted dataset with its hidden truth.

    ``fields`` holds every simulated field, including latent confounders,
    keyed by name; estimators only ever see the CausalDataset views.
    """

    fields: dict
    sites: SiteSet
    true_effects: tuple
    achieved_cors: dict
    attempts_used: int
    instruments: tuple = ("z",)

    def dataset(self, instrument: str | None = None) -> CausalDataset:
        name = instrument or self.instruments[0]
        if name not in self.instruments:
            raise KeyError(f"unknown instrument {name!r}; have {self.instruments}")
        f = self.fields
        return CausalDataset(z=f[name], a=f["a"], y=f["y"], sites=self.sites)


def replicate_seed(base_seed: int, cell_index: int, replicate: int) -> np.random.SeedSequence:
    """Independent, reproducible seed for replicate ``replicate`` of cell ``cell_index``."""
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(cell_index), int(replicate)))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _cor_cols(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Column-wise Pearson correlation of two (n, k) arrays."""
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    return (xc * yc).sum(axis=0) / np.sqrt((xc * xc).sum(axis=0) * (yc * yc).sum(axis=0))


def _gp(sites, phi, rng, k):
    factor = gp_factor(sites, CovarianceSpec(1.0, phi, 0.0))
    return factor @ rng.standard_normal((len(sites), k))


def _reject_loop(cfg: ScenarioConfig, rng, propose):
    """Call ``propose(rng, k) -> (candidates, ok_mask, cors)`` until acceptance.

    ``candidates`` is a dict of (n, k) arrays, ``cors`` a dict of length-k arrays.
    """
    attempts = 0
    best = None
    while attempts < cfg.max_attempts:
        k = min(cfg.batch_size, cfg.max_attempts - attempts)
        cands, ok, cors = propose(rng, k)
        hits = np.flatnonzero(ok)
        if hits.size:
            j = int(hits[0])
            attempts += j + 1
            fields = {name: arr[:, j].copy() for name, arr in cands.items()}
            return fields, {name: float(c[j]) for name, c in cors.items()}, attempts
        attempts += k
        best = {name: float(c[-1]) for name, c in cors.items()}
    raise UnattainableTargetError(
        f"{cfg.name}: no candidate within tolerance after {attempts} attempts "
        f"(last achieved {best})",
        achieved=best,
        attempts=attempts,
    )


def _within(values, target, tol):
    return np.abs(values - target) <= tol


def gen_valid_iv(cfg: ScenarioConfig, seed, sites: SiteSet | None = None) -> GeneratedReplicate:
    """Local and spatial instruments, spatial confounder U, spatial response error V."""
    if cfg.generator != "valid_iv":
        raise ConfigError(f"gen_valid_iv needs generator 'valid_iv', got {cfg.generator!r}")
    return _gen_two_instrument(cfg, seed, sites, invalid=False)


def gen_invalid_iv(cfg: ScenarioConfig, seed, sites: SiteSet | None = None) -> GeneratedReplicate:
    """As gen_valid_iv, but U = gamma1 * Z_spatial + gamma2 * Z_local + W."""
    if cfg.generator != "invalid_iv":
        raise ConfigError(f"gen_invalid_iv needs generator 'invalid_iv', got {cfg.generator!r}")
    return _gen_two_instrument(cfg, seed, sites, invalid=True)


def _two_instrument_latents(cfg, sites, rng, k, invalid):
    c, r = cfg.coefficients, cfg.gp_ranges
    n = len(sites)
    z_spatial = _gp(sites, r["z_spatial"], rng, k)
    if invalid:
        w = _gp(sites, r["w"], rng, k)
        z_local = rng.standard_normal((n, k))
        u = c["gamma1"] * z_spatial + c["gamma2"] * z_local + w
    else:
        u = _gp(sites, r["u"], rng, k)
        z_local = rng.standard_normal((n, k))
    return z_local, z_spatial, u


def _treatment(c, z_local, z_spatial, u, rng):
    a = c["beta1"] * z_local + c["beta2"] * z_spatial + c["beta3"] * u
    sd = c.get("treatment_noise_sd", 0.0)
    if sd > 0:
        a = a + sd * rng.standard_normal(a.shape)
    return a


def _gen_two_instrument(cfg, seed, sites, invalid):
    rng = _rng(seed)
    sites = sites or cfg.sites
    c, r, t = cfg.coefficients, cfg.gp_ranges, cfg.targets
    tol = t["tolerance"]

    def propose(rng, k):
        z_local, z_spatial, u = _two_instrument_latents(cfg, sites, rng, k, invalid)
        a = _treatment(c, z_local, z_spatial, u, rng)
        cors = {
            "cor_zlocal_a": _cor_cols(z_local, a),
            "cor_zspatial_a": _cor_cols(z_spatial, a),
            "cor_zlocal_u": _cor_cols(z_local, u),
            "cor_zspatial_u": _cor_cols(z_spatial, u),
        }
        ok = (
            _within(cors["cor_zlocal_a"], t["cor_za"], tol)
            & _within(cors["cor_zspatial_a"], t["cor_za"], tol)
            & _within(cors["cor_zlocal_u"], t["cor_zu"], tol)
            & _within(cors["cor_zspatial_u"], t["cor_zu"], tol)
        )
        return {"z_local": z_local, "z_spatial": z_spatial, "u": u, "a": a}, ok, cors

    fields, cors, attempts = _reject_loop(cfg, rng, propose)
    n = len(sites)
    v = _gp(sites, r["v"], rng, 1)[:, 0]
    eps2 = rng.standard_normal(n)
    fields["v"] = v
    fields["y"] = c["delta1"] * fields["a"] + c["delta2"] * fields["u"] + c["delta3"] * v + eps2
    return GeneratedReplicate(
        fields=fields,
        sites=sites,
        true_effects=cfg.true_effects,
        achieved_cors=cors,
        attempts_used=attempts,
        instruments=("z_local", "z_spatial"),
    )


def _real_inspired_draw(cfg: ScenarioConfig, sites, rng, k):
    c, r = cfg.coefficients, cfg.gp_ranges
    z = _gp(sites, r["z"], rng, k)
    u = _gp(sites, r["u"], rng, k)
    w = _gp(sites, r["w"], rng, k)
    eps = rng.standard_normal(z.shape)
    a = math.sqrt(c["a"]) * z + math.sqrt(c["b"]) * u + math.sqrt(c["c"]) * w
    y = math.sqrt(c["f"]) * a + math.sqrt(c["g"]) * u + math.sqrt(c["j"]) * eps
    pairs = {"za": (z, a), "zy": (z, y), "ay": (a, y), "zu": (z, u)}
    cors = {f"cor_{k_}": _cor_cols(*pairs[k_]) for k_ in cfg.targets["cor"]}
    return {"z": z, "u": u, "w": w, "a": a, "y": y}, cors


def expected_correlations(cfg: ScenarioConfig, seed, draws: int | None = None) -> dict:
    """Monte Carlo mean of each targeted sample correlation."""
    rng = _rng(seed)
    draws = draws or cfg.targets.get("expected_draws", 400)
    sums = dict.fromkeys((f"cor_{k}" for k in cfg.targets["cor"]), 0.0)
    sites = cfg.sites
    for start in range(0, draws, cfg.batch_size):
        _, cors = _real_inspired_draw(cfg, sites, rng, min(cfg.batch_size, draws - start))
        for k in sums:
            sums[k] += float(cors[k].sum())
    return {k: v / draws for k, v in sums.items()}


def check_expected_correlations(cfg: ScenarioConfig, seed) -> dict:
    """Raise UnattainableTargetError unless every mean correlation is within tolerance."""
    means = expected_correlations(cfg, seed)
    tol = cfg.targets["tolerance"]
    bad = {k: v for k, v in means.items() if abs(v - cfg.targets["cor"][k[4:]]) > tol}
    if bad:
        raise UnattainableTargetError(
            f"{cfg.name}: expected correlations {bad} are more than {tol} from their targets",
            achieved=means, attempts=0,
        )
    return means


def gen_real_inspired(cfg: ScenarioConfig, seed, sites: SiteSet | None = None) -> GeneratedReplicate:
    """Fields mixed with fixed variance shares to mimic the observed data.

    With ``cor_mode = "expected"`` every draw is kept; the targets constrain
    the design (see check_expected_correlations), not each replicate.
    """
    if cfg.generator != "real_inspired":
        raise ConfigError(f"gen_real_inspired needs generator 'real_inspired', got {cfg.generator!r}")
    rng = _rng(seed)
    sites = sites or cfg.sites
    t = cfg.targets

    if t.get("cor_mode", "expected") == "expected":
        cands, cors = _real_inspired_draw(cfg, sites, rng, 1)
        fields = {name: arr[:, 0].copy() for name, arr in cands.items()}
        cors = {name: float(v[0]) for name, v in cors.items()}
        attempts = 1
    else:
        def propose(rng, k):
            cands, cors = _real_inspired_draw(cfg, sites, rng, k)
            ok = np.ones(k, dtype=bool)
            for k_, target in t["cor"].items():
                ok &= _within(cors[f"cor_{k_}"], target, t["tolerance"])
            return cands, ok, cors

        fields, cors, attempts = _reject_loop(cfg, rng, propose)
    return GeneratedReplicate(
        fields=fields,
        sites=sites,
        true_effects=cfg.true_effects,
        achieved_cors=cors,
        attempts_used=attempts,
    )


def interference_kernel(cfg: ScenarioConfig) -> KernelSpec:
    return KernelSpec.queen(grid_spacing(cfg.n_per_side, cfg.extent))


def gen_interference(cfg: ScenarioConfig, seed, sites: SiteSet | None = None, kmat=None) -> GeneratedReplicate:
    """Treatment spills over to queen neighbours through the kernel average."""
    if cfg.generator != "interference":
        raise ConfigError(f"gen_interference needs generator 'interference', got {cfg.generator!r}")
    rng = _rng(seed)
    sites = sites or cfg.sites
    c, r, t = cfg.coefficients, cfg.gp_ranges, cfg.targets
    if kmat is None:
        kmat = kernel_matrix(sites, interference_kernel(cfg))

    def propose(rng, k):
        z = _gp(sites, r["z"], rng, k)
        u = _gp(sites, r["u"], rng, k)
        eps2 = rng.standard_normal(z.shape)
        a = c["gamma0"] + c["gamma1"] * z + c["gamma2"] * u + eps2
        cors = {"cor_za": _cor_cols(z, a)}
        ok = _within(cors["cor_za"], t["cor_za"], t["tolerance"])
        return {"z": z, "u": u, "a": a}, ok, cors

    fields, cors, attempts = _reject_loop(cfg, rng, propose)
    n = len(sites)
    v = _gp(sites, r["v"], rng, 1)[:, 0]
    eps1 = rng.standard_normal(n)
    a = fields["a"]
    a_tilde = kmat @ a
    fields["v"] = v
    fields["a_tilde"] = a_tilde
    fields["y"] = (
        c["beta0"] + c["delta1"] * a + c["delta2"] * a_tilde
        + c["beta1"] * fields["u"] + c["beta2"] * v + eps1
    )
    return GeneratedReplicate(
        fields=fields,
        sites=sites,
        true_effects=cfg.true_effects,
        achieved_cors=cors,
        attempts_used=attempts,
    )


GENERATOR_FUNCS = {
    "valid_iv": gen_valid_iv,
    "invalid_iv": gen_invalid_iv,
    "real_inspired": gen_real_inspired,
    "interference": gen_interference,
}


def generate(cfg: ScenarioConfig, seed, sites: SiteSet | None = None) -> GeneratedReplicate:
    return GENERATOR_FUNCS[cfg.generator](cfg, seed, sites)


# --- coefficient tuning for sweep cells -------------------------------------


def tune_coefficients(cfg: ScenarioConfig, n_pilot: int = 200, rounds: int = 4) -> ScenarioConfig:
    """Return a copy of a two-instrument config with coefficients tuned to its targets.

    Pilot latent fields are drawn once (common random numbers). The confounder
    loading ``gamma1 = gamma2`` is root-found so the mean realized
    cor(Z, U) over pilots matches ``cor_zu``; then ``beta1`` and ``beta2`` are
    root-found alternately against the mean realized cor(Z_local, A) and
    cor(Z_spatial, A). Negative targets are reached through negative
    coefficients.
    """
    if cfg.generator not in ("valid_iv", "invalid_iv"):
        raise ConfigError(f"tuning only applies to two-instrument generators, not {cfg.generator!r}")
    out = copy.deepcopy(cfg)
    c, r, t = out.coefficients, out.gp_ranges, out.targets
    if c.get("treatment_noise_sd", 0.0) > 0:
        raise ConfigError("tuning requires treatment_noise_sd = 0")
    sites = cfg.sites
    rng = np.random.default_rng(np.random.SeedSequence(int(cfg.base_seed), spawn_key=(2**31 - 1,)))
    z_spatial = _gp(sites, r["z_spatial"], rng, n_pilot)
    base = _gp(sites, r.get("w", r.get("u", 0.2)), rng, n_pilot)
    z_local = rng.standard_normal(z_spatial.shape)

    if out.generator == "invalid_iv":
        def zu_gap(g):
            u = g * (z_spatial + z_local) + base
            return 0.5 * (_cor_cols(z_local, u).mean() + _cor_cols(z_spatial, u).mean()) - t["cor_zu"]

        g = _root(zu_gap, -20.0, 20.0, "cor_zu", t["cor_zu"])
        c["gamma1"] = c["gamma2"] = g
        u = g * (z_spatial + z_local) + base
    else:
        if t.get("cor_zu", 0.0) != 0.0:
            raise ConfigError("valid_iv cells must target cor_zu = 0")
        u = base

    def za_gap(which, value):
        b1, b2 = (value, c["beta2"]) if which == "beta1" else (c["beta1"], value)
        a = b1 * z_local + b2 * z_spatial + c["beta3"] * u
        z = z_local if which == "beta1" else z_spatial
        return _cor_cols(z, a).mean() - t["cor_za"]

    for _ in range(rounds):
        for which in ("beta1", "beta2"):
            c[which] = _root(lambda v: za_gap(which, v), -50.0, 50.0, "cor_za", t["cor_za"])
    out.tune = False
    return out


def _root(fn, lo, hi, label, target):
    flo, fhi = fn(lo), fn(hi)
    if np.sign(flo) == np.sign(fhi):
        raise UnattainableTargetError(
            f"{label}={target} is outside the attainable range [{flo + target:.3f}, {fhi + target:.3f}]",
            achieved={label: float(fhi + target)},
        )
    return float(optimize.brentq(fn, lo, hi, xtol=1e-6))
