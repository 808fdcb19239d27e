"""Config-driven Monte Carlo runner.

A run config is a TOML file. Top-level keys describe a base cell; optional
``[[cells]]`` tables override it per cell and an optional ``[sweep]`` table
expands target-correlation grids into tuned cells. Replicate ``r`` of cell
``c`` is seeded from ``(base_seed, c, r)`` alone, and records are sorted
before aggregation, so outputs do not depend on the worker count.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import multiprocessing as mp
import time
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from spatial_iv import __version__
from spatial_iv.errors import (
    ConfigError,
    FitError,
    IsolatedSiteError,
    NumericalDegeneracyError,
    SingularDesignError,
    UnattainableTargetError,
    WeakInstrumentError,
)
from spatial_iv.iv import no_instrument, no_iv, spillover_estimates, two_stage_iv
from spatial_iv.metrics import summarize_records, sweep_grid, write_csv, write_json, write_summaries
from spatial_iv.scenario import (
    DEFAULTS,
    GENERATORS,
    ScenarioConfig,
    check_expected_correlations,
    generate,
    interference_kernel,
    replicate_seed,
    tune_coefficients,
)

log = logging.getLogger(__name__)

MODELS = {
    "valid_iv": ("no_iv", "local_iv", "spatial_iv"),
    "invalid_iv": ("no_iv", "local_iv", "spatial_iv"),
    "real_inspired": ("no_iv", "iv"),
    "interference": ("no_instrument", "type0", "type1", "type2"),
}
ERROR_MODELS = ("iid", "spatial")
CELL_KEYS = {
    "n_per_side", "extent", "coefficients", "gp_ranges", "targets", "max_attempts",
    "batch_size", "replicates", "models", "error_models",
}
TOP_KEYS = CELL_KEYS | {"name", "generator", "base_seed", "description", "cells", "sweep"}
FIT_FAILURES = (FitError, SingularDesignError, WeakInstrumentError, NumericalDegeneracyError,
                IsolatedSiteError)
RECORD_COLUMNS = (
    "scenario", "replicate", "model", "error_model", "param", "estimate", "se",
    "ci_low", "ci_high", "truth", "cor_z_resid", "failed", "attempts",
)


@dataclass
class RunConfig:
    name: str
    cells: list
    kind: str
    config_hash: str
    base_seed: int
    raw: dict = field(default_factory=dict)
    cell_info: dict = field(default_factory=dict)
    cell_index: list = field(default_factory=list)


def config_hash(raw: dict) -> str:
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path, *, seed=None, replicates=None, only_cells=None) -> RunConfig:
    """Parse and validate a run config. Errors name the line or field at fault."""
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_config(raw, source=str(path), seed=seed, replicates=replicates, only_cells=only_cells)


def parse_config(raw: dict, source="<config>", *, seed=None, replicates=None, only_cells=None) -> RunConfig:
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {sorted(unknown)}")
    for key in ("name", "generator"):
        if key not in raw:
            raise ConfigError(f"{source}: missing required key {key!r}")
    generator = raw["generator"]
    if generator not in GENERATORS:
        raise ConfigError(f"{source}: generator: unknown {generator!r}, expected one of {GENERATORS}")
    effective = dict(raw)
    if seed is not None:
        effective["base_seed"] = int(seed)
    if replicates is not None:
        effective["replicates"] = int(replicates)
    base_seed = effective.get("base_seed", 0)
    if not isinstance(base_seed, int):
        raise ConfigError(f"{source}: base_seed: must be an integer")
    base = {k: v for k, v in effective.items() if k in CELL_KEYS}

    def make(name, overrides, tune=False):
        merged = dict(base)
        for k, v in overrides.items():
            if isinstance(v, dict) and isinstance(merged.get(k), dict):
                merged[k] = {**merged[k], **v}
            else:
                merged[k] = v
        if replicates is not None:
            merged["replicates"] = int(replicates)
        models = merged.setdefault("models", list(MODELS[generator]))
        bad = set(models) - set(MODELS[generator])
        if bad:
            raise ConfigError(f"{source}: cell {name!r}: models: unknown {sorted(bad)} for {generator}")
        ems = merged.setdefault("error_models", list(ERROR_MODELS))
        if set(ems) - set(ERROR_MODELS) or not ems:
            raise ConfigError(f"{source}: cell {name!r}: error_models: must be a nonempty subset of {ERROR_MODELS}")
        for sub in ("coefficients", "gp_ranges", "targets"):
            known = set(DEFAULTS[generator][sub])
            extra = set(merged.get(sub, {})) - known
            if extra:
                raise ConfigError(f"{source}: cell {name!r}: {sub}: unknown key(s) {sorted(extra)}")
        try:
            return ScenarioConfig.build(name, generator, base_seed=base_seed, tune=tune, **merged)
        except ConfigError as exc:
            raise ConfigError(f"{source}: cell {name!r}: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(f"{source}: cell {name!r}: {exc}") from exc

    cells, info, kind = [], {}, "simulate"
    if "sweep" in effective:
        kind = "sweep"
        sw = effective["sweep"]
        za, zu = sw.get("cor_za", []), sw.get("cor_zu", [])
        if not za or not zu:
            raise ConfigError(f"{source}: sweep: cor_za and cor_zu must be nonempty lists")
        if generator not in ("valid_iv", "invalid_iv"):
            raise ConfigError(f"{source}: sweep: needs a two-instrument generator")
        for a in za:
            for u in zu:
                name = f"za{a:+.2f}_zu{u:+.2f}"
                cells.append(make(name, {"targets": {"cor_za": float(a), "cor_zu": float(u)}}, tune=True))
                info[name] = {"cor_za": float(a), "cor_zu": float(u)}
    elif "cells" in effective:
        for i, over in enumerate(effective["cells"]):
            over = dict(over)
            name = over.pop("name", f"{effective['name']}-{i}")
            extra = set(over) - CELL_KEYS
            if extra:
                raise ConfigError(f"{source}: cells[{i}]: unknown key(s) {sorted(extra)}")
            cells.append(make(name, over))
    else:
        cells.append(make(effective["name"], {}))
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise ConfigError(f"{source}: duplicate cell names")
    if only_cells:
        missing = set(only_cells) - set(names)
        if missing:
            raise ConfigError(f"{source}: unknown cell(s) {sorted(missing)}; have {names}")
        # cell indices, and so replicate seeds, are kept from the full config
        effective["only_cells"] = sorted(only_cells)
    keep = [i for i, c in enumerate(cells) if not only_cells or c.name in only_cells]
    return RunConfig(
        name=effective["name"],
        cells=cells,
        cell_index=keep,
        kind=kind,
        config_hash=config_hash(effective),
        base_seed=base_seed,
        raw=effective,
        cell_info=info,
    )


# --- replicate execution -----------------------------------------------------


def _records_for(cfg, rep, model, em, estimate, truth, attempts, with_cor=True, params=("delta1",)):
    out = []
    for param in params:
        t = truth[0] if param == "delta1" else truth[1]
        base = {
            "scenario": cfg.name, "replicate": rep, "model": model, "error_model": em,
            "param": param, "truth": t, "attempts": attempts,
        }
        if estimate is None:
            out.append({**base, "estimate": math.nan, "se": math.nan, "ci_low": math.nan,
                        "ci_high": math.nan, "cor_z_resid": math.nan, "failed": True})
            continue
        eff = getattr(estimate, param)
        cor = estimate.iv_residual_cor if with_cor and estimate.iv_residual_cor is not None else math.nan
        out.append({**base, "estimate": eff.estimate, "se": eff.se, "ci_low": eff.ci[0],
                    "ci_high": eff.ci[1], "cor_z_resid": cor, "failed": False})
    return out


def _safe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except FIT_FAILURES as exc:
        log.debug("fit failed: %s", exc)
        return None


def run_replicate(cfg: ScenarioConfig, cell_index: int, rep: int) -> list:
    """Generate one replicate and fit every configured model to it.

    Raises UnattainableTargetError when rejection sampling fails.
    """
    seed = replicate_seed(cfg.base_seed, cell_index, rep)
    sites = cfg.sites
    g = generate(cfg, seed, sites)
    truth = g.true_effects
    att = g.attempts_used
    recs = []
    for em in cfg.error_models:
        if cfg.generator in ("valid_iv", "invalid_iv"):
            for model in cfg.models:
                if model == "no_iv":
                    est = _safe(no_iv, g.dataset("z_local"), em)
                    recs += _records_for(cfg, rep, model, em, est, truth, att, with_cor=False)
                else:
                    z = "z_local" if model == "local_iv" else "z_spatial"
                    est = _safe(two_stage_iv, g.dataset(z), em, em)
                    recs += _records_for(cfg, rep, model, em, est, truth, att)
        elif cfg.generator == "real_inspired":
            ds = g.dataset()
            for model in cfg.models:
                if model == "no_iv":
                    est = _safe(no_iv, ds, em)
                    recs += _records_for(cfg, rep, model, em, est, truth, att, with_cor=False)
                else:
                    est = _safe(two_stage_iv, ds, em, em)
                    recs += _records_for(cfg, rep, model, em, est, truth, att)
        else:
            ds = g.dataset()
            kernel = interference_kernel(cfg)
            params = ("delta1", "delta2")
            if "no_instrument" in cfg.models:
                est = _safe(no_instrument, ds, kernel, em)
                recs += _records_for(cfg, rep, "no_instrument", em, est, truth, att, params=params)
            types = tuple(m for m in cfg.models if m.startswith("type"))
            if types:
                res = _safe(spillover_estimates, ds, kernel, em, em, types) or {}
                for t in types:
                    recs += _records_for(cfg, rep, t, em, res.get(t), truth, att, params=params)
    return recs


_WORKER_CELLS = None


def _init_worker(cells):
    global _WORKER_CELLS
    _WORKER_CELLS = cells


def _task(args):
    ci, rep = args
    cfg = _WORKER_CELLS[ci]
    try:
        return ci, rep, run_replicate(cfg, ci, rep), None
    except UnattainableTargetError as exc:
        return ci, rep, [], str(exc)


def _prepare_cells(run: RunConfig):
    """Tune sweep cells and probe replicate 0 generation; returns (cells, status)."""
    cells, status = [], {}
    active = set(run.cell_index or range(len(run.cells)))
    for ci, cfg in enumerate(run.cells):
        if ci not in active:
            status[cfg.name] = {"status": "skipped"}
            cells.append(cfg)
            continue
        try:
            if cfg.tune:
                cfg = tune_coefficients(cfg)
            if cfg.generator == "real_inspired" and cfg.targets.get("cor_mode") == "expected":
                # seed stream disjoint from every replicate's
                check_expected_correlations(cfg, replicate_seed(cfg.base_seed, ci, 2**32))
            generate(cfg, replicate_seed(cfg.base_seed, ci, 0), cfg.sites)
            status[cfg.name] = {"status": "ok"}
        except UnattainableTargetError as exc:
            status[cfg.name] = {"status": "failed", "error": str(exc)}
        cells.append(cfg)
    return cells, status


def execute(run: RunConfig, workers: int = 1, progress=None):
    """Run every replicate of every live cell; returns (records, manifest cells, timing)."""
    t0 = time.perf_counter()
    cells, status = _prepare_cells(run)
    tasks = [
        (ci, rep)
        for ci, cfg in enumerate(cells)
        if status[cfg.name]["status"] == "ok"
        for rep in range(cfg.replicates)
    ]
    results = []
    cell_time = {c.name: 0.0 for c in cells if status[c.name]["status"] != "skipped"}
    if workers <= 1:
        _init_worker(cells)
        for i, task in enumerate(tasks):
            ts = time.perf_counter()
            results.append(_task(task))
            cell_time[cells[task[0]].name] += time.perf_counter() - ts
            if progress:
                progress(i + 1, len(tasks))
    else:
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
        with ctx.Pool(workers, initializer=_init_worker, initargs=(cells,)) as pool:
            for i, res in enumerate(pool.imap_unordered(_task, tasks, chunksize=1)):
                results.append(res)
                if progress:
                    progress(i + 1, len(tasks))
    results.sort(key=lambda r: (r[0], r[1]))
    records = [rec for _, _, recs, _ in results for rec in recs]
    gen_fail = {}
    attempts = {}
    for ci, rep, recs, err in results:
        name = cells[ci].name
        if err:
            gen_fail.setdefault(name, []).append(rep)
        elif recs:
            attempts.setdefault(name, []).append(recs[0]["attempts"])
    manifest_cells = []
    for cfg in cells:
        if status[cfg.name]["status"] == "skipped":
            continue
        st = dict(status[cfg.name])
        if cfg.name in gen_fail:
            st = {"status": "failed",
                  "error": f"rejection sampling failed for replicates {gen_fail[cfg.name]}"}
        fits = {}
        for rec in records:
            if rec["scenario"] == cfg.name and rec["param"] == "delta1" and rec["failed"]:
                key = f"{rec['model']}/{rec['error_model']}"
                fits[key] = fits.get(key, 0) + 1
        att = attempts.get(cfg.name, [])
        manifest_cells.append({
            "name": cfg.name,
            **st,
            "replicates": cfg.replicates,
            "completed": len(att),
            "fit_failures": dict(sorted(fits.items())),
            "mean_attempts": (sum(att) / len(att)) if att else None,
            "coefficients": dict(sorted(cfg.coefficients.items())),
        })
    timing = {"total_seconds": time.perf_counter() - t0, "cells": cell_time, "workers": workers}
    failed = {c["name"] for c in manifest_cells if c["status"] != "ok"}
    records = [r for r in records if r["scenario"] not in failed]
    return records, manifest_cells, timing


def write_outputs(run: RunConfig, records, manifest_cells, timing, out_dir, fmt="csv") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries = summarize_records(records)
    paths = {}
    metrics_path = out / f"metrics.{fmt}"
    write_summaries(metrics_path, summaries, fmt)
    paths["metrics"] = metrics_path.name
    rep_path = out / "replicates.csv"
    write_csv(rep_path, records, RECORD_COLUMNS)
    paths["replicates"] = rep_path.name
    if run.kind == "sweep" and summaries:
        grid = sweep_grid(summaries, run.cell_info)
        grid_path = out / f"sweep_grid.{fmt}"
        if fmt == "json":
            write_json(grid_path, grid)
        else:
            write_csv(grid_path, grid)
        paths["sweep_grid"] = grid_path.name
    manifest = {
        "name": run.name,
        "kind": run.kind,
        "config_hash": run.config_hash,
        "base_seed": run.base_seed,
        "version": __version__,
        "cells": manifest_cells,
        "outputs": paths,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out / "timing.json", "w", encoding="utf-8") as fh:
        json.dump(timing, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def run_config(path, out_dir, *, workers=1, fmt="csv", seed=None, replicates=None, progress=None):
    """Load, execute and write a run; returns the manifest dict."""
    run = load_config(path, seed=seed, replicates=replicates)
    records, cells, timing = execute(run, workers=workers, progress=progress)
    return write_outputs(run, records, cells, timing, out_dir, fmt)


def cached_run(path, out_dir, *, only_cells=None, workers=1, replicates=None, progress=None) -> dict:
    """Reuse ``out_dir`` when its manifest matches the config hash and version; else rerun."""
    run = load_config(path, replicates=replicates, only_cells=only_cells)
    man_path = Path(out_dir) / "manifest.json"
    if man_path.exists():
        man = json.loads(man_path.read_text())
        if man.get("config_hash") == run.config_hash and man.get("version") == __version__:
            return man
    records, cells, timing = execute(run, workers=workers, progress=progress)
    return write_outputs(run, records, cells, timing, out_dir)
