"""Aggregation of replicate estimates into bias / MSE / coverage tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from spatial_iv.errors import ConfigError

COLUMNS = (
    "scenario", "model", "error_model", "param",
    "bias", "bias_se", "mse", "mse_se", "coverage", "coverage_se",
    "cor_z_resid", "cor_z_resid_se", "n_reps", "n_failed",
)


class InsufficientDataError(ConfigError):
    pass


class IncompleteGridError(ConfigError):
    pass


@dataclass
class ReplicateSummary:
    scenario: str
    model: str
    error_model: str
    param: str
    bias: float
    bias_se: float
    mse: float
    mse_se: float
    coverage: float
    coverage_se: float
    cor_z_resid: float
    cor_z_resid_se: float
    n_reps: int
    n_failed: int

    def row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _mean_se(x: np.ndarray):
    x = x[np.isfinite(x)]
    if x.size == 0:
        return math.nan, math.nan
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan
    return float(np.mean(x)), se


def summary_stats(estimates, ci_low, ci_high, truth, cor=None) -> dict:
    """Bias, MSE, coverage and mean correlation with Monte Carlo standard errors.

    The MSE standard error is the sample SD of squared errors over sqrt(R);
    the coverage standard error is sqrt(p (1 - p) / R).
    """
    est = np.asarray(estimates, dtype=float)
    r = est.size
    if r < 2:
        raise InsufficientDataError(f"need at least 2 replicates, got {r}")
    err = est - truth
    sq = err * err
    covered = (np.asarray(ci_low) <= truth) & (truth <= np.asarray(ci_high))
    p = float(covered.mean())
    cor_mean, cor_se = _mean_se(np.asarray(cor, dtype=float)) if cor is not None else (math.nan, math.nan)
    return {
        "bias": float(err.mean()),
        "bias_se": float(err.std(ddof=1) / math.sqrt(r)),
        "mse": float(sq.mean()),
        "mse_se": float(sq.std(ddof=1) / math.sqrt(r)),
        "coverage": p,
        "coverage_se": math.sqrt(p * (1.0 - p) / r),
        "cor_z_resid": cor_mean,
        "cor_z_resid_se": cor_se,
        "n_reps": r,
    }


def summarize(estimates, truth, param="delta1", *, scenario="", model="", error_model="", n_failed=0,
              with_cor=True) -> ReplicateSummary:
    """Summarize a list of CausalEstimate for one parameter.

    ``truth`` is the true value of ``param``; a ``(delta1, delta2)`` tuple is
    also accepted and indexed by ``param``.
    """
    if not estimates:
        raise InsufficientDataError("no estimates to summarize")
    if isinstance(truth, (tuple, list)):
        truth = truth[0] if param == "delta1" else truth[1]
    effects = [getattr(e, param) for e in estimates]
    cor = [e.iv_residual_cor if e.iv_residual_cor is not None else math.nan for e in estimates]
    stats = summary_stats(
        [f.estimate for f in effects],
        [f.ci[0] for f in effects],
        [f.ci[1] for f in effects],
        truth,
        cor if with_cor else None,
    )
    return ReplicateSummary(scenario=scenario, model=model, error_model=error_model, param=param,
                            n_failed=n_failed, **stats)


def summarize_records(records, with_cor_models=None) -> list:
    """Group flat per-replicate records into sorted ReplicateSummary rows.

    Each record needs scenario, model, error_model, param, estimate, ci_low,
    ci_high, truth, cor_z_resid and failed. Failed fits are excluded and
    counted.
    """
    groups = {}
    for rec in records:
        key = (rec["scenario"], rec["model"], rec["error_model"], rec["param"])
        groups.setdefault(key, []).append(rec)
    out = []
    for key in sorted(groups):
        recs = sorted(groups[key], key=lambda r: r["replicate"])
        ok = [r for r in recs if not r["failed"]]
        n_failed = len(recs) - len(ok)
        if len(ok) < 2:
            stats = dict.fromkeys(
                ("bias", "bias_se", "mse", "mse_se", "coverage", "coverage_se",
                 "cor_z_resid", "cor_z_resid_se"), math.nan)
            stats["n_reps"] = len(ok)
        else:
            use_cor = with_cor_models is None or key[1] in with_cor_models
            stats = summary_stats(
                [r["estimate"] for r in ok],
                [r["ci_low"] for r in ok],
                [r["ci_high"] for r in ok],
                ok[0]["truth"],
                [r["cor_z_resid"] for r in ok] if use_cor else None,
            )
        out.append(ReplicateSummary(*key, n_failed=n_failed, **stats))
    return out


def sweep_grid(summaries, cell_info=None, baseline_model="no_iv") -> list:
    """Long-format sweep records: log|bias|, log relative bias and coverage deficit.

    Relative bias compares each model with ``baseline_model`` fit in the same
    cell with the same error model. ``cell_info`` maps a scenario name to
    extra columns (for example the cell's target correlations).
    """
    cell_info = cell_info or {}
    base = {
        (s.scenario, s.error_model, s.param): s
        for s in summaries
        if s.model == baseline_model
    }
    out = []
    for s in summaries:
        ref = base.get((s.scenario, s.error_model, s.param))
        if ref is None:
            raise IncompleteGridError(
                f"no {baseline_model!r} baseline for {s.scenario}/{s.error_model}/{s.param}"
            )
        log_abs = math.log(abs(s.bias)) if s.bias else -math.inf
        log_rel = (
            math.log(abs(s.bias) / abs(ref.bias)) if s.bias and ref.bias else math.nan
        )
        info = cell_info.get(s.scenario, {})
        for metric, value in (
            ("log_abs_bias", log_abs),
            ("log_rel_bias", log_rel),
            ("coverage_deficit", 95.0 - 100.0 * s.coverage),
        ):
            out.append({
                "scenario": s.scenario, **info, "model": s.model, "error_model": s.error_model,
                "param": s.param, "metric": metric, "value": value,
            })
    return out


def fmt_num(x) -> str:
    """17 significant digits; blank for NaN so CSVs stay byte-stable."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else f"{float(x):.17g}"
    return str(x)


def write_csv(path, rows, columns=None):
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt_num(row.get(c, "")) for c in columns])


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, (np.floating,)):
        return _json_safe(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def write_json(path, rows, sort_keys=True):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([{k: _json_safe(v) for k, v in r.items()} for r in rows], fh, indent=1, sort_keys=sort_keys)
        fh.write("\n")


def write_summaries(path, summaries, fmt="csv"):
    rows = [s.row() for s in summaries]
    if fmt == "json":
        write_json(path, rows)
    else:
        write_csv(path, rows, COLUMNS)


def read_summaries(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            vals = {}
            for k in COLUMNS:
                v = row[k]
                if k in ("scenario", "model", "error_model", "param"):
                    vals[k] = v
                elif k in ("n_reps", "n_failed"):
                    vals[k] = int(v)
                else:
                    vals[k] = float(v) if v != "" else math.nan
            out.append(ReplicateSummary(**vals))
    return out


def as_dicts(summaries):
    return [asdict(s) for s in summaries]
