import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatial_iv.metrics import (
    COLUMNS,
    IncompleteGridError,
    InsufficientDataError,
    ReplicateSummary,
    read_summaries,
    summarize,
    summarize_records,
    summary_stats,
    sweep_grid,
    write_summaries,
)
from spatial_iv.iv import CausalEstimate, Effect


def _est(x, half):
    return CausalEstimate(delta1=Effect(x, half / 1.96, (x - half, x + half)), stage2=None,
                          iv_residual_cor=0.1)


def test_exact_estimates():
    s = summarize([_est(1.0, 0.1)] * 4, 1.0)
    assert (s.bias, s.mse, s.coverage) == (0.0, 0.0, 1.0)
    assert s.cor_z_resid == pytest.approx(0.1)


def test_alternating_misses():
    s = summarize([_est(2.0, 0.5), _est(0.0, 0.5)] * 3, 1.0)
    assert s.bias == 0.0 and s.mse == 1.0 and s.coverage == 0.0


def test_coverage_se_formula():
    est = [_est(1.0, 0.5)] * 998 + [_est(3.0, 0.5)] * 2
    s = summarize(est, 1.0)
    assert s.coverage == pytest.approx(0.998)
    assert s.coverage_se == pytest.approx(math.sqrt(0.998 * 0.002 / 1000))


def test_insufficient_data():
    with pytest.raises(InsufficientDataError):
        summarize([], 1.0)
    with pytest.raises(InsufficientDataError):
        summary_stats([1.0], [0.0], [2.0], 1.0)


vals = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=60)


@given(vals)
@settings(max_examples=50)
def test_mse_dominates_squared_bias(x):
    s = summary_stats(x, np.array(x) - 1, np.array(x) + 1, 0.5)
    assert s["mse"] >= s["bias"] ** 2 - 1e-9
    assert 0.0 <= s["coverage"] <= 1.0


@given(vals, st.randoms())
@settings(max_examples=50)
def test_permutation_invariance(x, rnd):
    y = list(x)
    rnd.shuffle(y)
    a = summary_stats(x, np.array(x) - 1, np.array(x) + 1, 0.0)
    b = summary_stats(y, np.array(y) - 1, np.array(y) + 1, 0.0)
    for k in a:
        assert a[k] == pytest.approx(b[k], rel=1e-12, abs=1e-12, nan_ok=True)


def _records(n, scenario="c", model="local_iv", seed=0, start=0):
    rng = np.random.default_rng(seed)
    out = []
    for r in range(start, start + n):
        e = rng.normal()
        out.append({"scenario": scenario, "model": model, "error_model": "iid", "param": "delta1",
                    "replicate": r, "estimate": 1 + e, "ci_low": e, "ci_high": 2 + e, "truth": 1.0,
                    "cor_z_resid": rng.normal(), "failed": False})
    return out


def test_half_runs_concatenate_to_full():
    full = _records(40)
    halves = full[20:] + full[:20]
    a, b = summarize_records(full)[0], summarize_records(halves)[0]
    for f in COLUMNS[4:]:
        assert getattr(a, f) == pytest.approx(getattr(b, f), abs=1e-12)


def test_failed_fits_excluded_and_counted():
    recs = _records(10)
    recs[3] = {**recs[3], "failed": True, "estimate": math.nan}
    s = summarize_records(recs)[0]
    assert s.n_reps == 9 and s.n_failed == 1
    assert math.isfinite(s.bias)


def test_sweep_grid_metrics():
    base = ReplicateSummary("c", "no_iv", "iid", "delta1", 0.5, 0, 0, 0, 0.5, 0, math.nan, math.nan, 10, 0)
    same = ReplicateSummary("c", "local_iv", "iid", "delta1", -0.5, 0, 0, 0, 0.571, 0, 0, 0, 10, 0)
    cov95 = ReplicateSummary("c", "spatial_iv", "iid", "delta1", 0.1, 0, 0, 0, 0.95, 0, 0, 0, 10, 0)
    rows = {(r["model"], r["metric"]): r["value"] for r in sweep_grid([base, same, cov95], {"c": {"cor_za": 0.3}})}
    assert rows[("local_iv", "log_rel_bias")] == 0.0
    assert rows[("local_iv", "coverage_deficit")] == pytest.approx(37.9)
    assert rows[("spatial_iv", "coverage_deficit")] == pytest.approx(0.0, abs=1e-12)
    assert rows[("no_iv", "log_abs_bias")] == pytest.approx(math.log(0.5))


def test_sweep_grid_missing_baseline():
    s = ReplicateSummary("c", "local_iv", "iid", "delta1", 0.1, 0, 0, 0, 0.9, 0, 0, 0, 10, 0)
    with pytest.raises(IncompleteGridError):
        sweep_grid([s])


def test_csv_round_trip(tmp_path):
    rows = summarize_records(_records(15) + _records(15, model="no_iv", seed=1))
    p = tmp_path / "m.csv"
    write_summaries(p, rows)
    assert p.read_text().splitlines()[0] == ",".join(COLUMNS)
    back = read_summaries(p)
    assert back == rows
