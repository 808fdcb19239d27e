import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatial_iv.errors import PanelError
from spatial_iv.geo import CovarianceSpec, SiteSet
from spatial_iv.gp import sample_gp
from spatial_iv.panel import (
    PanelRecord,
    SlopeDataset,
    TransformError,
    decadal_slopes,
    read_panel,
    spatial_diagnostics,
    synthetic_panel,
)

ROLES = {"Z": "z", "A": "a", "Y": "y"}


def _write(path, text):
    path.write_text(text)
    return path


def _toy(tmp_path):
    return _write(tmp_path / "p.csv", (
        "location_id,lon,lat,year,z,a,y\n"
        "A,0,0,1990,10,1,5\n"
        "A,0,0,2000,20,1,6\n"
        "A,0,0,2010,30,1,7\n"
        "B,1,0,1990,1,2,3\n"
        "B,1,0,2010,5,4,3\n"
        "C,0,1,1990,2,,1\n"
        "C,0,1,2000,3,,2\n"
        "D,1,1,2000,1,1,1\n"
        "E,2,2,1990,0,0,0\n"
        "E,2,2,2000,1,1,1\n"
    ))


def test_toy_panel_slopes(tmp_path):
    records, variables = read_panel(_toy(tmp_path))
    assert variables == ["z", "a", "y"]
    ds = decadal_slopes(records, 1990, ROLES)
    assert ds.location_id == ["A", "B", "E"]
    assert ds.columns["Z"][0] == pytest.approx(10.0)
    assert ds.columns["A"][0] == pytest.approx(0.0, abs=1e-12)
    assert ds.columns["Y"][0] == pytest.approx(1.0)
    assert ds.columns["Y_intercept"][0] == pytest.approx(5.0)
    assert ds.columns["Z"][1] == pytest.approx(2.0)
    assert dict(ds.dropped).keys() == {"C", "D"}


@pytest.mark.parametrize("body, needle", [
    ("A,0,0,1990,1,2\n", "line 2"),
    ("A,0,0,1990,1,x,3\n", "line 2: column 'a'"),
    ("A,0,0,1990.5,1,2,3\n", "line 2: column 'year'"),
    ("A,0,0,1990,1,2,3\nA,0,0,1990,1,2,3\n", "line 3: duplicate"),
])
def test_malformed_rows_name_line(tmp_path, body, needle):
    p = _write(tmp_path / "bad.csv", "location_id,lon,lat,year,z,a,y\n" + body)
    with pytest.raises(PanelError, match=needle):
        read_panel(p)


def test_bad_header(tmp_path):
    with pytest.raises(PanelError, match="line 1"):
        read_panel(_write(tmp_path / "h.csv", "id,lon,lat,year,z\n"))


def test_log_transform_of_nonpositive(tmp_path):
    records, _ = read_panel(_toy(tmp_path))
    with pytest.raises(TransformError, match="location 'E' year 1990"):
        decadal_slopes(records, 1990, ROLES, {"z": "log"})


def _recs(rng, n_loc=6, years=(1990, 2000, 2010)):
    out = []
    for i in range(n_loc):
        for yr in years:
            out.append(PanelRecord(f"L{i}", float(i), 0.0, yr,
                                   {k: float(rng.normal()) for k in ("z", "a", "y")}))
    return out


@given(st.integers(0, 1000), st.randoms())
@settings(max_examples=30, deadline=None)
def test_record_order_invariance(seed, rnd):
    recs = _recs(np.random.default_rng(seed))
    a = decadal_slopes(recs, 1990, ROLES)
    rnd.shuffle(recs)
    b = decadal_slopes(recs, 1990, ROLES)
    for k in a.columns:
        assert np.allclose(a.columns[k], b.columns[k], atol=1e-12)


def test_anchor_changes_only_intercepts(rng):
    recs = _recs(rng)
    a, b = decadal_slopes(recs, 1990, ROLES), decadal_slopes(recs, 2000, ROLES)
    assert np.allclose(a.columns["A"], b.columns["A"])
    assert not np.allclose(a.columns["A_intercept"], b.columns["A_intercept"])


def test_dropping_a_location_leaves_others(rng):
    recs = _recs(rng)
    full = decadal_slopes(recs, 1990, ROLES)
    sub = decadal_slopes([r for r in recs if r.location_id != "L2"], 1990, ROLES)
    keep = [i for i, loc in enumerate(full.location_id) if loc != "L2"]
    assert np.array_equal(full.columns["Y"][keep], sub.columns["Y"])


def test_slope_csv_round_trip(tmp_path, rng):
    ds = decadal_slopes(_recs(rng), 1990, ROLES)
    p = tmp_path / "s.csv"
    ds.write_csv(p)
    back = SlopeDataset.read_csv(p)
    assert back.location_id == ds.location_id
    for k in ds.columns:
        assert np.array_equal(back.columns[k], ds.columns[k])


def test_recovered_slopes_within_noise(tmp_path, rng):
    n = 300
    slopes = {k: rng.normal(size=n) for k in ("z", "a", "y")}
    synthetic_panel(tmp_path / "p.csv", slopes, rng.uniform(size=(n, 2)), noise_sd=0.1, seed=1)
    ds = decadal_slopes(read_panel(tmp_path / "p.csv")[0], 1990, ROLES)
    # slope SE for years at t = 0, 1, 2 with noise sd 0.1 is 0.1 / sqrt(2)
    err = ds.columns["A"] - slopes["a"]
    assert np.mean(np.abs(err) <= 3 * 0.1 / np.sqrt(2)) > 0.98


def test_to_causal_stage_assignment(rng):
    recs = _recs(rng)
    ds = decadal_slopes(recs, 1990, ROLES)
    cd = ds.to_causal()
    assert set(cd.stage_covariates("stage1")) == {"A_intercept"}
    assert set(cd.stage_covariates("stage2")) == {"Y_intercept"}


def test_spatial_diagnostics_recovers_field():
    rng = np.random.default_rng(8)
    sites = SiteSet(rng.uniform(0, 30, size=(200, 2)))
    v = sample_gp(sites, CovarianceSpec(1.0, 2.0, 0.0), 4)
    spec, pr, frac = spatial_diagnostics((v, sites), "Z")
    assert 2.5 < pr < 15
    assert frac > 0.9


def test_spatial_diagnostics_noise_and_size():
    rng = np.random.default_rng(9)
    sites = SiteSet(rng.uniform(0, 30, size=(150, 2)))
    _, _, frac = spatial_diagnostics((rng.standard_normal(150), sites), "Z")
    assert frac < 0.3
    with pytest.raises(PanelError):
        spatial_diagnostics((rng.standard_normal(10), SiteSet(rng.uniform(size=(10, 2)))), "Z")
