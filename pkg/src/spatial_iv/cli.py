"""Command-line entry point: simulate, sweep, fit, ingest."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from spatial_iv.errors import SpatialIVError
from spatial_iv.geo import KernelSpec
from spatial_iv.harness import execute, load_config, write_outputs
from spatial_iv.iv import no_iv, spillover_estimates, two_stage_iv
from spatial_iv.metrics import fmt_num, write_csv, write_json
from spatial_iv.panel import SlopeDataset, decadal_slopes, read_panel

FIT_COLUMNS = ("model", "delta1", "delta1_ci", "cor_z_resid_s2", "aic_s1", "aic_s2")
SPILL_COLUMNS = ("delta2", "delta2_ci")


def _fail(msg, code=2):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _run(config, seed, workers, out, fmt, replicates, expect_sweep, cells=()):
    try:
        run = load_config(config, seed=seed, replicates=replicates, only_cells=list(cells) or None)
    except SpatialIVError as exc:
        _fail(str(exc))
    if expect_sweep and run.kind != "sweep":
        _fail(f"{config}: sweep needs a [sweep] table with cor_za and cor_zu lists")
    if not expect_sweep and run.kind == "sweep":
        _fail(f"{config}: this config defines a sweep; use the sweep subcommand")

    def progress(done, total):
        if done == total or done % max(1, total // 20) == 0:
            click.echo(f"  {done}/{total} replicates", err=True)

    records, cells, timing = execute(run, workers=workers, progress=progress)
    manifest = write_outputs(run, records, cells, timing, out, fmt)
    failed = [c["name"] for c in manifest["cells"] if c["status"] != "ok"]
    for c in manifest["cells"]:
        click.echo(f"{c['name']}: {c['status']} ({c['completed']}/{c['replicates']} replicates)")
    click.echo(f"wrote {out}")
    if failed:
        click.echo(f"failed cells: {', '.join(failed)}", err=True)
        sys.exit(1)


def _common(f):
    f = click.option("--config", required=True, type=click.Path(dir_okay=False), help="TOML run config.")(f)
    f = click.option("--seed", type=int, default=None, help="Override the config's base seed.")(f)
    f = click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)(f)
    f = click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")(f)
    f = click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)(f)
    f = click.option("--replicates", type=click.IntRange(min=1), default=None,
                     help="Override the replicate count of every cell.")(f)
    f = click.option("--cell", "cells", multiple=True,
                     help="Run only this cell (repeatable); seeds match the full run.")(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Spatial IV simulation and estimation tools."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command()
@_common
def simulate(config, seed, workers, out, fmt, replicates, cells):
    """Run every cell of a simulation config."""
    _run(config, seed, workers, out, fmt, replicates, expect_sweep=False, cells=cells)


@main.command()
@_common
def sweep(config, seed, workers, out, fmt, replicates, cells):
    """Run a target-correlation grid and emit sweep_grid outputs."""
    _run(config, seed, workers, out, fmt, replicates, expect_sweep=True, cells=cells)


def _parse_roles(text):
    roles = {}
    for part in text.split(","):
        key, _, var = part.partition("=")
        if not var:
            raise click.BadParameter(f"expected ROLE=variable, got {part!r}", param_hint="--roles")
        roles[key.strip()] = var.strip()
    return roles


def fit_report(data, model="iv", error_model="iid", spillover=None, truncation=None) -> dict:
    """Run one estimator on a CausalDataset and return the report row."""
    row = {"model": f"{model}-{error_model}" + (f"-{spillover}" if spillover else "")}
    if spillover:
        if model != "iv":
            raise click.BadParameter("spillover estimators need --model iv", param_hint="--spillover")
        if truncation is None:
            raise click.BadParameter("spillover estimators need --truncation", param_hint="--truncation")
        est = spillover_estimates(data, KernelSpec(truncation), error_model, error_model, (spillover,))[spillover]
    elif model == "iv":
        est = two_stage_iv(data, error_model, error_model)
    else:
        est = no_iv(data, error_model)
    row["delta1"] = est.delta1.estimate
    row["delta1_ci"] = list(est.delta1.ci)
    row["cor_z_resid_s2"] = est.iv_residual_cor
    row["aic_s1"] = est.stage1.aic if est.stage1 is not None else None
    row["aic_s2"] = est.stage2.aic
    if spillover:
        row["delta2"] = est.delta2.estimate
        row["delta2_ci"] = list(est.delta2.ci)
    return row


def _write_report(row, out, fmt):
    if fmt == "json":
        write_json(out, [row], sort_keys=False)
        return
    flat = {
        k: (f"({fmt_num(v[0])}, {fmt_num(v[1])})" if isinstance(v, list) else ("" if v is None else v))
        for k, v in row.items()
    }
    write_csv(out, [flat], list(row))


@main.command()
@click.option("--data", "data_path", type=click.Path(exists=True, dir_okay=False),
              help="Slope dataset CSV (as written by ingest).")
@click.option("--panel", "panel_path", type=click.Path(exists=True, dir_okay=False),
              help="Raw panel CSV; slopes are extracted first.")
@click.option("--anchor", type=int, default=None, help="Anchor year for --panel.")
@click.option("--roles", default=None, help="For --panel: Z=var,A=var,Y=var.")
@click.option("--log", "log_vars", multiple=True, help="For --panel: log-transform this variable.")
@click.option("--covariate", "covariates", multiple=True, help="For --panel: covariate entering both stages.")
@click.option("--model", type=click.Choice(["no_iv", "iv"]), default="iv", show_default=True)
@click.option("--error-model", type=click.Choice(["iid", "spatial"]), default="iid", show_default=True)
@click.option("--spillover", type=click.Choice(["type0", "type1", "type2"]), default=None)
@click.option("--truncation", type=float, default=None, help="Kernel truncation distance for spillover.")
@click.option("--seed", type=int, default=None, help="Unused; accepted for a uniform interface.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="json", show_default=True)
def fit(data_path, panel_path, anchor, roles, log_vars, covariates, model, error_model, spillover,
        truncation, seed, out, fmt):
    """Fit one estimator to a slope dataset and write its report."""
    if (data_path is None) == (panel_path is None):
        _fail("give exactly one of --data or --panel")
    try:
        if data_path:
            ds = SlopeDataset.read_csv(data_path)
        else:
            if anchor is None or roles is None:
                _fail("--panel needs --anchor and --roles")
            records, _ = read_panel(panel_path)
            ds = decadal_slopes(records, anchor, _parse_roles(roles),
                                {v: "log" for v in log_vars}, list(covariates))
        row = fit_report(ds.to_causal(), model, error_model, spillover, truncation)
    except SpatialIVError as exc:
        _fail(str(exc), 1)
    _write_report(row, out, fmt)
    click.echo(json.dumps({k: v for k, v in row.items()}, default=str))


@main.command()
@click.option("--panel", "panel_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--anchor", required=True, type=int)
@click.option("--roles", required=True, help="Z=var,A=var,Y=var")
@click.option("--log", "log_vars", multiple=True, help="Log-transform this variable before fitting.")
@click.option("--covariate", "covariates", multiple=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Slope dataset CSV.")
@click.option("--drop-log", type=click.Path(dir_okay=False), default=None,
              help="Drop-log CSV (default: <out stem>_drops.csv).")
def ingest(panel_path, anchor, roles, log_vars, covariates, out, drop_log):
    """Reduce a location-by-year panel to per-location decadal slopes."""
    try:
        records, _ = read_panel(panel_path)
        ds = decadal_slopes(records, anchor, _parse_roles(roles),
                            {v: "log" for v in log_vars}, list(covariates))
    except SpatialIVError as exc:
        _fail(str(exc), 1)
    out = Path(out)
    ds.write_csv(out)
    drops = Path(drop_log) if drop_log else out.with_name(out.stem + "_drops.csv")
    ds.write_drop_log(drops)
    click.echo(f"wrote {len(ds.location_id)} locations to {out}; {len(ds.dropped)} dropped ({drops})")


if __name__ == "__main__":  # pragma: no cover
    main()
