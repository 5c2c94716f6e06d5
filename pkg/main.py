from __future__ import annotations
from dataclasses import replace
from pathlib import Path
import json
import logging

import click
import numpy as np
import pandas as pd

from ddcsim import apply_censoring, population_moments, ReservationTable, simulate_panel, simulation_study
from effects import bootstrap_se, compute_weights, decompose, ModelBlocks, substrata_effects, substrata_table
from errors import ConfigError, DecompError
from nonparam import gcomp_decomposition, kaplan_meier, RiskSetBlocks, treatment_curve
from parameters import DdcConfig, PiecewiseSpec, RunConfig
from phmodel import fit, FitResult, merge_empty_tail
from report import ReportBuilder, write_curves
from spells import build_risk_sets, discretize, load_spells, overlap_report, sample_sizes, SpellData, write_spells

logger = logging.getLogger(__name__)


class DecompGroup(click.Group):
    """Maps library errors onto exit codes: config 2, input 3, identification 4, numerical 5."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except DecompError as exc:
            click.echo(f"error: {exc}", err=True)
            raise click.exceptions.Exit(exc.exit_code) from exc


def _run_config(subcommand: str, config_path: str | None, **overrides) -> RunConfig:
    return RunConfig.new(subcommand, config_path, **overrides)


def _load(run: RunConfig) -> SpellData:
    data, report = load_spells(run.input_path, run.schema)
    if report.n_rejected:
        click.echo(f"{report.n_rejected} of {report.n_rows} rows rejected", err=True)
        for row, record_id, reason in report.rejects[:10]:
            click.echo(f"  row {row} ({record_id}): {reason}", err=True)
    return discretize(data, run.grid)


def _sample_block(data: SpellData) -> dict[str, int]:
    return {f"z={z},treated={int(tr)}": count for (z, tr), count in sample_sizes(data).items()}


def _emit(text: str, output: Path | None) -> None:
    if output is None:
        click.echo(text, nl=False)
    else:
        output.write_text(text, encoding="utf-8")
        click.echo(f"wrote {output}")


def _render(builder: ReportBuilder, run: RunConfig) -> None:
    if run.output_path is not None:
        builder.write(run.output_path, run.output_format)
        click.echo(f"wrote {run.output_path}")
    elif run.output_format == "json":
        click.echo(builder.to_json())
    else:
        click.echo(builder.table(), nl=False)


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON run configuration")
output_option = click.option("--output", "-o", "output_path", type=click.Path(dir_okay=False), default=None, help="Output file (stdout if omitted)")
format_option = click.option("--format", "output_format", type=click.Choice(["table", "json"]), default=None, help="Output format (default: table)")


def estimation_options(fn):
    for option in reversed(
        [
            click.option("--s-bar", "est_s_bar", type=int, default=None, help="Last treatment period of the aggregate (default: 30)"),
            click.option("--tau", "est_tau", type=int, default=None, help="Evaluation period (default: 60)"),
            click.option("--weight-regime", "est_weight_regime", type=click.Choice(["0", "1"]), default=None, help="Regime whose treatment distribution weights s (default: 1)"),
            click.option("--alpha-contrast", "est_alpha_contrast", type=click.Choice(["z0_minus_z1", "z1_minus_z0"]), default=None),
            click.option("--empty-cell", "est_empty_cell", type=click.Choice(["error", "carry_forward"]), default=None, help="Empty risk-set policy (default: error)"),
            click.option("--cs-floor", "est_cs_floor", type=float, default=None, help="Pr(cs) below which complier effects are flagged (default: 1e-3)"),
            click.option("--unit", "grid_unit", type=float, default=None, help="Time units per period (default: 1)"),
            click.option("--horizon", "grid_horizon", type=int, default=None, help="Last analysis period (default: 60)"),
        ]
    ):
        fn = option(fn)
    return fn


def model_options(fn):
    fn = click.option("--segment-length", type=float, default=None, help="Baseline segment length (default: 10)")(fn)
    fn = click.option("--n-segments", type=int, default=None, help="Number of baseline segments (default: 6)")(fn)
    fn = click.option("--merge-empty-tail", "merge_tail", is_flag=True, help="Merge trailing baseline segments that hold no events")(fn)
    return fn


def _overrides(kwargs: dict) -> dict:
    out = dict(kwargs)
    if out.get("est_weight_regime") is not None:
        out["est_weight_regime"] = int(out["est_weight_regime"])
    return out


@click.group(cls=DecompGroup)
@click.option("--verbose", "-v", count=True, help="Increase log verbosity (-v info, -vv debug)")
def cli(verbose: int) -> None:
    """Causal decomposition of duration outcomes under dynamic treatment regimes."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON simulation configuration")
@click.option("--output", "-o", "output_path", type=click.Path(dir_okay=False), required=True, help="Spell file to write")
@click.option("--diagnostics", type=click.Path(dir_okay=False), default=None, help="Reservation table JSON (default: <output>.reservations.json)")
@click.option("--n-agents", type=int, default=None, help="Population size (default: 5000)")
@click.option("--seed", type=int, default=None, help="Master seed")
@click.option("--expectation", type=click.Choice(["analytic", "monte_carlo"]), default=None)
@click.option("--moments", "verbose_moments", is_flag=True, help="Print simulated population moments against reference values")
def simulate(config_path: str | None, output_path: str, diagnostics: str | None, n_agents: int | None, seed: int | None, expectation: str | None, verbose_moments: bool) -> None:
    """Simulate the waiting model and write a censored spell file."""
    config = DdcConfig.from_json(config_path) if config_path else DdcConfig()
    changes = {k: v for k, v in {"n_agents": n_agents, "seed": seed, "expectation": expectation}.items() if v is not None}
    if changes:
        config = config.replace(**changes)

    table = ReservationTable.new(config)
    panel = apply_censoring(simulate_panel(config, table), config)
    write_spells(panel.to_spells(config.a_range), output_path)

    diagnostics_path = Path(diagnostics) if diagnostics else Path(f"{output_path}.reservations.json")
    table.write_json(diagnostics_path)

    summary = panel.summary()
    click.echo(f"wrote {output_path} ({summary['n']} spells) and {diagnostics_path}")
    click.echo(f"administrative censoring: {summary['admin_censored_share']:.1%}")
    click.echo(f"random censoring of remaining: {summary['random_censored_share_of_remaining']:.1%}")
    for z in (0, 1):
        click.echo(f"treated share Z={z}: {summary[f'treated_share_z{z}']:.1%}")
    if verbose_moments:
        click.echo(population_moments(panel, config).to_string(index=False, float_format=lambda v: f"{v:.4f}"))


@cli.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@config_option
@click.option("--output-dir", type=click.Path(file_okay=False), default=".", help="Directory for curve files")
@click.option("--censor-at-treatment", is_flag=True, help="Treatment censors the exit process (pre-treatment survival)")
@click.option("--curve", type=click.Choice(["survival", "treatment"]), default="survival")
@click.option("--unit", "grid_unit", type=float, default=None)
@click.option("--horizon", "grid_horizon", type=int, default=None)
def km(input_path: str, config_path: str | None, output_dir: str, censor_at_treatment: bool, curve: str, grid_unit: float | None, grid_horizon: int | None) -> None:
    """Product-limit curves by regime, written as (period, value) files."""
    run = _run_config("km", config_path, input_path=input_path, grid_unit=grid_unit, grid_horizon=grid_horizon)
    data = _load(run)
    if curve == "survival":
        curves = [kaplan_meier(data, run.grid, stratum={"z": z}, censor_at_treatment=censor_at_treatment) for z in (0, 1) if np.any(data.z == z)]
        prefix = "pretreatment" if censor_at_treatment else "survival"
    else:
        curves = [treatment_curve(data, run.grid, z) for z in (0, 1) if np.any(data.z == z)]
        prefix = "treatment"
    for path, c in zip(write_curves(curves, output_dir, prefix), curves):
        click.echo(f"{c.label}: S({run.grid.horizon})={c.values[-1]:.4f} -> {path}")


@cli.command()
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@config_option
@output_option
@format_option
@estimation_options
@click.option("--bootstrap", "replicates", type=int, default=0, help="Bootstrap replicates for standard errors (default: none)")
@click.option("--seed", type=int, default=None)
def gcomp(input_path: str, config_path: str | None, output_path: str | None, output_format: str | None, replicates: int, seed: int | None, **kwargs) -> None:
    """Nonparametric g-computation decomposition."""
    run = _run_config("gcomp", config_path, input_path=input_path, output_path=output_path, output_format=output_format, seed=seed, **_overrides(kwargs))
    data = _load(run)
    table = build_risk_sets(data, run.grid)
    overlap = overlap_report(table, run.estimation.s_bar)
    for cell in overlap[overlap["flag"] != ""].itertuples():
        logger.warning("overlap: %s treatment hazard at t=%d, z=%d (%d at risk)", cell.flag, cell.t, cell.z, cell.at_risk)
    estimates = gcomp_decomposition(table, run.estimation)
    std_errors = None
    if replicates:

        def statistic(sample: SpellData) -> np.ndarray:
            return np.array(list(gcomp_decomposition(build_risk_sets(sample, run.grid), run.estimation).effects().values()))

        se = bootstrap_se(data, statistic, replicates=replicates, seed=run.seed)
        std_errors = dict(zip(estimates.effects(), se.tolist()))
    _render(ReportBuilder.from_gcomp(estimates, _sample_block(data), std_errors), run)


@cli.command("fit")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@config_option
@click.option("--output", "-o", "output_path", type=click.Path(dir_okay=False), required=True, help="FitResult JSON")
@model_options
@click.option("--no-covariates", is_flag=True, help="Ignore covariate columns")
def fit_cmd(
    input_path: str, config_path: str | None, output_path: str, segment_length: float | None, n_segments: int | None, merge_tail: bool, no_covariates: bool
) -> None:
    """Fit the piecewise-exponential hazard model."""
    run = _run_config("fit", config_path, input_path=input_path, output_path=output_path, segment_length=segment_length, n_segments=n_segments)
    data = _load(run)
    if no_covariates:
        data = data.without_covariates()
    result = fit(data, _model_spec(run, data, merge_tail), run.fit)
    Path(output_path).write_text(json.dumps(result.to_dict(), indent=2), encoding="utf-8")
    click.echo(f"log-likelihood {result.log_likelihood:.4f} after {result.n_iter} iterations; wrote {output_path}")
    for name, value, se in result.summary():
        click.echo(f"  {name:<28}{value:>12.4f}{se:>12.4f}")


def _model_spec(run: RunConfig, data: SpellData, merge_tail: bool) -> PiecewiseSpec:
    return merge_empty_tail(data, run.spec) if merge_tail else run.spec


def _fitted(run: RunConfig, data: SpellData, fit_path: str | None, merge_tail: bool = False) -> FitResult:
    if fit_path is None:
        return fit(data, _model_spec(run, data, merge_tail), run.fit)
    with open(fit_path, encoding="utf-8") as fh:
        result = FitResult.from_dict(json.load(fh))
    if result.params.covariate_names != data.covariate_names:
        raise ConfigError(f"fit covariates {result.params.covariate_names} do not match the data {data.covariate_names}")
    return result


@cli.command("decompose")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@config_option
@output_option
@format_option
@estimation_options
@model_options
@click.option("--fit", "fit_path", type=click.Path(exists=True, dir_okay=False), default=None, help="Reuse a FitResult JSON instead of fitting")
@click.option("--no-covariates", is_flag=True, help="Ignore covariate columns")
@click.option("--substrata", is_flag=True, help="Add always-/complier-survivor rows")
def decompose_cmd(
    input_path: str,
    config_path: str | None,
    output_path: str | None,
    output_format: str | None,
    segment_length: float | None,
    n_segments: int | None,
    merge_tail: bool,
    fit_path: str | None,
    no_covariates: bool,
    substrata: bool,
    **kwargs,
) -> None:
    """Model-based decomposition report with delta-method inference."""
    run = _run_config(
        "decompose",
        config_path,
        input_path=input_path,
        output_path=output_path,
        output_format=output_format,
        segment_length=segment_length,
        n_segments=n_segments,
        **_overrides(kwargs),
    )
    data = _load(run)
    if no_covariates:
        data = data.without_covariates()
    fitted = _fitted(run, data, fit_path, merge_tail)
    result = decompose(fitted, data, run.estimation)
    notes: tuple[str, ...] = ()
    if substrata:
        blocks = ModelBlocks.new(fitted, data, run.estimation)
        weights = compute_weights(fitted, data, s_bar=run.estimation.s_bar, regime=run.estimation.weight_regime).period_weights
        frame = substrata_table(blocks, run.estimation.s_bar, run.estimation.tau, run.estimation.cs_floor, weights=weights)
        result = replace(result, substrata=frame)
        if frame["unstable"].any():
            notes = (f"complier-survivor effects flagged unstable where Pr(cs) < {run.estimation.cs_floor:g}",)
    _render(ReportBuilder.from_decomposition(result, notes=notes), run)


@cli.command("substrata")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@config_option
@output_option
@estimation_options
@click.option("--s", "single_s", type=int, default=None, help="Single treatment period (default: every s up to s-bar)")
def substrata_cmd(input_path: str, config_path: str | None, output_path: str | None, single_s: int | None, **kwargs) -> None:
    """Nonparametric substrata probabilities and conditional effects."""
    run = _run_config("substrata", config_path, input_path=input_path, output_path=output_path, **_overrides(kwargs))
    data = _load(run)
    table = build_risk_sets(data, run.grid)
    blocks = RiskSetBlocks(table, empty_cell=run.estimation.empty_cell)
    est = run.estimation
    if single_s is not None:
        frame = pd.DataFrame([substrata_effects(blocks, single_s, est.tau, est.cs_floor).to_dict()])
    else:
        weights = gcomp_decomposition(table, est).weights
        frame = substrata_table(blocks, est.s_bar, est.tau, est.cs_floor, weights=None if np.isnan(weights).any() else weights)
    text = frame.to_csv(index=False, lineterminator="\n", na_rep="") if output_path else frame.to_string(index=False) + "\n"
    _emit(text, run.output_path)


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON simulation configuration")
@click.option("--run-config", "run_config_path", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON run configuration (spec, estimation)")
@click.option("--sizes", default="1000,5000", help="Comma-separated sample sizes")
@click.option("--replications", type=int, default=20)
@output_option
def study(config_path: str | None, run_config_path: str | None, sizes: str, replications: int, output_path: str | None) -> None:
    """Monte-Carlo study: bias, variance and MSE of the model-based effects."""
    config = DdcConfig.from_json(config_path) if config_path else DdcConfig()
    run = _run_config("study", run_config_path, output_path=output_path)
    try:
        size_list = [int(s) for s in sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"sizes must be integers: {sizes}") from exc
    frame = simulation_study(config, size_list, replications, run.spec, run.estimation, run.fit)
    text = frame.to_csv(index=False, lineterminator="\n") if output_path else frame.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n"
    _emit(text, run.output_path)


if __name__ == "__main__":
    cli()
