"""Command-line interface.

Exit codes: 0 on success, 2 for usage and input errors, 1 for anything
unexpected.
"""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import io as sio
from .combat import combat_adjust
from .concordance import harrell_c, stratified_c
from .core import FittedModel, SparseCoefficients, risk_score
from .cox import build_stratum_index, fit_newton
from .errors import OracleUndefined, StratCoxError
from .normalize import frozen_apply, median_normalize, quantile_normalize
from .penalized import fit_penalized, method_name
from .simulation import (
    DEFAULT_ARMS,
    FAILURE_COLUMNS,
    RESULT_COLUMNS,
    SCENARIOS,
    SIGNALS,
    SUMMARY_COLUMNS,
    SimulationConfig,
    run_scenario,
)
from .univariate import prefilter, select_by_pvalue_grid

logger = logging.getLogger("stratcox")

EXIT_INTERNAL = 1
EXIT_INPUT = 2


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.exceptions.ClickException:
            raise
        except StratCoxError as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_INPUT)
        except (click.exceptions.Exit, click.exceptions.Abort, SystemExit):
            raise
        except Exception as exc:  # pragma: no cover - defensive
            click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_INTERNAL)
    return wrapper


@click.group()
@click.option("-q", "--quiet", is_flag=True, help="Suppress warnings.")
def main(quiet):
    """Stratified Cox prediction models with batch-effect adjustment."""
    logging.basicConfig(
        level=logging.ERROR if quiet else logging.WARNING,
        format="warning: %(message)s",
        stream=sys.stderr,
    )


# --------------------------------------------------------------------------
# adjust


@main.command()
@click.option("--expression", "expression_path", required=True, type=click.Path(dir_okay=False))
@click.option("--clinical", "clinical_path", type=click.Path(dir_okay=False),
              help="Clinical CSV with batch (and slide) labels; needed for combat.")
@click.option("--method", required=True, type=click.Choice(["combat", "median", "quantile"]))
@click.option("--level", type=click.Choice(["slide", "batch"]), default="batch", show_default=True,
              help="ComBat batch definition.")
@click.option("--freeze-from", "freeze_from", type=click.Path(dir_okay=False),
              help="Apply a stored normalization reference instead of estimating one.")
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@click.option("--reference-out", type=click.Path(dir_okay=False),
              help="Where to write the normalization reference (default: OUTPUT.ref).")
@_handled
def adjust(expression_path, clinical_path, method, level, freeze_from, output, reference_out):
    """Batch-adjust or normalize an expression matrix."""
    if method == "combat":
        if freeze_from:
            raise click.UsageError("--freeze-from applies to median and quantile normalization only")
        if not clinical_path:
            raise click.UsageError("--method combat needs --clinical for batch labels")
        ds = sio.load_dataset(expression_path, clinical_path)
        sio.write_expression(output, combat_adjust(ds.expr, ds, level))
        return
    expr = sio.read_expression(expression_path)
    if freeze_from:
        ref = sio.read_reference(freeze_from)
        sio.write_expression(output, frozen_apply(expr, ref, method))
        return
    adjusted, ref = (median_normalize if method == "median" else quantile_normalize)(expr)
    sio.write_expression(output, adjusted)
    sio.write_reference(reference_out or f"{output}.ref", ref)


# --------------------------------------------------------------------------
# fit


def _fit_model(ds, method, level, seed, folds, true_signal, min_mean, max_corr) -> FittedModel:
    rng = np.random.default_rng(seed)
    if method == "oracle":
        features = true_signal.features
        if not features:
            raise OracleUndefined("the true-signal file lists no nonzero coefficient")
        fit = fit_newton(build_stratum_index(ds, level), ds.expr.columns(features), features)
        return FittedModel(
            SparseCoefficients.from_dense(features, fit.coefficients),
            method_name(level, "oracle"), level,
            training_summary={"loglik": fit.loglik, "aic": fit.aic,
                              "n_events": float(ds.n_events), "n_selected": float(len(features))},
            seed=seed,
        )
    strata = None if level == "none" else ds.strata(level)
    features = prefilter(ds.expr, min_mean, max_corr, strata=strata)
    if not features:
        raise StratCoxError("the prefilter removed every feature; nothing to fit")
    if method == "univ":
        return select_by_pvalue_grid(ds, level, features, seed=seed)
    kind = "adaptive_lasso" if method == "alasso" else "lasso"
    return fit_penalized(ds, level, kind, rng, features=features, folds=folds, seed=seed)


@main.command()
@click.option("--expression", "expression_path", required=True, type=click.Path(dir_okay=False))
@click.option("--clinical", "clinical_path", required=True, type=click.Path(dir_okay=False))
@click.option("--method", required=True, type=click.Choice(["lasso", "alasso", "univ", "oracle"]))
@click.option("--stratify", type=click.Choice(["none", "slide", "batch"]), default="batch", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--folds", type=click.IntRange(2), default=5, show_default=True)
@click.option("--true-signal", type=click.Path(dir_okay=False),
              help="CSV feature,coefficient of the true signal (oracle method).")
@click.option("--normalization", "reference_path", type=click.Path(dir_okay=False),
              help="Normalization reference used on the training data; stored in the model "
                   "so evaluate can apply it to test data.")
@click.option("--min-mean", type=float, default=8.0, show_default=True)
@click.option("--max-corr", type=float, default=0.9, show_default=True)
@click.option("--output", required=True, type=click.Path(dir_okay=False))
@_handled
def fit(expression_path, clinical_path, method, stratify, seed, folds, true_signal,
        reference_path, min_mean, max_corr, output):
    """Fit a (stratified) Cox prediction model and write the model file."""
    if method == "oracle" and not true_signal:
        raise click.UsageError("--method oracle requires --true-signal")
    ds = sio.load_dataset(expression_path, clinical_path)
    signal = sio.read_signal(true_signal) if true_signal else None
    model = _fit_model(ds, method, stratify, seed, folds, signal, min_mean, max_corr)
    if reference_path:
        model.preprocessing["normalization"] = sio.read_reference(reference_path)
    sio.write_model(output, model)
    click.echo(f"{model.method}: {len(model.coefficients)} feature(s) selected -> {output}")


# --------------------------------------------------------------------------
# evaluate


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--expression", "expression_path", required=True, type=click.Path(dir_okay=False))
@click.option("--clinical", "clinical_path", required=True, type=click.Path(dir_okay=False))
@click.option("--output", type=click.Path(dir_okay=False), help="Optional CSV with the per-stratum breakdown.")
@_handled
def evaluate(model_path, expression_path, clinical_path, output):
    """C-index of a model on test data (stratified by the model's level)."""
    model = sio.read_model(model_path)
    ds = sio.load_dataset(expression_path, clinical_path)
    expr = ds.expr
    ref = model.preprocessing.get("normalization")
    if ref is not None:
        expr = frozen_apply(expr, ref)
    score = risk_score(model, expr)
    if model.stratum_level == "none":
        res = harrell_c(score, ds.time, ds.event)
    else:
        res = stratified_c(score, ds.time, ds.strata(model.stratum_level), ds.event)
    all_ties = res.tied == res.comparable
    lines = [
        f"c_index = {sio.fmt(res.c)}",
        f"comparable = {res.comparable}",
        f"concordant = {res.concordant}",
        f"tied = {res.tied}",
        f"all_ties = {int(all_ties)}",
        f"strata = {model.stratum_level}",
    ]
    for lab, part in res.by_stratum.items():
        c = sio.fmt(part.c) if part.comparable else "nan"
        lines.append(f"stratum.{lab} = c {c} comparable {part.comparable}")
    click.echo("\n".join(lines))
    if output:
        rows = [(lab, p.comparable, p.concordant, p.tied, p.c if p.comparable else float("nan"))
                for lab, p in res.by_stratum.items()]
        rows.append(("all", res.comparable, res.concordant, res.tied, res.c))
        sio.write_table(output, ("stratum", "comparable", "concordant", "tied", "c_index"), rows)


# --------------------------------------------------------------------------
# simulate and report


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


@main.command()
@click.option("--scenario", "scenarios", multiple=True, required=True,
              help="Scenario name (repeatable), or 'all'.")
@click.option("--signal", type=click.Choice(SIGNALS), default="moderate", show_default=True)
@click.option("--runs", type=click.IntRange(1), default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--adjustments", default=",".join(DEFAULT_ARMS), show_default=True,
              help="Comma-separated arms, e.g. batman_slide,combat_batch,median+batman_slide.")
@click.option("--methods", default=None,
              help="Comma-separated model methods (default: oracle,lasso; lasso for null signal).")
@click.option("--jobs", type=click.IntRange(1), default=1, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
@click.option("--plot", is_flag=True, help="Also render figures next to the CSVs.")
@_handled
def simulate(scenarios, signal, runs, seed, adjustments, methods, jobs, out_dir, plot):
    """Run the scenario benchmark and write results, summary and failures CSVs."""
    names = list(SCENARIOS) if "all" in scenarios else list(scenarios)
    unknown = [s for s in names if s not in SCENARIOS]
    if unknown:
        raise click.UsageError(f"unknown scenario {unknown[0]!r}; valid names: {', '.join(SCENARIOS)}")
    method_list = _split(methods) if methods else (["lasso"] if signal == "null" else ["oracle", "lasso"])
    arms = _split(adjustments)
    config = SimulationConfig()
    results, summary, failures = [], [], []
    for name in names:
        res = run_scenario(name, signal, arms, method_list, runs, seed, config, jobs)
        results += res.rows()
        summary += res.summary()
        failures += res.failures()
    out = Path(out_dir)
    sio.write_table(out / "results.csv", RESULT_COLUMNS, results)
    sio.write_table(out / "summary.csv", SUMMARY_COLUMNS, [[r[c] for c in SUMMARY_COLUMNS] for r in summary])
    sio.write_table(out / "failures.csv", FAILURE_COLUMNS, failures)
    flagged = [r for r in summary if r["flagged"]]
    for r in flagged:
        click.echo(f"flagged: {r['scenario']} {r['adjustment']} {r['model_method']} "
                   f"({r['n_failed']}/{r['n_runs']} runs failed)", err=True)
    if plot:
        from .plotting import plot_summary

        plot_summary(summary, out)
    click.echo(f"{len(results)} result rows, {len(failures)} failures -> {out}")


@main.command()
@click.option("--summary", "summary_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out-dir", type=click.Path(file_okay=False), default=None,
              help="Directory for the figures (default: next to the summary).")
@_handled
def report(summary_path, out_dir):
    """Render figures from a summary CSV written by simulate."""
    from .plotting import plot_summary

    rows = sio.read_table(summary_path)
    missing = [c for c in ("scenario", "signal", "adjustment", "model_method", "mean", "p2.5", "p97.5")
               if rows and c not in rows[0]]
    if not rows or missing:
        raise sio.CSVFormatError(f"{summary_path}: not a summary table (missing {missing or 'rows'})")
    paths = plot_summary(rows, out_dir or Path(summary_path).parent)
    for p in paths:
        click.echo(str(p))


if __name__ == "__main__":  # pragma: no cover
    main()
