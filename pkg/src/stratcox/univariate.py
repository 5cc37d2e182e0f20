"""Feature prefiltering and univariate p-value selection tuned by AIC."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .core import Dataset, ExpressionMatrix, FittedModel, SparseCoefficients
from .cox import aic, build_stratum_index, fit_newton, fit_univariate, partial_loglik
from .errors import NonConvergence, SelectionFailed, Separation
from .penalized import method_name

logger = logging.getLogger(__name__)

PVALUE_GRID = np.round(np.arange(21) * 0.0005, 4)


def _center_within(values: np.ndarray, strata) -> np.ndarray:
    strata = np.asarray(strata, dtype=object)
    out = np.empty_like(values)
    for lab in sorted(set(strata.tolist()), key=str):
        rows = strata == lab
        out[rows] = values[rows] - values[rows].mean(axis=0)
    return out


def prefilter(
    expr: ExpressionMatrix,
    min_mean: float = 8.0,
    max_corr: float = 0.9,
    strata=None,
) -> list[str]:
    """Abundance and collinearity filter.

    Keeps features whose mean is at least ``min_mean``, then walks them in
    order of decreasing variance and keeps a feature only if its absolute
    Pearson correlation with every feature kept so far is below ``max_corr``.
    Constant features are dropped.  With ``strata``, variances and
    correlations are computed on within-stratum centered values, which is what
    a model stratified on those labels sees.
    """
    values = expr.values
    means = values.mean(axis=0)
    cand = np.flatnonzero(means >= min_mean)
    if len(cand) == 0:
        logger.warning("prefilter kept no features (no column mean >= %g)", min_mean)
        return []
    v = values[:, cand]
    centered = v - v.mean(axis=0) if strata is None else _center_within(v, strata)
    sd = np.sqrt((centered ** 2).mean(axis=0))
    live = sd > 0
    cand, centered, sd = cand[live], centered[:, live], sd[live]
    order = np.argsort(-sd, kind="stable")
    z = centered / sd
    corr = np.abs(z.T @ z) / len(z)
    kept: list[int] = []
    for j in order:
        if not kept or corr[j, kept].max() < max_corr:
            kept.append(j)
    kept.sort()
    out = [expr.feature_ids[cand[j]] for j in kept]
    if not out:
        logger.warning("prefilter kept no features")
    return out


def univariate_pvalues(dataset: Dataset, level: str, features: Sequence[str]) -> np.ndarray:
    """Wald p-values of single-feature stratified Cox fits (1 if not converged)."""
    fits = fit_univariate(build_stratum_index(dataset, level), dataset.expr.columns(features))
    return fits.pvalues


def select_by_pvalue_grid(
    dataset: Dataset,
    level: str,
    features: Sequence[str] | None = None,
    grid: Sequence[float] = PVALUE_GRID,
    seed: int | None = None,
) -> FittedModel:
    """Pick the p-value cutoff whose multivariate model has the smallest AIC.

    For cutoff c the model holds every feature with univariate p <= c.  The
    empty model scores -2 l(0).  Grid points whose multivariate fit fails are
    skipped; AIC ties favour the smaller cutoff.
    """
    features = list(features if features is not None else dataset.expr.feature_ids)
    index = build_stratum_index(dataset, level)
    pvals = univariate_pvalues(dataset, level, features) if features else np.zeros(0)
    fits: dict[tuple[str, ...], tuple[float, float, np.ndarray] | None] = {}
    best = None
    for c in grid:
        chosen = tuple(f for f, p in zip(features, pvals) if p <= c)
        if chosen not in fits:
            if not chosen:
                ll0 = partial_loglik(index, np.zeros((dataset.n, 1)), [0.0])
                fits[chosen] = (aic(ll0, 0), ll0, np.zeros(0))
            else:
                try:
                    fit = fit_newton(index, dataset.expr.columns(chosen), chosen)
                    fits[chosen] = (fit.aic, fit.loglik, fit.coefficients)
                except (Separation, NonConvergence) as exc:
                    logger.warning("cutoff %g: multivariate fit failed (%s); skipped", c, exc)
                    fits[chosen] = None
        res = fits[chosen]
        if res is None:
            continue
        if best is None or res[0] < best[1]:
            best = (float(c), res[0], res[1], chosen, res[2])
    if best is None:
        raise SelectionFailed("every multivariate fit on the p-value grid failed")
    c, a, ll, chosen, beta = best
    coefs = SparseCoefficients.from_dense(chosen, beta)
    return FittedModel(
        coefs,
        method_name(level, "univ"),
        level,
        tuning={"p_cutoff": c},
        training_summary={
            "aic": a,
            "loglik": ll,
            "n_events": float(dataset.n_events),
            "n_candidates": float(len(features)),
            "n_selected": float(len(chosen)),
        },
        seed=seed,
    )
