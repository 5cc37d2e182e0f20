"""Parametric empirical Bayes location/scale batch adjustment (ComBat).

No covariate design matrix is used, so the per-feature regression reduces to
a grand mean plus batch offsets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import BatchLayout, Dataset, ExpressionMatrix
from .errors import BatchTooSmall, MissingLevel, ValidationError

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class LocationScaleFit:
    batches: tuple[str, ...]
    sizes: np.ndarray        # (B,)
    alpha0: np.ndarray       # (G,)
    gamma_hat: np.ndarray    # (B, G)
    sigma: np.ndarray        # (G,)


@dataclass(frozen=True)
class EBHyperParams:
    gamma_bar: np.ndarray    # (B,)
    tau2: np.ndarray         # (B,)
    lambda_bar: np.ndarray   # (B,) inverse-gamma shape
    theta_bar: np.ndarray    # (B,) inverse-gamma scale
    degenerate: np.ndarray   # (B,) bool, moment inversion fell back


@dataclass(frozen=True)
class EBEstimates:
    gamma_star: np.ndarray   # (B, G)
    delta2_star: np.ndarray  # (B, G)
    iterations: int
    converged: bool


def _values(expr) -> np.ndarray:
    return expr.values if isinstance(expr, ExpressionMatrix) else np.asarray(expr, dtype=float)


def batch_labels_of(expr, layout, level: str = "batch") -> np.ndarray:
    """Per-row labels from a Dataset, a BatchLayout keyed by sample id, or a
    plain label sequence."""
    if isinstance(layout, Dataset):
        return layout.strata(level)
    if isinstance(layout, BatchLayout):
        mapping = layout.batch_of if level == "batch" else layout.slide_of
        if level == "none":
            return np.full(_values(expr).shape[0], "all", dtype=object)
        if mapping is None:
            raise MissingLevel(f"layout has no {level} labels")
        if not isinstance(expr, ExpressionMatrix):
            raise ValidationError("a BatchLayout needs an ExpressionMatrix to align sample ids")
        return np.array([mapping[s] for s in expr.sample_ids], dtype=object)
    return np.asarray(layout, dtype=object)


def _codes(labels) -> tuple[tuple[str, ...], np.ndarray]:
    labels = np.asarray(labels, dtype=object)
    names = tuple(sorted({str(x) for x in labels}))
    lookup = {b: i for i, b in enumerate(names)}
    return names, np.array([lookup[str(x)] for x in labels], dtype=int)


def fit_location_scale(expr, layout, level: str = "batch") -> LocationScaleFit:
    """Grand mean, batch offsets (size-weighted to sum to zero) and pooled
    residual standard deviation per feature."""
    Z = _values(expr)
    if Z.shape[0] < 2:
        raise ValidationError("ComBat needs at least two samples")
    names, code = _codes(batch_labels_of(expr, layout, level))
    if len(code) != Z.shape[0]:
        raise ValidationError("batch labels do not match the number of samples")
    B = len(names)
    sizes = np.bincount(code, minlength=B)
    means = np.vstack([Z[code == b].mean(axis=0) for b in range(B)])
    alpha0 = sizes @ means / sizes.sum()
    gamma_hat = means - alpha0
    resid = Z - alpha0 - gamma_hat[code]
    sigma = np.sqrt((resid ** 2).mean(axis=0))
    flat = sigma < SIGMA_FLOOR
    if flat.any():
        logger.warning("%d constant feature(s); sigma floored at %g", int(flat.sum()), SIGMA_FLOOR)
        sigma = np.where(flat, SIGMA_FLOOR, sigma)
    return LocationScaleFit(names, sizes, alpha0, gamma_hat, sigma)


def standardize(expr, fit: LocationScaleFit) -> np.ndarray:
    """S = (Z - alpha0) / sigma; batch offsets are kept in S."""
    Z = _values(expr)
    if Z.shape[1] != len(fit.alpha0):
        raise ValidationError("feature count differs from the location/scale fit")
    return (Z - fit.alpha0) / fit.sigma


def invert_inverse_gamma_moments(m, s2):
    """Shape and scale of the inverse gamma with mean ``m`` and variance ``s2``.

    mean = theta / (lambda - 1), var = theta^2 / ((lambda - 1)^2 (lambda - 2)).
    """
    lam = m * m / s2 + 2.0
    theta = (m ** 3 + m * s2) / s2
    return lam, theta


def _batch_moments(S: np.ndarray, code: np.ndarray, B: int):
    g_hat = np.vstack([S[code == b].mean(axis=0) for b in range(B)])
    d_hat = np.vstack([S[code == b].var(axis=0, ddof=1) for b in range(B)])
    return g_hat, d_hat


def estimate_hyperparams(S, layout, level: str = "batch") -> EBHyperParams:
    """Method-of-moments normal / inverse-gamma priors, one pair per batch.

    When the per-feature variance estimates of a batch have no spread the
    inversion is undefined; that batch falls back to lambda = 3, theta = 2m.
    """
    S = np.asarray(S, dtype=float)
    names, code = _codes(batch_labels_of(S, layout, level))
    B = len(names)
    sizes = np.bincount(code, minlength=B)
    if np.any(sizes < 2):
        small = names[int(np.flatnonzero(sizes < 2)[0])]
        raise BatchTooSmall(f"batch {small!r} has a single sample; ComBat needs at least two per batch")
    if S.shape[1] < 2:
        raise ValidationError("hyperparameter estimation needs at least two features")
    g_hat, d_hat = _batch_moments(S, code, B)
    gamma_bar = g_hat.mean(axis=1)
    tau2 = g_hat.var(axis=1, ddof=1)
    m = d_hat.mean(axis=1)
    s2 = d_hat.var(axis=1, ddof=1)
    degenerate = ~(s2 > 1e-14 * np.maximum(m * m, 1e-300))
    safe = np.where(degenerate, 1.0, s2)
    lam, theta = invert_inverse_gamma_moments(m, safe)
    lam = np.where(degenerate, 3.0, lam)
    theta = np.where(degenerate, 2.0 * m, theta)
    return EBHyperParams(gamma_bar, tau2, lam, theta, degenerate)


def posterior_gamma(g_hat, delta2, n_b, gamma_bar, tau2):
    """Conditional posterior mean of the standardized batch offset."""
    # (n tau2 g_hat + delta2 gamma_bar) / (n tau2 + delta2), written so that
    # tau2 = 0 returns the prior mean exactly
    w = n_b * tau2 / (n_b * tau2 + delta2)
    return gamma_bar + w * (g_hat - gamma_bar)


def posterior_delta2(S_b, gamma_star, lambda_bar, theta_bar):
    """Conditional posterior mean of the batch variance given ``gamma_star``."""
    n_b = S_b.shape[0]
    ss = ((S_b - gamma_star) ** 2).sum(axis=0)
    return (theta_bar + 0.5 * ss) / (n_b / 2.0 + lambda_bar - 1.0)


def eb_shrink(S, layout, hyper: EBHyperParams, level: str = "batch", *, tol: float = 1e-4, max_iter: int = 100) -> EBEstimates:
    """Alternate the two conditional posterior updates to a fixed point."""
    S = np.asarray(S, dtype=float)
    names, code = _codes(batch_labels_of(S, layout, level))
    B = len(names)
    g_hat, d_hat = _batch_moments(S, code, B)
    g_star = np.empty_like(g_hat)
    d_star = np.empty_like(d_hat)
    worst_iter = 0
    all_converged = True
    for b in range(B):
        S_b = S[code == b]
        n_b = S_b.shape[0]
        d = d_hat[b].copy()
        g = g_hat[b].copy()
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            g_new = posterior_gamma(g_hat[b], d, n_b, hyper.gamma_bar[b], hyper.tau2[b])
            d_new = posterior_delta2(S_b, g_new, hyper.lambda_bar[b], hyper.theta_bar[b])
            change = max(np.max(np.abs(g_new - g)), np.max(np.abs(d_new - d)))
            g, d = g_new, d_new
            if change < tol:
                converged = True
                break
        if not converged:
            logger.warning("EB iteration for batch %r stopped after %d steps", names[b], max_iter)
            all_converged = False
        worst_iter = max(worst_iter, it)
        g_star[b], d_star[b] = g, d
    return EBEstimates(g_star, d_star, worst_iter, all_converged)


def combat_adjust(expr, layout, level: str = "batch"):
    """Full ComBat pipeline; output has the shape (and type) of ``expr``.

    A single batch carries no batch contrast and is returned unchanged.
    """
    Z = _values(expr)
    labels = batch_labels_of(expr, layout, level)
    names, code = _codes(labels)
    sizes = np.bincount(code, minlength=len(names))
    if np.any(sizes < 2):
        small = names[int(np.flatnonzero(sizes < 2)[0])]
        raise BatchTooSmall(f"batch {small!r} has a single sample; ComBat needs at least two per batch")
    if len(names) == 1:
        out = Z.copy()
    else:
        fit = fit_location_scale(Z, labels)
        S = standardize(Z, fit)
        hyper = estimate_hyperparams(S, labels)
        eb = eb_shrink(S, labels, hyper)
        out = (fit.sigma / np.sqrt(eb.delta2_star[code])) * (S - eb.gamma_star[code]) + fit.alpha0
    return expr.with_values(out) if isinstance(expr, ExpressionMatrix) else out
