"""Lasso and adaptive-lasso stratified Cox regression.

Pipeline: univariate screening to round(n_events / 4) features, within-stratum
standardization, a log-spaced lambda path solved by coordinate descent with
warm starts, and cross-validated choice of lambda by partial-likelihood
deviance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .core import Dataset, FittedModel, SparseCoefficients
from .cox import StratumIndex, build_stratum_index, fit_univariate, partial_loglik, score_and_curvature
from .errors import NonConvergence, TooFewEvents

logger = logging.getLogger(__name__)

PENALTY_KINDS = ("lasso", "adaptive_lasso")
WEIGHT_CAP = 1e6
LAMBDA_FLOOR = 1e-12


@dataclass(frozen=True)
class PenaltySpec:
    kind: str = "lasso"
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("penalty weights must be finite and positive")
            object.__setattr__(self, "weights", w)

    def factor(self, p: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(p)
        if len(self.weights) != p:
            raise ValueError(f"{len(self.weights)} penalty weights for {p} features")
        return self.weights


@dataclass(frozen=True)
class LambdaPath:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if len(v) < 2 or np.any(v <= 0) or np.any(np.diff(v) >= 0):
            raise ValueError("lambda path needs >= 2 strictly decreasing positive values")
        object.__setattr__(self, "values", v)

    @classmethod
    def log_spaced(cls, lam_max: float, n: int = 50, min_ratio: float = 0.05) -> "LambdaPath":
        return cls(np.geomspace(lam_max, lam_max * min_ratio, n))

    def __len__(self):
        return len(self.values)


def n_screened(n_events: int) -> int:
    """Nearest integer to n_events / 4; halves go to the even neighbour."""
    return int(round(n_events / 4))


def screen_top_features(
    dataset: Dataset, level: str, features: Sequence[str] | None = None
) -> list[str]:
    """Keep the round(n0/4) features with the largest univariate maximized
    partial likelihood.  Non-converged fits rank last; ties keep input order."""
    n0 = dataset.n_events
    if n0 < 4:
        raise TooFewEvents(f"screening needs at least 4 events, found {n0}")
    features = list(features if features is not None else dataset.expr.feature_ids)
    index = build_stratum_index(dataset, level)
    fits = fit_univariate(index, dataset.expr.columns(features))
    # rounding makes numerically identical columns tie, so input order decides
    key = np.where(fits.converged, np.round(fits.loglik, 9), -np.inf)
    order = np.argsort(-key, kind="stable")
    k = min(n_screened(n0), len(features))
    return [features[j] for j in order[:k]]


def standardize_within_strata(X: np.ndarray, strata) -> tuple[np.ndarray, np.ndarray]:
    """Center columns within each stratum and scale by the pooled
    within-stratum standard deviation.  Returns (standardized X, scale).

    Both pieces are unchanged by per-stratum additive shifts, so the penalized
    fit inherits the shift invariance of the stratified likelihood.
    """
    X = np.asarray(X, dtype=float)
    strata = np.asarray(strata, dtype=object)
    centered = np.empty_like(X)
    for lab in sorted(set(strata.tolist()), key=str):
        rows = strata == lab
        centered[rows] = X[rows] - X[rows].mean(axis=0)
    scale = np.sqrt((centered ** 2).mean(axis=0))
    scale = np.where(scale > 0, scale, 1.0)
    return centered / scale, scale


def _kernel_args(index: StratumIndex):
    return index.bounds, index.event, index.tie_end


def compute_lambda_max(index: StratumIndex, X, penalty: PenaltySpec | None = None) -> float:
    """Smallest lambda whose penalized solution is identically zero."""
    X = np.asarray(X, dtype=float)
    pf = (penalty or PenaltySpec()).factor(X.shape[1])
    g = score_and_curvature(index, X, np.zeros(X.shape[1])).gradient
    lam = float(np.max(np.abs(g) / (index.n * pf))) if X.shape[1] else 0.0
    return lam if lam > 0 else LAMBDA_FLOOR


def solve_path(
    index: StratumIndex,
    X,
    lambdas,
    penalty: PenaltySpec | None = None,
    *,
    beta_init=None,
    tol: float = 1e-7,
    max_outer: int = 100,
    max_inner: int = 10_000,
) -> np.ndarray:
    """Coefficients (len(lambdas) x p) along a decreasing lambda sequence."""
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    lambdas = np.asarray(lambdas, dtype=float)
    pf = (penalty or PenaltySpec()).factor(p)
    b0 = np.zeros(p) if beta_init is None else np.asarray(beta_init, dtype=float)
    betas, status, _ = _kernels.cd_path(
        index.sorted_rows(X), *_kernel_args(index), lambdas, pf, float(index.n), b0,
        tol, tol * 1e-2, max_outer, max_inner,
    )
    if np.any(status != _kernels.OK):
        bad = int(np.flatnonzero(status)[0])
        raise NonConvergence(
            f"coordinate descent did not converge at lambda={lambdas[bad]:.4g} "
            f"({max_inner} inner sweeps x {max_outer} outer loops)"
        )
    return betas


def fit_coordinate_descent(
    index: StratumIndex,
    X,
    lam: float,
    penalty: PenaltySpec | None = None,
    features: Sequence[str] | None = None,
) -> SparseCoefficients:
    """Penalized stratified Cox fit at a single ``lam`` (no standardization).

    The objective is ``l(beta) - n * lam * sum_g w_g |beta_g|`` with ``n`` the
    number of samples in ``index``.
    """
    X = np.asarray(X, dtype=float)
    p = X.shape[1]
    features = list(features) if features is not None else [str(j) for j in range(p)]
    if lam <= 0:
        raise ValueError("lambda must be positive")
    lam_max = compute_lambda_max(index, X, penalty)
    if lam >= lam_max:
        return SparseCoefficients()
    lambdas = np.geomspace(lam_max, lam, 8)[1:]
    beta = solve_path(index, X, lambdas, penalty)[-1]
    return SparseCoefficients.from_dense(features, beta)


def kkt_violation(index: StratumIndex, X, beta, lam: float, penalty: PenaltySpec | None = None) -> float:
    """Largest violation of the lasso optimality conditions at ``beta``.

    Zero coefficients need |g_j| <= n lam w_j and nonzero ones need
    g_j = sign(beta_j) n lam w_j, with g the exact partial-likelihood gradient.
    """
    X = np.asarray(X, dtype=float)
    beta = np.asarray(beta, dtype=float)
    thr = index.n * lam * (penalty or PenaltySpec()).factor(X.shape[1])
    g = score_and_curvature(index, X, beta).gradient
    zero = beta == 0
    viol = np.where(zero, np.maximum(np.abs(g) - thr, 0.0), np.abs(g - np.sign(beta) * thr))
    return float(viol.max()) if len(viol) else 0.0


def assign_folds(strata, event, K: int, rng: np.random.Generator, unit: str = "auto") -> np.ndarray:
    """Fold id per sample.

    ``auto`` assigns whole strata when there are at least 2K of them, otherwise
    samples within each stratum (events dealt first so every fold gets some).
    """
    strata = np.asarray(strata, dtype=object)
    event = np.asarray(event)
    labels = sorted(set(strata.tolist()), key=str)
    if K < 2:
        raise ValueError("need at least 2 folds")
    if unit == "auto":
        unit = "strata" if len(labels) >= 2 * K else "samples"
    folds = np.empty(len(strata), dtype=int)
    if unit == "strata":
        if len(labels) < K:
            raise ValueError(f"{K} folds requested but only {len(labels)} strata")
        perm = rng.permutation(len(labels))
        for pos, j in enumerate(perm):
            folds[strata == labels[j]] = pos % K
        return folds
    if unit != "samples":
        raise ValueError(f"unknown fold unit {unit!r}")
    counter = int(rng.integers(K))
    for lab in labels:
        rows = np.flatnonzero(strata == lab)
        rows = rows[rng.permutation(len(rows))]
        rows = rows[np.argsort(-event[rows], kind="stable")]
        for r in rows:
            folds[r] = counter % K
            counter += 1
    return folds


@dataclass(frozen=True)
class CVResult:
    lam: float
    index: int
    path: LambdaPath
    criterion: np.ndarray
    folds: np.ndarray


def cross_validate_lambda(
    dataset: Dataset,
    features: Sequence[str],
    penalty: PenaltySpec | None = None,
    K: int = 5,
    path: LambdaPath | None = None,
    rng: np.random.Generator | None = None,
    level: str = "batch",
    *,
    unit: str = "auto",
    X: np.ndarray | None = None,
) -> CVResult:
    """Choose lambda by K-fold cross-validated partial-likelihood deviance.

    For fold k the contribution is l_full(b_-k) - l_-k(b_-k), where b_-k is
    fitted without fold k; the criterion is -2 times the sum over folds and
    the minimizing lambda is returned (ties go to the larger lambda).  ``X``
    may supply an already standardized design for ``features``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    strata = dataset.strata(level)
    if X is None:
        X, _ = standardize_within_strata(dataset.expr.columns(features), strata)
    full = build_stratum_index(dataset, level)
    if path is None:
        path = LambdaPath.log_spaced(compute_lambda_max(full, X, penalty))
    folds = assign_folds(strata, dataset.event, K, rng, unit)
    cvll = np.zeros(len(path))
    for k in range(K):
        held = folds == k
        if dataset.event[held].sum() == 0:
            logger.warning("fold %d has no events; it contributes nothing to the CV criterion", k)
            continue
        train = np.flatnonzero(~held)
        idx = StratumIndex.from_arrays(dataset.time[train], dataset.event[train], strata[train], level)
        if idx.n_events == 0:
            logger.warning("training part of fold %d has no events; skipped", k)
            continue
        betas = solve_path(idx, X[train], path.values, penalty)
        for j, b in enumerate(betas):
            cvll[j] += partial_loglik(full, X, b) - partial_loglik(idx, X[train], b)
    criterion = -2.0 * cvll
    best = int(np.argmin(criterion))
    return CVResult(float(path.values[best]), best, path, criterion, folds)


def adaptive_weights(dataset: Dataset, features: Sequence[str], level: str, X: np.ndarray | None = None) -> np.ndarray:
    """Inverse absolute univariate stratified estimates, capped at 1e6."""
    if X is None:
        X = dataset.expr.columns(features)
    fits = fit_univariate(build_stratum_index(dataset, level), X)
    b = np.abs(fits.beta)
    return np.where(b < 1.0 / WEIGHT_CAP, WEIGHT_CAP, 1.0 / np.maximum(b, 1.0 / WEIGHT_CAP))


def method_name(level: str, kind: str) -> str:
    return ("batman_" if level != "none" else "cox_") + kind


def fit_penalized(
    dataset: Dataset,
    level: str,
    kind: str = "lasso",
    rng: np.random.Generator | None = None,
    *,
    features: Sequence[str] | None = None,
    folds: int = 5,
    n_lambda: int = 50,
    min_ratio: float = 0.05,
    seed: int | None = None,
) -> FittedModel:
    """Screen, standardize, cross-validate and fit a penalized stratified Cox model."""
    rng = rng if rng is not None else np.random.default_rng(seed if seed is not None else 0)
    selected = screen_top_features(dataset, level, features)
    strata = dataset.strata(level)
    X, scale = standardize_within_strata(dataset.expr.columns(selected), strata)
    index = build_stratum_index(dataset, level)
    if kind in ("adaptive_lasso", "alasso"):
        kind = "adaptive_lasso"
        penalty = PenaltySpec(kind, adaptive_weights(dataset, selected, level, X))
    else:
        penalty = PenaltySpec(kind)
    lam_max = compute_lambda_max(index, X, penalty)
    path = LambdaPath.log_spaced(lam_max, n_lambda, min_ratio)
    cv = cross_validate_lambda(dataset, selected, penalty, folds, path, rng, level, X=X)
    beta_std = solve_path(index, X, path.values, penalty)[cv.index]
    coefs = SparseCoefficients.from_dense(selected, beta_std / scale)
    ll = partial_loglik(index, X, beta_std)
    short = "alasso" if kind == "adaptive_lasso" else "lasso"
    return FittedModel(
        coefs,
        method_name(level, short),
        level,
        tuning={"lambda": cv.lam, "lambda_max": lam_max, "lambda_min": float(path.values[-1])},
        training_summary={
            "loglik": ll,
            "n_events": float(dataset.n_events),
            "n_candidates": float(len(features) if features is not None else dataset.expr.n_features),
            "n_screened": float(len(selected)),
            "n_selected": float(len(coefs)),
            "cv_deviance": float(cv.criterion[cv.index]),
        },
        seed=seed,
    )
