"""Stratified Cox partial likelihood: evaluation, derivatives, Newton fits.

Each stratum keeps its own risk sets, so any covariate shift that is constant
within a stratum cancels from every quantity computed here.  Tied event times
use the Breslow convention; a censored sample whose time equals an event time
stays in that event's risk set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .core import Dataset
from .errors import NoEvents, NonConvergence, Separation

logger = logging.getLogger(__name__)

SEPARATION_BOUND = 50.0
STEP_TOL = 1e-6
# information below this fraction of its value at beta = 0 means the
# likelihood keeps rising towards infinity (monotone likelihood)
INFO_COLLAPSE = 1e-8


@dataclass(frozen=True)
class _Stratum:
    lo: int
    hi: int
    group_start: np.ndarray  # local index of each tie group holding >= 1 event
    group_d: np.ndarray      # events per such group
    events: np.ndarray       # local indices of event rows


@dataclass(frozen=True)
class StratumIndex:
    """Sorted risk-set bookkeeping for a stratified Cox model.

    Rows are reordered by (stratum, time).  ``order[k]`` is the dataset row at
    sorted position ``k``; positions ``bounds[b]:bounds[b+1]`` form stratum
    ``labels[b]``; ``tie_end[k]`` is one past the last position sharing the
    time of position ``k`` within its stratum.  The risk set of the tie group
    starting at ``k`` is ``k:bounds[b+1]``.
    """

    order: np.ndarray
    bounds: np.ndarray
    time: np.ndarray
    event: np.ndarray
    tie_end: np.ndarray
    labels: tuple[str, ...]
    level: str = "none"
    strata: tuple[_Stratum, ...] = field(default=(), repr=False)

    @classmethod
    def from_arrays(cls, time, event, strata, level: str = "none") -> "StratumIndex":
        time = np.asarray(time, dtype=float)
        event = np.asarray(event, dtype=np.int64)
        strata = np.asarray(strata, dtype=object)
        labels = sorted(set(strata.tolist()), key=str)
        code = np.array([labels.index(s) for s in strata]) if len(labels) > 1 else np.zeros(len(time), int)
        order = np.lexsort((np.arange(len(time)), time, code))
        code_s = code[order]
        bounds = np.searchsorted(code_s, np.arange(len(labels) + 1))
        t_s = time[order]
        ev_s = event[order]
        tie_end = np.empty(len(time), dtype=np.int64)
        parts = []
        for b in range(len(labels)):
            lo, hi = int(bounds[b]), int(bounds[b + 1])
            ts = t_s[lo:hi]
            # start of each tie group in local coordinates
            starts = np.flatnonzero(np.r_[True, ts[1:] != ts[:-1]])
            ends = np.r_[starts[1:], hi - lo]
            sizes = ends - starts
            tie_end[lo:hi] = lo + np.repeat(ends, sizes)
            d = np.add.reduceat(ev_s[lo:hi], starts) if hi > lo else np.zeros(0, np.int64)
            keep = d > 0
            parts.append(
                _Stratum(lo, hi, starts[keep], d[keep].astype(float), np.flatnonzero(ev_s[lo:hi]))
            )
        return cls(order, bounds.astype(np.int64), t_s, ev_s, tie_end,
                   tuple(str(x) for x in labels), level, tuple(parts))

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def n_strata(self) -> int:
        return len(self.labels)

    @property
    def events_per_stratum(self) -> np.ndarray:
        return np.array([len(s.events) for s in self.strata], dtype=int)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    def risk_sets(self, b: int) -> list[np.ndarray]:
        """Dataset rows at risk at each distinct event time of stratum ``b``."""
        s = self.strata[b]
        return [self.order[s.lo + g: s.hi] for g in s.group_start]

    def sorted_rows(self, X: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(np.asarray(X, dtype=float)[self.order])


def build_stratum_index(dataset: Dataset, level: str) -> StratumIndex:
    """One stratum per distinct label at ``level``; ``none`` pools all samples."""
    return StratumIndex.from_arrays(dataset.time, dataset.event, dataset.strata(level), level)


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _rcumsum(a: np.ndarray) -> np.ndarray:
    return np.cumsum(a[::-1], axis=0)[::-1]


def _rlogcumsumexp(a: np.ndarray) -> np.ndarray:
    # log of reverse cumulative sums of exp(a); exact even when tail risk
    # sets sit far below the stratum maximum
    return np.logaddexp.accumulate(a[::-1], axis=0)[::-1]


def partial_loglik(index: StratumIndex, X, beta) -> float:
    """Log partial likelihood summed over strata (Breslow ties)."""
    X = _as_matrix(X)
    eta = (X @ np.asarray(beta, dtype=float))[index.order]
    ll = 0.0
    for s in index.strata:
        if len(s.group_d) == 0:
            continue
        e = eta[s.lo:s.hi]
        ll += e[s.events].sum() - np.dot(s.group_d, _rlogcumsumexp(e)[s.group_start])
    return float(ll)


@dataclass(frozen=True)
class Derivatives:
    gradient: np.ndarray
    hessian_diag: np.ndarray
    hessian: np.ndarray | None = None


def score_and_curvature(index: StratumIndex, X, beta, full: bool = False) -> Derivatives:
    """Gradient and second derivatives of :func:`partial_loglik` in ``beta``.

    ``hessian_diag`` holds the exact diagonal d^2 l / d beta_g^2 (not the
    diagonal-in-eta approximation used by coordinate descent).
    """
    X = _as_matrix(X)
    beta = np.asarray(beta, dtype=float)
    p = X.shape[1]
    Xs = X[index.order]
    eta = Xs @ beta
    grad = np.zeros(p)
    diag = np.zeros(p)
    hess = np.zeros((p, p)) if full else None
    for s in index.strata:
        if len(s.group_d) == 0:
            continue
        x = Xs[s.lo:s.hi]
        e = eta[s.lo:s.hi]
        ex = np.exp(e - e.max())
        gs, d = s.group_start, s.group_d
        s0 = _rcumsum(ex)[gs]
        mu = _rcumsum(ex[:, None] * x)[gs] / s0[:, None]
        grad += x[s.events].sum(axis=0) - d @ mu
        m2 = _rcumsum(ex[:, None] * x * x)[gs] / s0[:, None]
        diag -= d @ (m2 - mu * mu)
        if full:
            s2 = _rcumsum(ex[:, None, None] * x[:, :, None] * x[:, None, :])[gs] / s0[:, None, None]
            hess -= np.einsum("k,kij->ij", d, s2 - mu[:, :, None] * mu[:, None, :])
    return Derivatives(grad, diag, hess)


def degenerate_columns(index: StratumIndex, X) -> np.ndarray:
    """Columns constant over every risk set, i.e. carrying no information."""
    X = _as_matrix(X)
    Xs = X[index.order]
    varies = np.zeros(X.shape[1], dtype=bool)
    for s in index.strata:
        if len(s.group_d) == 0:
            continue
        block = Xs[s.lo + s.group_start[0]: s.hi]
        spread = block.max(axis=0) - block.min(axis=0)
        scale = np.maximum(np.abs(block).max(axis=0), 1.0)
        varies |= spread > 1e-13 * scale
    return ~varies


@dataclass(frozen=True)
class CoxFit:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    loglik: float
    aic: float
    converged: bool
    iterations: int
    features: tuple[str, ...] = ()

    def coefficient(self, feature) -> tuple[float, float]:
        j = self.features.index(feature) if isinstance(feature, str) else int(feature)
        return float(self.coefficients[j]), float(self.standard_errors[j])


def aic(loglik: float, k: int) -> float:
    return -2.0 * loglik + 2.0 * k


def _solve(info: np.ndarray, g: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(info, g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(info, g, rcond=None)[0]


def _standard_errors(info: np.ndarray) -> np.ndarray:
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    d = np.diag(cov)
    return np.where(d > 0, np.sqrt(np.abs(d)), np.inf)


def fit_newton(
    index: StratumIndex,
    X,
    features: Sequence[str] | None = None,
    *,
    max_iter: int = 100,
    gtol: float = 1e-8,
    ftol: float = 1e-10,
) -> CoxFit:
    """Maximize the stratified partial likelihood by damped Newton steps.

    Steps are halved while the log-likelihood decreases.  Iteration stops once
    the largest score component is below ``gtol`` (with a negligible Newton
    step) or the relative change of the log-likelihood is below ``ftol``.
    Columns with no within-risk-set variation are held at zero with infinite
    standard error.  Separation is raised when a coefficient leaves
    [-50, 50] or when the information collapses at the reported optimum.
    """
    X = _as_matrix(X)
    p = X.shape[1]
    features = tuple(features) if features is not None else tuple(str(j) for j in range(p))
    if index.n_events == 0:
        raise NoEvents("no events in the data; the partial likelihood is constant")

    active = ~degenerate_columns(index, X)
    Xa = X[:, active]
    beta = np.zeros(p)
    ba = np.zeros(active.sum())
    ll = partial_loglik(index, Xa, ba)
    se = np.full(p, np.inf)
    if not active.any():
        return CoxFit(beta, se, ll, aic(ll, p), True, 0, features)

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        der = score_and_curvature(index, Xa, ba, full=True)
        step = _solve(-der.hessian, der.gradient)
        # a vanishing score with a non-vanishing Newton step is a likelihood
        # still rising towards infinite beta, not an optimum
        if np.max(np.abs(der.gradient)) < gtol and np.max(np.abs(step)) < STEP_TOL:
            converged = True
            break
        t = 1.0
        for _ in range(40):
            cand = ba + t * step
            ll_new = partial_loglik(index, Xa, cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            cand, ll_new = ba, ll
        if np.any(np.abs(cand) > SEPARATION_BOUND):
            raise Separation(
                f"coefficient exceeded {SEPARATION_BOUND:g} in magnitude at iteration {it}"
                " (monotone likelihood)"
            )
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        ba, ll = cand, ll_new
        if rel < ftol:
            converged = True
            break
    if not converged:
        raise NonConvergence(f"Newton iterations did not converge in {max_iter} steps")

    info = -score_and_curvature(index, Xa, ba, full=True).hessian
    info0 = -score_and_curvature(index, Xa, np.zeros_like(ba)).hessian_diag
    if np.any(np.diag(info) < INFO_COLLAPSE * info0):
        raise Separation("observed information vanished at the optimum (monotone likelihood)")
    beta[active] = ba
    se[active] = _standard_errors(info)
    return CoxFit(beta, se, ll, aic(ll, p), True, it, features)


def wald_pvalue(fit: CoxFit, feature=0) -> float:
    """Two-sided Wald p-value of one coefficient, in (0, 1]."""
    if not fit.converged:
        raise NonConvergence("Wald test needs a converged fit")
    b, se = fit.coefficient(feature)
    z = 0.0 if b == 0.0 else abs(b) / se
    return float(max(2.0 * norm.sf(z), np.finfo(float).tiny))


@dataclass(frozen=True)
class UnivariateFits:
    """One single-feature stratified Cox fit per column."""

    beta: np.ndarray
    se: np.ndarray
    loglik: np.ndarray
    loglik_null: float
    converged: np.ndarray

    @property
    def pvalues(self) -> np.ndarray:
        z = np.where(self.beta == 0.0, 0.0, np.abs(self.beta) / self.se)
        p = np.maximum(2.0 * norm.sf(z), np.finfo(float).tiny)
        return np.where(self.converged, p, 1.0)


def _univariate_terms(index: StratumIndex, Xs: np.ndarray, beta: np.ndarray):
    G = Xs.shape[1]
    ll = np.zeros(G)
    sc = np.zeros(G)
    info = np.zeros(G)
    for s in index.strata:
        if len(s.group_d) == 0:
            continue
        x = Xs[s.lo:s.hi]
        eta = x * beta
        m = eta.max(axis=0)
        ex = np.exp(eta - m)
        gs, d = s.group_start, s.group_d
        s0 = _rcumsum(ex)[gs]
        mu = _rcumsum(ex * x)[gs] / s0
        m2 = _rcumsum(ex * x * x)[gs] / s0
        ll += eta[s.events].sum(axis=0) - d @ _rlogcumsumexp(eta)[gs]
        sc += x[s.events].sum(axis=0) - d @ mu
        info += d @ (m2 - mu * mu)
    return ll, sc, info


def fit_univariate(
    index: StratumIndex, X, *, max_iter: int = 100, gtol: float = 1e-8, ftol: float = 1e-10
) -> UnivariateFits:
    """Column-by-column stratified Cox fits, vectorized over columns.

    Uses the same damped Newton rule and stopping criteria as
    :func:`fit_newton`.  Columns that diverge past the separation bound or do
    not converge are flagged in ``converged``.
    """
    X = _as_matrix(X)
    if index.n_events == 0:
        raise NoEvents("no events in the data")
    G = X.shape[1]
    Xs = X[index.order]
    degenerate = degenerate_columns(index, X)
    beta = np.zeros(G)
    ll, sc, info = _univariate_terms(index, Xs, beta)
    info0 = info.copy()
    ll_null = float(ll[0]) if G else partial_loglik(index, np.zeros((index.n, 1)), [0.0])
    done = degenerate.copy()
    converged = degenerate.copy()
    for _ in range(max_iter):
        live = np.flatnonzero(~done)
        small = (np.abs(sc[live]) < gtol) & (np.abs(sc[live]) < STEP_TOL * info[live])
        converged[live[small]] = True
        done[live[small]] = True
        live = live[~small]
        if len(live) == 0:
            break
        step = sc[live] / info[live]
        t = np.ones(len(live))
        pending = np.arange(len(live))
        new_b = beta[live].copy()
        new_ll = ll[live].copy()
        new_sc = sc[live].copy()
        new_info = info[live].copy()
        for _ in range(40):
            cols = live[pending]
            cand = beta[cols] + t[pending] * step[pending]
            l_c, s_c, i_c = _univariate_terms(index, Xs[:, cols], cand)
            ok = np.isfinite(l_c) & (l_c >= ll[cols] - 1e-12 * np.abs(ll[cols]))
            acc = pending[ok]
            new_b[acc], new_ll[acc], new_sc[acc], new_info[acc] = cand[ok], l_c[ok], s_c[ok], i_c[ok]
            pending = pending[~ok]
            if len(pending) == 0:
                break
            t[pending] *= 0.5
        rel = np.abs(new_ll - ll[live]) / np.maximum(np.abs(ll[live]), 1e-300)
        beta[live], ll[live], sc[live], info[live] = new_b, new_ll, new_sc, new_info
        diverged = np.abs(new_b) > SEPARATION_BOUND
        done[live[diverged]] = True
        fin = (rel < ftol) & ~diverged
        converged[live[fin]] = True
        done[live[fin]] = True
    converged &= degenerate | (info >= INFO_COLLAPSE * info0)
    with np.errstate(divide="ignore"):
        se = np.where(info > 0, 1.0 / np.sqrt(np.where(info > 0, info, 1.0)), np.inf)
    se[degenerate] = np.inf
    return UnivariateFits(beta, se, ll, ll_null, converged)
