"""Median and quantile normalization, plus frozen variants that replay a
training reference on new samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .core import ExpressionMatrix
from .errors import ValidationError

KINDS = ("median", "quantile")


@dataclass(frozen=True)
class NormalizationReference:
    kind: str
    reference_median: float | None = None
    reference_quantiles: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown normalization kind {self.kind!r}")
        if self.kind == "median" and self.reference_median is None:
            raise ValidationError("median reference needs reference_median")
        if self.kind == "quantile":
            if self.reference_quantiles is None:
                raise ValidationError("quantile reference needs reference_quantiles")
            q = np.array(self.reference_quantiles, dtype=float)
            if q.ndim != 1 or np.any(np.diff(q) < 0):
                raise ValidationError("reference quantiles must be a non-decreasing vector")
            q.setflags(write=False)
            object.__setattr__(self, "reference_quantiles", q)


def _values(expr) -> np.ndarray:
    return expr.values if isinstance(expr, ExpressionMatrix) else np.asarray(expr, dtype=float)


def _wrap(expr, out):
    return expr.with_values(out) if isinstance(expr, ExpressionMatrix) else out


def _recenter(Z: np.ndarray, target: float) -> np.ndarray:
    shift = target - np.median(Z, axis=1, keepdims=True)
    # a row already centred up to rounding is left alone, which makes a
    # second pass an exact no-op
    shift[np.abs(shift) <= 8 * np.spacing(max(abs(target), np.abs(Z).max(initial=0.0)))] = 0.0
    return Z + shift


def _map_to_reference(Z: np.ndarray, ref: np.ndarray) -> np.ndarray:
    # a tied block of ranks lo..hi-1 receives the mean of ref[lo:hi]
    out = np.empty_like(Z)
    csum = np.concatenate([[0.0], np.cumsum(ref)])
    for i, row in enumerate(Z):
        lo = rankdata(row, method="min").astype(int) - 1
        hi = rankdata(row, method="max").astype(int)
        out[i] = (csum[hi] - csum[lo]) / (hi - lo)
    return out


def median_normalize(expr):
    """Shift each sample so its median equals the grand median of all entries."""
    Z = _values(expr)
    grand = float(np.median(Z))
    return _wrap(expr, _recenter(Z, grand)), NormalizationReference("median", reference_median=grand)


def quantile_normalize(expr):
    """Rank-mean quantile normalization; the reference is the mean sorted row."""
    Z = _values(expr)
    ref = np.sort(Z, axis=1).mean(axis=0)
    return _wrap(expr, _map_to_reference(Z, ref)), NormalizationReference("quantile", reference_quantiles=ref)


def frozen_apply(expr, reference: NormalizationReference, kind: str | None = None):
    """Normalize new samples against a stored training reference.

    Only per-sample medians or ranks of ``expr`` are used.
    """
    if kind is not None and kind != reference.kind:
        raise ValidationError(f"requested {kind} normalization but the reference is {reference.kind}")
    Z = _values(expr)
    if reference.kind == "median":
        return _wrap(expr, _recenter(Z, reference.reference_median))
    ref = reference.reference_quantiles
    if len(ref) != Z.shape[1]:
        raise ValidationError(
            f"quantile reference has {len(ref)} values but the data have {Z.shape[1]} features"
        )
    return _wrap(expr, _map_to_reference(Z, ref))
