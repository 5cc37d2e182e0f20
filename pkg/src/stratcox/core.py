"""Shared data model: expression matrices, survival outcomes, batch layout,
fitted models and linear risk scoring."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AlignmentError,
    EmptyBatch,
    InvalidSurvival,
    MissingFeature,
    MissingLevel,
    ValidationError,
)

LEVELS = ("slide", "batch", "none")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _check_unique(ids: Sequence[str], what: str) -> None:
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise ValidationError(f"duplicate {what} id {dup!r}")


@dataclass(frozen=True)
class ExpressionMatrix:
    """Samples x features matrix of log2-scale expression values."""

    values: np.ndarray
    sample_ids: tuple[str, ...]
    feature_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValidationError("expression values must be a 2-d matrix")
        sample_ids = tuple(str(s) for s in self.sample_ids)
        feature_ids = tuple(str(f) for f in self.feature_ids)
        if values.shape != (len(sample_ids), len(feature_ids)):
            raise ValidationError(
                f"matrix shape {values.shape} does not match "
                f"{len(sample_ids)} samples x {len(feature_ids)} features"
            )
        if len(feature_ids) < 1 or len(sample_ids) < 1:
            raise ValidationError("expression matrix needs at least one sample and one feature")
        if not np.all(np.isfinite(values)):
            r, c = np.argwhere(~np.isfinite(values))[0]
            raise ValidationError(
                f"non-finite value at sample {sample_ids[r]!r}, feature {feature_ids[c]!r}"
            )
        _check_unique(sample_ids, "sample")
        _check_unique(feature_ids, "feature")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "sample_ids", sample_ids)
        object.__setattr__(self, "feature_ids", feature_ids)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def columns(self, features: Iterable[str]) -> np.ndarray:
        """Return the n x k submatrix for ``features`` (in the given order)."""
        lookup = {f: j for j, f in enumerate(self.feature_ids)}
        idx = []
        for f in features:
            if f not in lookup:
                raise MissingFeature(f"feature {f!r} not present in expression matrix")
            idx.append(lookup[f])
        return self.values[:, idx]

    def with_values(self, values: np.ndarray) -> "ExpressionMatrix":
        return ExpressionMatrix(values, self.sample_ids, self.feature_ids)

    def select_features(self, features: Sequence[str]) -> "ExpressionMatrix":
        return ExpressionMatrix(self.columns(features), self.sample_ids, tuple(features))

    def take(self, rows: Sequence[int]) -> "ExpressionMatrix":
        rows = np.asarray(rows, dtype=int)
        return ExpressionMatrix(
            self.values[rows], tuple(self.sample_ids[i] for i in rows), self.feature_ids
        )


@dataclass(frozen=True)
class SurvivalRecord:
    time: float
    event: int


@dataclass(frozen=True)
class BatchLayout:
    """Sample -> batch label, and optionally sample -> slide label."""

    batch_of: Mapping[str, str]
    slide_of: Mapping[str, str] | None = None


@dataclass(frozen=True)
class Dataset:
    """Expression, survival and batch labels aligned row by row."""

    expr: ExpressionMatrix
    time: np.ndarray
    event: np.ndarray
    batch: np.ndarray
    slide: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.expr.n_samples

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def sample_ids(self) -> tuple[str, ...]:
        return self.expr.sample_ids

    @property
    def survival(self) -> list[SurvivalRecord]:
        return [SurvivalRecord(float(t), int(e)) for t, e in zip(self.time, self.event)]

    @property
    def layout(self) -> BatchLayout:
        ids = self.sample_ids
        slide = None if self.slide is None else dict(zip(ids, self.slide))
        return BatchLayout(dict(zip(ids, self.batch)), slide)

    def strata(self, level: str) -> np.ndarray:
        """Per-sample stratum labels at ``level`` (``none`` gives one stratum)."""
        if level == "batch":
            return self.batch
        if level == "slide":
            if self.slide is None:
                raise MissingLevel("slide stratification requested but the layout has no slide labels")
            return self.slide
        if level == "none":
            return np.full(self.n, "all", dtype=object)
        raise ValueError(f"unknown stratification level {level!r}; expected one of {LEVELS}")

    def take(self, rows: Sequence[int]) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(
            self.expr.take(rows),
            _frozen(self.time[rows]),
            _frozen(self.event[rows]),
            _frozen(self.batch[rows]),
            None if self.slide is None else _frozen(self.slide[rows]),
        )

    def with_expr(self, expr: ExpressionMatrix) -> "Dataset":
        if expr.sample_ids != self.sample_ids:
            raise AlignmentError("replacement expression matrix has different samples")
        return Dataset(expr, self.time, self.event, self.batch, self.slide)


def _label(value: Any) -> str | None:
    if value is None:
        return None
    s = str(value).strip()
    return s or None


def validate_dataset(
    expr: ExpressionMatrix,
    survival: Mapping[str, SurvivalRecord],
    layout: BatchLayout,
) -> Dataset:
    """Align survival records and batch labels to the rows of ``expr``.

    Raises AlignmentError when the three inputs do not cover exactly the same
    sample ids, InvalidSurvival for non-positive or non-finite times and
    non-binary events, and EmptyBatch for samples without a batch label.
    """
    ids = expr.sample_ids
    if expr.n_samples < 2:
        raise ValidationError("a dataset needs at least two samples")
    for name, mapping in (("survival", survival), ("batch layout", layout.batch_of)):
        missing = [s for s in ids if s not in mapping]
        extra = sorted(set(mapping) - set(ids))
        if missing:
            raise AlignmentError(f"{name} is missing sample {missing[0]!r}")
        if extra:
            raise AlignmentError(f"{name} has unknown sample {extra[0]!r}")
    if layout.slide_of is not None:
        missing = [s for s in ids if s not in layout.slide_of]
        extra = sorted(set(layout.slide_of) - set(ids))
        if missing or extra:
            raise AlignmentError(
                f"slide labels do not match samples ({(missing or extra)[0]!r})"
            )

    time = np.empty(len(ids))
    event = np.empty(len(ids), dtype=int)
    for i, s in enumerate(ids):
        rec = survival[s]
        t = float(rec.time)
        if not np.isfinite(t) or t <= 0:
            raise InvalidSurvival(f"sample {s!r}: survival time must be positive, got {rec.time!r}")
        if rec.event not in (0, 1, True, False) and float(rec.event) not in (0.0, 1.0):
            raise InvalidSurvival(f"sample {s!r}: event must be 0 or 1, got {rec.event!r}")
        time[i] = t
        event[i] = int(rec.event)

    batch = [_label(layout.batch_of[s]) for s in ids]
    if any(b is None for b in batch):
        s = ids[batch.index(None)]
        raise EmptyBatch(f"sample {s!r} has no batch label")
    slide = None
    if layout.slide_of is not None:
        slide = [_label(layout.slide_of[s]) for s in ids]
        if any(x is None for x in slide):
            s = ids[slide.index(None)]
            raise EmptyBatch(f"sample {s!r} has no slide label")
        owner: dict[str, str] = {}
        for sl, b in zip(slide, batch):
            if owner.setdefault(sl, b) != b:
                raise ValidationError(f"slide {sl!r} spans batches {owner[sl]!r} and {b!r}")

    return Dataset(
        expr,
        _frozen(time),
        _frozen(event),
        _frozen(np.array(batch, dtype=object)),
        None if slide is None else _frozen(np.array(slide, dtype=object)),
    )


@dataclass(frozen=True)
class SparseCoefficients:
    """Feature -> nonzero Cox coefficient (no intercept)."""

    entries: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        entries = tuple((str(f), float(b)) for f, b in self.entries if float(b) != 0.0)
        _check_unique([f for f, _ in entries], "coefficient feature")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_dense(cls, features: Sequence[str], beta: np.ndarray) -> "SparseCoefficients":
        return cls(tuple(zip(features, np.asarray(beta, dtype=float).tolist())))

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, float]) -> "SparseCoefficients":
        return cls(tuple(mapping.items()))

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(f for f, _ in self.entries)

    @property
    def values(self) -> np.ndarray:
        return np.array([b for _, b in self.entries], dtype=float)

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def l1_norm(self) -> float:
        return float(np.abs(self.values).sum())


@dataclass(frozen=True)
class FittedModel:
    coefficients: SparseCoefficients
    method: str
    stratum_level: str
    tuning: dict[str, float] = field(default_factory=dict)
    training_summary: dict[str, float] = field(default_factory=dict)
    seed: int | None = None
    # e.g. {"normalization": NormalizationReference, "combat_level": "batch"}
    preprocessing: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stratum_level not in LEVELS:
            raise ValueError(f"unknown stratum level {self.stratum_level!r}")


def risk_score(model: FittedModel | SparseCoefficients, expr: ExpressionMatrix) -> np.ndarray:
    """Linear predictor ``Z @ beta`` for every sample in ``expr``."""
    coefs = model.coefficients if isinstance(model, FittedModel) else model
    if len(coefs) == 0:
        return np.zeros(expr.n_samples)
    return expr.columns(coefs.features) @ coefs.values
