"""Harrell's concordance index, pooled and stratified."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import SurvivalRecord
from .errors import NoComparablePairs, ValidationError

_CHUNK = 2048


@dataclass(frozen=True)
class Concordance:
    """Pair counts behind a C-index; ``c`` is computed from the integers."""

    comparable: int
    concordant: int
    tied: int
    by_stratum: dict[str, "Concordance"] = field(default_factory=dict, compare=False)

    @property
    def c(self) -> float:
        if self.comparable == 0:
            raise NoComparablePairs("no comparable pairs")
        return (2 * self.concordant + self.tied) / (2 * self.comparable)

    def __float__(self) -> float:
        return self.c


def _unpack(survival, event=None) -> tuple[np.ndarray, np.ndarray]:
    if event is not None:
        return np.asarray(survival, dtype=float), np.asarray(event, dtype=int)
    if len(survival) and isinstance(survival[0], SurvivalRecord):
        return (np.array([r.time for r in survival], dtype=float),
                np.array([r.event for r in survival], dtype=int))
    arr = np.asarray(survival, dtype=float)
    return arr[:, 0], arr[:, 1].astype(int)


def _counts(score: np.ndarray, time: np.ndarray, event: np.ndarray) -> tuple[int, int, int]:
    # pair (i, j) is comparable when time_i < time_j and i had the event
    comp = conc = tie = 0
    rows = np.flatnonzero(event == 1)
    for start in range(0, len(rows), _CHUNK):
        r = rows[start:start + _CHUNK]
        later = time[None, :] > time[r, None]
        s_i = score[r, None]
        comp += int(later.sum())
        conc += int((later & (s_i > score[None, :])).sum())
        tie += int((later & (s_i == score[None, :])).sum())
    return comp, conc, tie


def _check(score, time, event):
    if not (len(score) == len(time) == len(event)):
        raise ValidationError("scores and survival records differ in length")
    if len(score) < 2:
        raise ValidationError("a C-index needs at least two samples")


def harrell_c(scores, survival, event=None) -> Concordance:
    """Higher scores are read as higher risk (shorter survival).

    ``survival`` is a sequence of SurvivalRecord, an (n, 2) array of
    (time, event), or a time vector with ``event`` given separately.
    """
    score = np.asarray(scores, dtype=float)
    time, ev = _unpack(survival, event)
    _check(score, time, ev)
    comp, conc, tie = _counts(score, time, ev)
    if comp == 0:
        raise NoComparablePairs("no comparable pairs: need an event followed by a later follow-up time")
    return Concordance(comp, conc, tie)


def stratified_c(scores, survival, strata, event=None) -> Concordance:
    """Within-stratum pairs only, pooled over strata.

    Pooling the integer counts equals the comparable-pair-weighted mean of
    the per-stratum C-indices; strata without comparable pairs drop out.
    """
    score = np.asarray(scores, dtype=float)
    time, ev = _unpack(survival, event)
    _check(score, time, ev)
    strata = np.asarray(strata, dtype=object)
    if len(strata) != len(score):
        raise ValidationError("strata labels differ in length from the scores")
    parts = {}
    for lab in sorted({str(s) for s in strata}):
        rows = np.flatnonzero(np.array([str(s) == lab for s in strata]))
        comp, conc, tie = _counts(score[rows], time[rows], ev[rows])
        parts[lab] = Concordance(comp, conc, tie)
    total = [sum(getattr(p, k) for p in parts.values()) for k in ("comparable", "concordant", "tied")]
    if total[0] == 0:
        raise NoComparablePairs("no stratum has a comparable pair")
    return Concordance(*total, by_stratum=parts)
