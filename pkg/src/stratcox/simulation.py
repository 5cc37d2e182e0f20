"""Scenario benchmark: virtual samples and arrays, signal elicitation,
permutation-based outcome simulation, sample-to-array assignment and the
replicate loop that scores every adjustment arm by test-set C-index.

A study (fixed by the master seed) owns the feature profile, handling
susceptibility, true signal and survival template.  Every replicate draws
fresh biology, handling effects and outcomes from its own spawned seed.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .combat import combat_adjust
from .concordance import harrell_c, stratified_c
from .core import (
    Dataset,
    ExpressionMatrix,
    FittedModel,
    SparseCoefficients,
    SurvivalRecord,
    risk_score,
)
from .cox import build_stratum_index, fit_newton
from .errors import OracleUndefined, StratCoxError, ValidationError
from .normalize import frozen_apply, median_normalize, quantile_normalize
from .penalized import fit_penalized, method_name
from .univariate import prefilter, select_by_pvalue_grid

logger = logging.getLogger(__name__)

SLIDE_SIZE = 8
BATCH_SIZE_RANGE = (32, 40)
TOTAL_L1 = 10.5
WEAK_VALUE = 0.35
N_MODERATE = 6
N_WEAK = 30
MODERATE_RANGE = (4 * 0.26, 4 * 0.78)

CORRELATIONS = ("none", "positive", "negative")
SIGNALS = ("moderate", "weak", "null")
METHODS = ("oracle", "lasso", "adaptive_lasso", "univariate")
CORE_ARMS = ("none", "batman_slide", "batman_batch", "combat_slide", "combat_batch")
NORMALIZATIONS = ("median", "quantile")
RESULT_COLUMNS = ("scenario", "signal", "adjustment", "model_method", "run", "c_index")
SUMMARY_COLUMNS = (
    "scenario", "signal", "adjustment", "model_method",
    "n_runs", "n_failed", "mean", "sd", "p2.5", "p97.5", "flagged",
)
FAILURE_COLUMNS = ("scenario", "signal", "adjustment", "model_method", "run", "error")
FAILURE_FLAG_RATE = 0.05


# --------------------------------------------------------------------------
# configuration and study-level profile


@dataclass(frozen=True)
class SimulationConfig:
    """Generator settings; defaults are the desk-scale benchmark."""

    n: int = 96
    n_features: int = 300
    block_size: int = 10
    rho: float = 0.5
    mean_range: tuple[float, float] = (6.0, 12.0)
    sd_range: tuple[float, float] = (0.8, 1.2)
    slides_per_batch: int = 4
    magnitude: float = 1.0
    # share of the batch shift carried by the severity-ordered loading
    severity_weight: float = 0.8
    # batch-level susceptibility: a few strongly affected features on a low base
    batch_base: float = 0.1
    batch_spike: float = 1.2
    spike_fraction: float = 0.03
    censoring: float = 0.23
    folds: int = 5
    moderate_min_mean: float = 9.0

    def __post_init__(self):
        if self.n < 2 or self.n % SLIDE_SIZE:
            raise ValidationError(f"n must be a positive multiple of {SLIDE_SIZE}, got {self.n}")
        if self.n_features < N_WEAK:
            raise ValidationError(f"need at least {N_WEAK} features, got {self.n_features}")
        if self.block_size < 1:
            raise ValidationError("block_size must be at least 1")
        if not 0.0 <= self.rho < 1.0:
            raise ValidationError(f"rho must lie in [0, 1), got {self.rho}")
        if self.magnitude < 0:
            raise ValidationError("magnitude must be non-negative")
        if not 0.0 <= self.severity_weight <= 1.0:
            raise ValidationError("severity_weight must lie in [0, 1]")
        if self.batch_base < 0 or self.batch_spike < 0 or not 0.0 <= self.spike_fraction <= 1.0:
            raise ValidationError("batch susceptibility settings must be non-negative, spike_fraction in [0, 1]")
        if not 0.0 <= self.censoring < 1.0:
            raise ValidationError("censoring must lie in [0, 1)")
        lo, hi = self.mean_range
        if hi < lo:
            raise ValidationError("mean_range must be increasing")


@dataclass(frozen=True)
class ArrayLayout:
    """Arrays grouped into slides of eight and slides grouped into batches.

    Array order is the severity order: batch index first, then slide, then
    position on the slide.
    """

    slide_of: tuple[str, ...]
    batch_of: tuple[str, ...]

    def __post_init__(self):
        if len(self.slide_of) != len(self.batch_of):
            raise ValidationError("slide and batch labels differ in length")
        slides, counts = np.unique(np.array(self.slide_of), return_counts=True)
        if np.any(counts != SLIDE_SIZE):
            raise ValidationError(f"every slide must hold {SLIDE_SIZE} arrays")
        owner: dict[str, str] = {}
        for s, b in zip(self.slide_of, self.batch_of):
            if owner.setdefault(s, b) != b:
                raise ValidationError(f"slide {s!r} spans batches")
        _, bsize = np.unique(np.array(self.batch_of), return_counts=True)
        lo, hi = BATCH_SIZE_RANGE
        if len(bsize) > 1 and (bsize.min() < lo or bsize.max() > hi):
            raise ValidationError(f"batch sizes must lie in [{lo}, {hi}], got {sorted(bsize.tolist())}")

    @classmethod
    def regular(cls, n_arrays: int = 96, slides_per_batch: int = 4) -> "ArrayLayout":
        if n_arrays % SLIDE_SIZE:
            raise ValidationError(f"array count must be a multiple of {SLIDE_SIZE}")
        n_slides = n_arrays // SLIDE_SIZE
        width = len(str(n_slides))
        slide_idx = np.repeat(np.arange(n_slides), SLIDE_SIZE)
        batch_idx = slide_idx // slides_per_batch
        # a short trailing batch joins the previous one
        n_batches = max(1, n_slides // slides_per_batch)
        batch_idx = np.minimum(batch_idx, n_batches - 1)
        return cls(
            tuple(f"s{i + 1:0{width}d}" for i in slide_idx),
            tuple(f"b{i + 1}" for i in batch_idx),
        )

    @property
    def n_arrays(self) -> int:
        return len(self.slide_of)

    @property
    def slides(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.slide_of))

    @property
    def batches(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.batch_of))

    def batch_index(self) -> np.ndarray:
        lookup = {b: i for i, b in enumerate(self.batches)}
        return np.array([lookup[b] for b in self.batch_of])

    def slide_index(self) -> np.ndarray:
        lookup = {s: i for i, s in enumerate(self.slides)}
        return np.array([lookup[s] for s in self.slide_of])


@dataclass(frozen=True)
class StudyProfile:
    """Quantities held fixed across replicates of one study."""

    feature_ids: tuple[str, ...]
    means: np.ndarray
    sds: np.ndarray
    susceptibility: np.ndarray   # per-feature scale of the batch shift
    loading: np.ndarray          # per-feature direction of the severity drift
    template: tuple[np.ndarray, np.ndarray]   # (times, events)


def survival_template(n: int, censoring: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Exponential follow-up times with round(censoring * n) censored records."""
    times = np.round(rng.exponential(24.0, size=n), 6) + 0.5
    events = np.ones(n, dtype=int)
    events[rng.choice(n, size=int(round(censoring * n)), replace=False)] = 0
    return times, events


def make_profile(config: SimulationConfig, rng: np.random.Generator) -> StudyProfile:
    G = config.n_features
    width = len(str(G))
    feature_ids = tuple(f"f{j + 1:0{width}d}" for j in range(G))
    means = rng.uniform(*config.mean_range, size=G)
    sds = rng.uniform(*config.sd_range, size=G)
    susceptibility = np.full(G, config.batch_base)
    spikes = rng.choice(G, size=int(round(config.spike_fraction * G)), replace=False)
    susceptibility[spikes] = config.batch_spike
    loading = rng.standard_normal(G)
    template = survival_template(config.n, config.censoring, rng)
    return StudyProfile(feature_ids, means, sds, susceptibility, loading, template)


# --------------------------------------------------------------------------
# biology and handling effects


def gen_virtual_samples(
    config: SimulationConfig,
    rng: np.random.Generator,
    profile: StudyProfile | None = None,
) -> ExpressionMatrix:
    """Block-correlated Gaussian biology: features in consecutive blocks share
    a factor with loading sqrt(rho)."""
    if profile is None:
        profile = make_profile(config, rng)
    n, G = config.n, config.n_features
    n_blocks = -(-G // config.block_size)
    block_of = np.arange(G) // config.block_size
    factors = rng.standard_normal((n, n_blocks))[:, block_of]
    noise = rng.standard_normal((n, G))
    z = np.sqrt(config.rho) * factors + np.sqrt(1.0 - config.rho) * noise
    values = profile.means + profile.sds * z
    width = len(str(n))
    return ExpressionMatrix(values, tuple(f"v{i + 1:0{width}d}" for i in range(n)), profile.feature_ids)


@dataclass(frozen=True)
class HandlingEffects:
    batch: np.ndarray    # arrays x G, constant within a batch
    slide: np.ndarray    # arrays x G, constant within a slide
    noise: np.ndarray    # arrays x G

    @property
    def total(self) -> np.ndarray:
        return self.batch + self.slide + self.noise


def gen_handling_effects(
    layout: ArrayLayout,
    magnitude: float,
    rng: np.random.Generator,
    *,
    susceptibility: np.ndarray | None = None,
    loading: np.ndarray | None = None,
    severity_weight: float = 0.8,
    n_features: int | None = None,
) -> HandlingEffects:
    """Additive per-array effects: batch shift + slide shift + array noise.

    Batch shifts mix a rank-one drift, ``severity_b * loading_g`` with
    severity increasing in batch index, with independent mean-zero draws, and
    are scaled per feature by ``magnitude * susceptibility``.  Slide shifts
    have standard deviation ``magnitude / 2`` and array noise ``magnitude / 4``
    on every feature.
    """
    if magnitude < 0:
        raise ValidationError("magnitude must be non-negative")
    if n_features is None:
        n_features = len(susceptibility) if susceptibility is not None else len(loading)
    G = n_features
    u = np.ones(G) if susceptibility is None else np.asarray(susceptibility, dtype=float)
    ell = rng.standard_normal(G) if loading is None else np.asarray(loading, dtype=float)
    b_idx, s_idx = layout.batch_index(), layout.slide_index()
    B, S = len(layout.batches), len(layout.slides)
    # centred, unit-variance severity scores in batch order
    sev = np.linspace(-1.0, 1.0, B) if B > 1 else np.zeros(1)
    if B > 1:
        sev = sev / np.sqrt(np.mean(sev ** 2))
    w = np.sqrt(severity_weight)
    batch_shift = w * np.outer(sev, ell) + np.sqrt(1.0 - severity_weight) * rng.standard_normal((B, G))
    slide_shift = rng.standard_normal((S, G))
    noise = rng.standard_normal((layout.n_arrays, G))
    return HandlingEffects(
        batch_shift[b_idx] * (magnitude * u),
        slide_shift[s_idx] * (magnitude / 2.0),
        noise * (magnitude / 4.0),
    )


# --------------------------------------------------------------------------
# signal and outcomes


@dataclass(frozen=True)
class SignalSpec:
    kind: str
    coefficients: SparseCoefficients

    def __post_init__(self):
        if self.kind not in SIGNALS:
            raise ValidationError(f"unknown signal {self.kind!r}; expected one of {SIGNALS}")


def make_signal(
    kind: str,
    feature_ids: Sequence[str],
    rng: np.random.Generator,
    candidates: Sequence[str] | None = None,
) -> SignalSpec:
    """True coefficients.  Moderate: six positive effects drawn in
    [1.04, 3.12] and rescaled to the common L1 norm; weak: thirty features at
    0.35; null: none.  ``candidates`` restricts the moderate draw."""
    if kind not in SIGNALS:
        raise ValidationError(f"unknown signal {kind!r}; expected one of {SIGNALS}")
    feature_ids = list(feature_ids)
    if len(feature_ids) < N_WEAK:
        raise ValidationError(f"signal elicitation needs at least {N_WEAK} features")
    if kind == "null":
        return SignalSpec(kind, SparseCoefficients())
    if kind == "weak":
        chosen = rng.choice(len(feature_ids), size=N_WEAK, replace=False)
        chosen.sort()
        return SignalSpec(kind, SparseCoefficients.from_dense([feature_ids[j] for j in chosen], np.full(N_WEAK, WEAK_VALUE)))
    pool = list(candidates) if candidates is not None else feature_ids
    if len(pool) < N_MODERATE:
        pool = feature_ids
    chosen = sorted(rng.choice(len(pool), size=N_MODERATE, replace=False))
    beta = rng.uniform(*MODERATE_RANGE, size=N_MODERATE)
    beta *= TOTAL_L1 / beta.sum()
    return SignalSpec(kind, SparseCoefficients.from_dense([pool[j] for j in chosen], beta))


def simulate_outcomes(
    X: ExpressionMatrix,
    signal: SignalSpec | SparseCoefficients,
    template: tuple[Sequence[float], Sequence[int]] | Sequence[SurvivalRecord],
    rng: np.random.Generator,
) -> list[SurvivalRecord]:
    """Pair template records with samples, earliest time first.

    An event time goes to an unpaired sample drawn with probability
    proportional to exp(x' beta); a censored time goes to a uniformly drawn
    unpaired sample.  The outcome multiset equals the template exactly.
    """
    times, events = _template_arrays(template)
    n = X.n_samples
    if len(times) != n:
        raise ValidationError(f"template has {len(times)} records for {n} samples")
    coefs = signal.coefficients if isinstance(signal, SignalSpec) else signal
    eta = risk_score(coefs, X)
    order = np.argsort(times, kind="stable")
    free = np.ones(n, dtype=bool)
    out_t = np.empty(n)
    out_e = np.empty(n, dtype=int)
    for k in order:
        pool = np.flatnonzero(free)
        if events[k] == 1:
            weights = np.exp(eta[pool] - eta[pool].max())
            i = pool[rng.choice(len(pool), p=weights / weights.sum())]
        else:
            i = pool[rng.integers(len(pool))]
        free[i] = False
        out_t[i] = times[k]
        out_e[i] = events[k]
    return [SurvivalRecord(float(t), int(e)) for t, e in zip(out_t, out_e)]


def _template_arrays(template) -> tuple[np.ndarray, np.ndarray]:
    if len(template) and isinstance(template[0], SurvivalRecord):
        return (np.array([r.time for r in template], dtype=float),
                np.array([r.event for r in template], dtype=int))
    times, events = template
    return np.asarray(times, dtype=float), np.asarray(events, dtype=int)


ASSIGNMENT_MODES = ("random", "sorted_pos", "sorted_neg")


def assign_to_arrays(
    X: ExpressionMatrix,
    survival: Sequence[SurvivalRecord],
    W: np.ndarray | HandlingEffects | None,
    layout: ArrayLayout,
    mode: str,
    rng: np.random.Generator,
) -> Dataset:
    """Place samples on arrays and add the arrays' handling effects.

    ``sorted_pos`` puts the shortest times on the least severe arrays,
    ``sorted_neg`` the longest.  Rows of the result follow array order.
    """
    if mode not in ASSIGNMENT_MODES:
        raise ValidationError(f"unknown assignment mode {mode!r}; expected one of {ASSIGNMENT_MODES}")
    n = X.n_samples
    if n != layout.n_arrays or len(survival) != n:
        raise ValidationError(f"{n} samples cannot fill {layout.n_arrays} arrays")
    if isinstance(W, HandlingEffects):
        W = W.total
    W = np.zeros((n, X.n_features)) if W is None else np.asarray(W, dtype=float)
    if W.shape != (n, X.n_features):
        raise ValidationError(f"handling effects have shape {W.shape}, expected {(n, X.n_features)}")
    times = np.array([r.time for r in survival])
    events = np.array([r.event for r in survival], dtype=int)
    if mode == "random":
        sample_on = rng.permutation(n)
    else:
        # random tie-break keeps equal times exchangeable
        jitter = rng.permutation(n)
        key = times if mode == "sorted_pos" else -times
        sample_on = np.lexsort((jitter, key))
    expr = ExpressionMatrix(
        X.values[sample_on] + W,
        tuple(X.sample_ids[i] for i in sample_on),
        X.feature_ids,
    )
    return Dataset(
        expr,
        times[sample_on],
        events[sample_on],
        np.array(layout.batch_of, dtype=object),
        np.array(layout.slide_of, dtype=object),
    )


# --------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    train_batch_effects: bool
    test_batch_effects: bool
    train_correlation: str
    test_correlation: str

    def __post_init__(self):
        key = (self.train_batch_effects, self.test_batch_effects, self.train_correlation, self.test_correlation)
        if SCENARIO_TABLE.get(self.name) != key:
            raise ValidationError(
                f"{self.name!r} with {key} is not one of the scenarios: {', '.join(SCENARIO_TABLE)}"
            )

    @classmethod
    def from_name(cls, name: str) -> "ScenarioSpec":
        if name not in SCENARIO_TABLE:
            raise ValidationError(f"unknown scenario {name!r}; valid names: {', '.join(SCENARIO_TABLE)}")
        return cls(name, *SCENARIO_TABLE[name])

    @property
    def train_mode(self) -> str:
        return _MODE[self.train_correlation]

    @property
    def test_mode(self) -> str:
        return _MODE[self.test_correlation]


SCENARIO_TABLE: dict[str, tuple[bool, bool, str, str]] = {
    "BE00Cor00": (False, False, "none", "none"),
    "BE10Cor00": (True, False, "none", "none"),
    "BE10Cor10": (True, False, "positive", "none"),
    "BE11Cor00": (True, True, "none", "none"),
    "BE11Cor10": (True, True, "positive", "none"),
    "BE11Cor01": (True, True, "none", "positive"),
    "BE11Cor11": (True, True, "positive", "positive"),
    "BE11Cor1-1": (True, True, "positive", "negative"),
}
SCENARIOS = tuple(SCENARIO_TABLE)
_MODE = {"none": "random", "positive": "sorted_pos", "negative": "sorted_neg"}


@dataclass(frozen=True)
class Arm:
    """An adjustment strategy: optional normalization, then one core arm."""

    name: str
    normalization: str | None
    core: str

    @classmethod
    def parse(cls, name: str) -> "Arm":
        parts = name.split("+")
        norm = None
        if len(parts) == 2 and parts[0] in NORMALIZATIONS:
            norm, core = parts
        elif len(parts) == 1 and parts[0] in NORMALIZATIONS:
            norm, core = parts[0], "none"
        elif len(parts) == 1:
            core = parts[0]
        else:
            core = ""
        if core not in CORE_ARMS:
            raise ValidationError(
                f"unknown adjustment {name!r}; use one of {CORE_ARMS + NORMALIZATIONS}"
                " optionally prefixed by a normalization, e.g. median+batman_slide"
            )
        return cls(name, norm, core)

    @property
    def level(self) -> str:
        """Stratification level of the Cox fit and of test-set evaluation."""
        return self.core.split("_")[1] if self.core.startswith("batman_") else "none"

    def prepare(self, train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
        """Adjust training and test data; their statistics never mix except
        through the frozen normalization reference."""
        if self.normalization == "median":
            tr_expr, ref = median_normalize(train.expr)
            train, test = train.with_expr(tr_expr), test.with_expr(frozen_apply(test.expr, ref))
        elif self.normalization == "quantile":
            tr_expr, ref = quantile_normalize(train.expr)
            train, test = train.with_expr(tr_expr), test.with_expr(frozen_apply(test.expr, ref))
        if self.core.startswith("combat_"):
            level = self.core.split("_")[1]
            train = train.with_expr(combat_adjust(train.expr, train, level))
            test = test.with_expr(combat_adjust(test.expr, test, level))
        return train, test


DEFAULT_ARMS = ("batman_slide", "batman_batch", "combat_slide", "combat_batch", "median", "quantile")


def oracle_fit(dataset: Dataset, signal: SignalSpec, level: str) -> FittedModel:
    """Unpenalized (stratified) Cox fit on exactly the true features."""
    features = signal.coefficients.features
    if not features:
        raise OracleUndefined("the oracle method is undefined for a null signal")
    fit = fit_newton(build_stratum_index(dataset, level), dataset.expr.columns(features), features)
    return FittedModel(
        SparseCoefficients.from_dense(features, fit.coefficients),
        method_name(level, "oracle"),
        level,
        training_summary={"loglik": fit.loglik, "aic": fit.aic, "n_selected": float(len(features))},
    )


def fit_method(method: str, train: Dataset, level: str, signal: SignalSpec,
               rng: np.random.Generator, folds: int = 5) -> FittedModel:
    if method == "oracle":
        return oracle_fit(train, signal, level)
    strata = None if level == "none" else train.strata(level)
    features = prefilter(train.expr, strata=strata)
    if not features:
        return FittedModel(SparseCoefficients(), method_name(level, method), level)
    if method == "univariate":
        return select_by_pvalue_grid(train, level, features)
    if method in ("lasso", "adaptive_lasso"):
        return fit_penalized(train, level, method, rng, features=features, folds=folds)
    raise ValidationError(f"unknown model method {method!r}; expected one of {METHODS}")


def evaluate(model: FittedModel, test: Dataset) -> float:
    """Stratified C on the test set's own labels for stratified models,
    pooled Harrell C otherwise."""
    score = risk_score(model, test.expr)
    if model.stratum_level == "none":
        return harrell_c(score, test.time, test.event).c
    return stratified_c(score, test.time, test.strata(model.stratum_level), test.event).c


# --------------------------------------------------------------------------
# replicate loop


@dataclass(frozen=True)
class RunTask:
    scenario: ScenarioSpec
    signal: SignalSpec
    profile: StudyProfile
    config: SimulationConfig
    arms: tuple[Arm, ...]
    methods: tuple[str, ...]
    run: int
    seed: np.random.SeedSequence
    # extra constant per training batch, used by the invariance check
    train_batch_offset: np.ndarray | None = None


@dataclass
class RunOutcome:
    run: int
    c_index: dict[tuple[str, str], float] = field(default_factory=dict)
    errors: dict[tuple[str, str], str] = field(default_factory=dict)


def simulate_run_data(task: RunTask) -> tuple[Dataset, Dataset, np.random.Generator]:
    """Training and test datasets of one replicate, plus the generator that
    the model fits continue from."""
    cfg, prof, sc = task.config, task.profile, task.scenario
    rng = np.random.default_rng(task.seed)
    X = gen_virtual_samples(cfg, rng, prof)
    y_train = simulate_outcomes(X, task.signal, prof.template, rng)
    y_test = simulate_outcomes(X, task.signal, prof.template, rng)
    layout = ArrayLayout.regular(cfg.n, cfg.slides_per_batch)
    datasets = []
    for y, on, mode in ((y_train, sc.train_batch_effects, sc.train_mode),
                        (y_test, sc.test_batch_effects, sc.test_mode)):
        he = gen_handling_effects(
            layout, cfg.magnitude, rng,
            susceptibility=prof.susceptibility, loading=prof.loading,
            severity_weight=cfg.severity_weight,
        )
        W = he.total if on else None
        datasets.append(assign_to_arrays(X, y, W, layout, mode, rng))
    train, test = datasets
    if task.train_batch_offset is not None:
        offs = np.asarray(task.train_batch_offset, dtype=float)
        idx = layout.batch_index()
        train = train.with_expr(train.expr.with_values(train.expr.values + offs[idx][:, None]))
    return train, test, rng


def execute_run(task: RunTask) -> RunOutcome:
    out = RunOutcome(task.run)
    train, test, _ = simulate_run_data(task)
    for arm in task.arms:
        try:
            tr, te = arm.prepare(train, test)
        except StratCoxError as exc:
            for m in task.methods:
                out.errors[(arm.name, m)] = f"{type(exc).__name__}: {exc}"
            continue
        for m in task.methods:
            # every (arm, method) cell gets its own stream so adding arms
            # does not perturb the others
            cell_rng = np.random.default_rng([*task.seed.generate_state(4), _cell_key(arm.name, m)])
            try:
                model = fit_method(m, tr, arm.level, task.signal, cell_rng, task.config.folds)
                out.c_index[(arm.name, m)] = evaluate(model, te)
            except StratCoxError as exc:
                out.errors[(arm.name, m)] = f"{type(exc).__name__}: {exc}"
    return out


def _cell_key(arm: str, method: str) -> int:
    # stable across processes, unlike hash()
    return int.from_bytes(f"{arm}|{method}".encode(), "little") % (2 ** 32)


@dataclass
class ScenarioResults:
    scenario: str
    signal: str
    arms: tuple[str, ...]
    methods: tuple[str, ...]
    runs: list[RunOutcome]

    def rows(self) -> list[tuple]:
        """Per-run C-index rows; failed cells are left out (see failures)."""
        out = []
        for r in self.runs:
            for a in self.arms:
                for m in self.methods:
                    if (a, m) in r.c_index:
                        out.append((self.scenario, self.signal, a, m, r.run, r.c_index[(a, m)]))
        return out

    def failures(self) -> list[tuple]:
        out = []
        for r in self.runs:
            for a in self.arms:
                for m in self.methods:
                    if (a, m) in r.errors:
                        out.append((self.scenario, self.signal, a, m, r.run, r.errors[(a, m)]))
        return out

    def values(self, arm: str, method: str) -> np.ndarray:
        return np.array([r.c_index[(arm, method)] for r in self.runs if (arm, method) in r.c_index])

    def summary(self) -> list[dict]:
        out = []
        n_runs = len(self.runs)
        for a in self.arms:
            for m in self.methods:
                v = self.values(a, m)
                n_failed = n_runs - len(v)
                row = {
                    "scenario": self.scenario, "signal": self.signal,
                    "adjustment": a, "model_method": m,
                    "n_runs": n_runs, "n_failed": n_failed,
                    "mean": float(v.mean()) if len(v) else float("nan"),
                    "sd": float(v.std(ddof=1)) if len(v) > 1 else float("nan"),
                    "p2.5": float(np.percentile(v, 2.5)) if len(v) else float("nan"),
                    "p97.5": float(np.percentile(v, 97.5)) if len(v) else float("nan"),
                    "flagged": int(n_runs > 0 and n_failed / n_runs > FAILURE_FLAG_RATE),
                }
                out.append(row)
        return out


def study(config: SimulationConfig, signal_kind: str, seed: int) -> tuple[StudyProfile, SignalSpec]:
    """Study-level profile and true signal fixed by the master seed.

    The signal stream is separate from the profile stream so that the
    moderate, weak and null studies share one profile.
    """
    root = np.random.SeedSequence(seed)
    prof_seq, sig_seq = root.spawn(2)
    profile = make_profile(config, np.random.default_rng(prof_seq))
    abundant = [f for f, mu in zip(profile.feature_ids, profile.means) if mu >= config.moderate_min_mean]
    signal = make_signal(signal_kind, profile.feature_ids, np.random.default_rng(sig_seq), candidates=abundant)
    return profile, signal


def run_seeds(seed: int, n_runs: int) -> list[np.random.SeedSequence]:
    # third child of the master seed, after profile and signal
    return np.random.SeedSequence(seed).spawn(3)[2].spawn(n_runs)


def run_scenario(
    scenario: ScenarioSpec | str,
    signal: str,
    adjustments: Sequence[str] = DEFAULT_ARMS,
    model_methods: Sequence[str] = ("lasso",),
    n_runs: int = 100,
    seed: int = 0,
    config: SimulationConfig | None = None,
    jobs: int = 1,
    train_batch_offset: Sequence[float] | None = None,
) -> ScenarioResults:
    """Replicate the scenario ``n_runs`` times and score every arm x method.

    Individual failures are recorded per cell and never abort the run.
    """
    config = config or SimulationConfig()
    spec = scenario if isinstance(scenario, ScenarioSpec) else ScenarioSpec.from_name(scenario)
    arms = tuple(Arm.parse(a) for a in adjustments)
    methods = tuple(model_methods)
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown model method {m!r}; expected one of {METHODS}")
    if signal == "null" and "oracle" in methods:
        raise OracleUndefined("the oracle method is undefined for a null signal")
    if n_runs < 1:
        raise ValidationError("n_runs must be at least 1")
    profile, sig = study(config, signal, seed)
    offset = None if train_batch_offset is None else np.asarray(train_batch_offset, dtype=float)
    tasks = [
        RunTask(spec, sig, profile, config, arms, methods, r, s, offset)
        for r, s in enumerate(run_seeds(seed, n_runs))
    ]
    if jobs > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(execute_run, tasks, chunksize=max(1, n_runs // (4 * jobs))))
    else:
        outcomes = [execute_run(t) for t in tasks]
    return ScenarioResults(spec.name, signal, tuple(a.name for a in arms), methods, outcomes)
