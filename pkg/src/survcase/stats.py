"""Censoring-aware survival statistics.

Provides Harrell's concordance index, Kaplan-Meier product-limit curves,
the two-group log-rank test with a closed-form 1-df chi-square tail, risk
score conversion, median risk splits, nearest-rank quartiles, and seeded
k-fold assignment. All functions are deterministic given their inputs.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .types import PipelineError, SurvivalLabel


class StatsError(PipelineError):
    pass


class NoComparablePairs(StatsError):
    """No usable pair exists for the concordance index."""


class NoEvents(StatsError):
    """The log-rank test needs at least one event across both groups."""


class NonPositiveTime(StatsError):
    """Risk score conversion needs a strictly positive time."""


class TooFewScores(StatsError):
    """Quartile thresholds need at least four scores."""


class TooFewCases(StatsError):
    """k-fold assignment needs at least k cases."""


class DegenerateSplit(StatsError):
    """A median split produced an empty group (constant risks)."""


def risk_score(predicted_months: float) -> float:
    """Convert predicted survival months to a risk score, -ln(months / 12).

    Twelve months maps to 0; shorter survival gives a larger (riskier)
    score. Raises NonPositiveTime for months <= 0.
    """
    if not math.isfinite(predicted_months) or predicted_months <= 0:
        raise NonPositiveTime(f"predicted months must be > 0, got {predicted_months}")
    return -math.log(predicted_months / 12.0)


def c_index(risks: Sequence[float], labels: Sequence[SurvivalLabel]) -> float:
    """Harrell's concordance index.

    A pair of cases is comparable when their observed times differ and the
    case with the shorter time had the event. Pairs with equal observed
    times are excluded entirely. A comparable pair is concordant when the
    shorter-lived case has the strictly higher risk; tied risks count 0.5.

    Raises NoComparablePairs when no comparable pair exists.
    """
    if len(risks) != len(labels):
        raise StatsError("risks and labels must have equal length")
    r = np.asarray(risks, dtype=np.float64)
    t = np.array([lab.time_months for lab in labels], dtype=np.float64)
    e = np.array([lab.event for lab in labels], dtype=bool)

    # For ordered pair (i, j): comparable iff t_i < t_j and case i had the event.
    shorter = t[:, None] < t[None, :]
    comparable = shorter & e[:, None]
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise NoComparablePairs("no comparable pair under the concordance rules")

    higher_risk = r[:, None] > r[None, :]
    tied_risk = r[:, None] == r[None, :]
    concordant = int((comparable & higher_risk).sum())
    ties = int((comparable & tied_risk).sum())
    return (concordant + 0.5 * ties) / n_comp


@dataclass(frozen=True)
class KmPoint:
    """One row of a product-limit curve at an observed time."""

    time: float
    at_risk: int
    deaths: int
    censored: int
    survival: float


@dataclass(frozen=True)
class KmCurve:
    """Product-limit curve over all distinct observed times.

    Survival starts implicitly at 1.0 before the first time and is
    non-increasing; times with censoring only appear as rows with an
    unchanged survival value.
    """

    points: tuple[KmPoint, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", tuple(self.points))

    @property
    def times(self) -> list[float]:
        return [p.time for p in self.points]

    @property
    def survival(self) -> list[float]:
        return [p.survival for p in self.points]

    @property
    def at_risk(self) -> list[int]:
        return [p.at_risk for p in self.points]

    @property
    def deaths(self) -> list[int]:
        return [p.deaths for p in self.points]


def km_curve(labels: Sequence[SurvivalLabel]) -> KmCurve:
    """Kaplan-Meier product-limit estimate.

    At each distinct event time t with d deaths out of n at risk the
    survival multiplies by (1 - d/n); censored subjects leave the risk set
    after their time. Input must be non-empty.
    """
    if not labels:
        raise StatsError("km_curve needs at least one observation")
    times = np.array([lab.time_months for lab in labels], dtype=np.float64)
    events = np.array([lab.event for lab in labels], dtype=bool)

    order = np.argsort(times, kind="stable")
    times, events = times[order], events[order]

    points: list[KmPoint] = []
    surv = 1.0
    at_risk = len(times)
    i = 0
    n = len(times)
    while i < n:
        t = times[i]
        j = i
        deaths = 0
        censored = 0
        while j < n and times[j] == t:
            if events[j]:
                deaths += 1
            else:
                censored += 1
            j += 1
        if deaths:
            surv *= 1.0 - deaths / at_risk
        points.append(
            KmPoint(time=float(t), at_risk=at_risk, deaths=deaths, censored=censored, survival=surv)
        )
        at_risk -= deaths + censored
        i = j
    return KmCurve(points=tuple(points))


@dataclass(frozen=True)
class LogRankResult:
    chi2: float
    p_value: float
    observed_a: float
    expected_a: float
    variance: float


def logrank_test(
    labels_a: Sequence[SurvivalLabel], labels_b: Sequence[SurvivalLabel]
) -> LogRankResult:
    """Two-group log-rank test.

    At each distinct pooled event time t with d deaths out of N at risk
    (N_A of them in group A), group A's expected deaths are d * N_A / N
    and the hypergeometric variance term is
    d * (N - d) * N_A * N_B / (N^2 * (N - 1)), taken as 0 when N == 1.
    chi2 = (O_A - E_A)^2 / sum(V), referred to a 1-df chi-square tail.
    A zero total variance yields (chi2=0, p=1). Raises NoEvents when
    neither group has any event.
    """
    if not labels_a or not labels_b:
        raise StatsError("both groups must be non-empty")

    ta = np.array([lab.time_months for lab in labels_a])
    ea = np.array([lab.event for lab in labels_a], dtype=bool)
    tb = np.array([lab.time_months for lab in labels_b])
    eb = np.array([lab.event for lab in labels_b], dtype=bool)

    event_times = np.unique(np.concatenate([ta[ea], tb[eb]]))
    if event_times.size == 0:
        raise NoEvents("log-rank needs at least one event")

    observed_a = 0.0
    expected_a = 0.0
    variance = 0.0
    for t in event_times:
        na = int((ta >= t).sum())
        nb = int((tb >= t).sum())
        n = na + nb
        if n == 0:
            continue
        da = int(((ta == t) & ea).sum())
        db = int(((tb == t) & eb).sum())
        d = da + db
        observed_a += da
        expected_a += d * na / n
        if n > 1:
            variance += d * (n - d) * na * nb / (n * n * (n - 1))

    if variance <= 0.0:
        return LogRankResult(
            chi2=0.0, p_value=1.0, observed_a=observed_a, expected_a=expected_a, variance=0.0
        )
    chi2 = (observed_a - expected_a) ** 2 / variance
    return LogRankResult(
        chi2=chi2,
        p_value=chi2_sf_1df(chi2),
        observed_a=observed_a,
        expected_a=expected_a,
        variance=variance,
    )


def chi2_sf_1df(x: float) -> float:
    """Survival function of the 1-df chi-square: P(X > x) = erfc(sqrt(x/2))."""
    if x < 0:
        raise StatsError(f"chi-square statistic must be >= 0, got {x}")
    return math.erfc(math.sqrt(x / 2.0))


def median_split(risks: Sequence[float]) -> tuple[list[int], list[int]]:
    """Split subject indices into (high, low) risk groups at the median.

    Scores strictly above the median go to the high group; the rest,
    including ties at the median, go low. Raises DegenerateSplit when
    either group ends up empty.
    """
    if len(risks) < 2:
        raise StatsError("median_split needs at least two scores")
    arr = np.asarray(risks, dtype=np.float64)
    med = float(np.median(arr))
    high = [i for i, v in enumerate(arr) if v > med]
    low = [i for i, v in enumerate(arr) if v <= med]
    if not high or not low:
        raise DegenerateSplit(f"median {med} does not separate the scores")
    return high, low


def quartiles(scores: Sequence[float]) -> tuple[float, float, float]:
    """Nearest-rank quartiles (q25, q50, q75) of a score population.

    q_p is the element at 1-based rank ceil(p * n) of the sorted scores.
    Requires at least four scores.
    """
    n = len(scores)
    if n < 4:
        raise TooFewScores(f"need >= 4 scores for quartiles, got {n}")
    ordered = sorted(float(s) for s in scores)

    def rank(p: float) -> float:
        return ordered[math.ceil(p * n) - 1]

    return rank(0.25), rank(0.50), rank(0.75)


def kfold(case_ids: Sequence[str], k: int, seed: int) -> list[list[str]]:
    """Deterministic k-fold assignment: seeded shuffle then round-robin.

    Ids are sorted before shuffling so the split depends only on the id
    set, k, and seed. Fold sizes differ by at most one.
    """
    ids = sorted(case_ids)
    if len(set(ids)) != len(ids):
        raise StatsError("case ids must be unique")
    if k < 2:
        raise StatsError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise TooFewCases(f"need >= {k} cases for {k}-fold, got {len(ids)}")
    rng = random.Random(seed)
    rng.shuffle(ids)
    return [ids[j::k] for j in range(k)]


def format_cindex_cell(values: Sequence[float]) -> str:
    """Format per-fold C-indexes as 'mean±std' with three decimals.

    Uses the population standard deviation of the fold values.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise StatsError("need at least one fold value")
    return f"{arr.mean():.3f}±{arr.std():.3f}"
