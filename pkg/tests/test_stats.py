"""Unit and property tests for the survival statistics module."""

from __future__ import annotations

import math
import random

import numpy as np
import pytest

from survcase.stats import (
    DegenerateSplit,
    NoComparablePairs,
    NoEvents,
    NonPositiveTime,
    StatsError,
    TooFewCases,
    TooFewScores,
    c_index,
    chi2_sf_1df,
    format_cindex_cell,
    kfold,
    km_curve,
    logrank_test,
    median_split,
    quartiles,
    risk_score,
)
from survcase.types import SurvivalLabel

from oracles import c_index_brute, chi2_sf_1df_gamma, nearest_rank_quartiles


def labels(times, events):
    return [SurvivalLabel(float(t), bool(e)) for t, e in zip(times, events)]


# ---------------------------------------------------------------- c-index


def test_c_index_perfect_concordance():
    assert c_index([3, 2, 1], labels([1, 2, 3], [1, 1, 1])) == 1.0


def test_c_index_perfect_discordance():
    assert c_index([1, 2, 3], labels([1, 2, 3], [1, 1, 1])) == 0.0


def test_c_index_worked_example():
    # Four comparable pairs, one discordant.
    got = c_index([1.0, 2.0, 1.5, 1.2], labels([10, 5, 8, 20], [1, 1, 0, 1]))
    assert got == pytest.approx(0.75, abs=0)


def test_c_index_equal_times_excluded():
    # Both cases share time 5; no comparable pair remains.
    with pytest.raises(NoComparablePairs):
        c_index([1.0, 2.0], labels([5, 5], [1, 1]))


def test_c_index_all_censored_raises():
    with pytest.raises(NoComparablePairs):
        c_index([1, 2, 3], labels([1, 2, 3], [0, 0, 0]))


def test_c_index_matches_brute_force_small():
    rng = random.Random(101)
    for _ in range(300):
        n = rng.randint(2, 12)
        times = [rng.choice([1.0, 2.0, 3.0, 5.0, 8.0, 13.0]) for _ in range(n)]
        events = [rng.random() > 0.3 for _ in range(n)]
        risks = [rng.choice([0.1, 0.5, 0.5, 1.0, 2.0]) for _ in range(n)]
        expected = c_index_brute(risks, times, events)
        if expected is None:
            with pytest.raises(NoComparablePairs):
                c_index(risks, labels(times, events))
        else:
            assert c_index(risks, labels(times, events)) == expected


def test_c_index_complement_identity():
    rng = random.Random(7)
    for _ in range(50):
        n = rng.randint(3, 10)
        times = rng.sample(range(1, 100), n)
        events = [rng.random() > 0.3 for _ in range(n)]
        risks = rng.sample(range(1000), n)  # no ties
        labs = labels(times, events)
        try:
            c = c_index(risks, labs)
        except NoComparablePairs:
            continue
        assert c + c_index([-r for r in risks], labs) == pytest.approx(1.0)


def test_c_index_random_risks_near_half():
    rng = np.random.default_rng(5)
    hits = 0
    for _ in range(50):
        risks = rng.normal(size=1000)
        times = rng.uniform(1, 100, size=1000)
        c = c_index(risks.tolist(), labels(times, [1] * 1000))
        if 0.45 <= c <= 0.55:
            hits += 1
    assert hits >= 49


# ---------------------------------------------------------------- KM


def test_km_worked_example():
    curve = km_curve(labels([1, 2, 3, 4, 5], [1, 1, 0, 1, 1]))
    assert curve.times == [1, 2, 3, 4, 5]
    assert curve.survival == pytest.approx([0.8, 0.6, 0.6, 0.3, 0.0], abs=1e-12)
    assert curve.at_risk == [5, 4, 3, 2, 1]
    assert curve.deaths == [1, 1, 0, 1, 1]


def test_km_all_censored():
    curve = km_curve(labels([1, 2, 3], [0, 0, 0]))
    assert all(s == 1.0 for s in curve.survival)


def test_km_single_event():
    curve = km_curve(labels([2], [1]))
    assert curve.survival == [0.0]


def test_km_matches_direct_product_recomputation():
    rng = random.Random(42)
    for _ in range(100):
        n = rng.randint(1, 30)
        times = [rng.choice(range(1, 15)) for _ in range(n)]
        events = [rng.random() > 0.3 for _ in range(n)]
        curve = km_curve(labels(times, events))
        # Direct recomputation at each curve row.
        surv = 1.0
        for point in curve.points:
            at_risk = sum(1 for t in times if t >= point.time)
            deaths = sum(1 for t, e in zip(times, events) if t == point.time and e)
            assert point.at_risk == at_risk
            assert point.deaths == deaths
            if deaths:
                surv *= 1 - deaths / at_risk
            assert point.survival == pytest.approx(surv, abs=1e-12)
        # Non-increasing.
        s = curve.survival
        assert all(a >= b - 1e-15 for a, b in zip(s, s[1:]))


# ---------------------------------------------------------------- log-rank


def test_logrank_worked_example():
    res = logrank_test(labels([1, 2], [1, 1]), labels([3, 4], [1, 1]))
    assert res.observed_a == pytest.approx(2.0)
    assert res.expected_a == pytest.approx(5 / 6)
    assert res.variance == pytest.approx(17 / 36)
    assert res.chi2 == pytest.approx(2.882, abs=1e-3)
    assert res.p_value == pytest.approx(0.0896, abs=1e-3)


def test_logrank_identical_groups():
    labs = labels([1, 2, 3], [1, 1, 0])
    res = logrank_test(labs, labs)
    assert res.chi2 == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0)


def test_logrank_group_symmetry():
    a = labels([1, 2, 7], [1, 1, 0])
    b = labels([3, 4, 9], [1, 1, 1])
    r1 = logrank_test(a, b)
    r2 = logrank_test(b, a)
    assert r1.chi2 == pytest.approx(r2.chi2, abs=1e-12)
    assert r1.p_value == pytest.approx(r2.p_value, abs=1e-12)


def test_logrank_no_events_raises():
    with pytest.raises(NoEvents):
        logrank_test(labels([1, 2], [0, 0]), labels([3], [0]))


def test_logrank_late_censored_subject_only_shifts_risk_sets():
    # A censored subject with time beyond all events joins every risk set;
    # recompute the O/E/V table by hand for both variants.
    a = labels([2, 5], [1, 1])
    b = labels([3, 8], [1, 0])
    base = logrank_test(a, b)
    extended = logrank_test(a + [SurvivalLabel(100.0, False)], b)

    def table(ta, ea, tb, eb):
        o = e = v = 0.0
        for t in sorted({t for t, ev in zip(ta + tb, ea + eb) if ev}):
            na = sum(1 for x in ta if x >= t)
            nb = sum(1 for x in tb if x >= t)
            n = na + nb
            d = sum(1 for x, ev in zip(ta, ea) if x == t and ev) + sum(
                1 for x, ev in zip(tb, eb) if x == t and ev
            )
            o += sum(1 for x, ev in zip(ta, ea) if x == t and ev)
            e += d * na / n
            if n > 1:
                v += d * (n - d) * na * nb / (n * n * (n - 1))
        return o, e, v

    o, e, v = table([2, 5, 100], [True, True, False], [3, 8], [True, False])
    assert extended.observed_a == pytest.approx(o)
    assert extended.expected_a == pytest.approx(e)
    assert extended.variance == pytest.approx(v)
    assert extended.chi2 != pytest.approx(base.chi2)


# ---------------------------------------------------------------- chi2 tail


def test_chi2_sf_endpoints():
    assert chi2_sf_1df(0.0) == 1.0
    assert chi2_sf_1df(3.841) == pytest.approx(0.0500, abs=5e-4)
    assert chi2_sf_1df(2.882) == pytest.approx(0.0896, abs=5e-4)


def test_chi2_sf_matches_incomplete_gamma_oracle():
    for x in np.linspace(0.0, 30.0, 301):
        assert chi2_sf_1df(float(x)) == pytest.approx(
            chi2_sf_1df_gamma(float(x)), abs=1e-6
        )


def test_chi2_sf_monotone():
    xs = np.linspace(0, 20, 100)
    vals = [chi2_sf_1df(float(x)) for x in xs]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_chi2_sf_negative_raises():
    with pytest.raises(StatsError):
        chi2_sf_1df(-0.1)


# ---------------------------------------------------------------- splits


def test_median_split_even():
    high, low = median_split([1, 2, 3, 4])
    assert high == [2, 3] and low == [0, 1]


def test_median_split_tie_at_median():
    high, low = median_split([1, 2, 2, 3])
    assert high == [3] and low == [0, 1, 2]


def test_median_split_constant_raises():
    with pytest.raises(DegenerateSplit):
        median_split([5, 5, 5])


# ---------------------------------------------------------------- quartiles


def test_quartiles_one_to_eight():
    assert quartiles(list(range(1, 9))) == (2, 4, 6)


def test_quartiles_unsorted_input():
    assert quartiles([3, 1, 2, 4]) == (1, 2, 3)


def test_quartiles_too_few():
    with pytest.raises(TooFewScores):
        quartiles([1.0, 2.0, 3.0])


def test_quartiles_match_oracle_random():
    rng = random.Random(13)
    for _ in range(200):
        n = rng.randint(4, 40)
        scores = [rng.uniform(-5, 5) for _ in range(n)]
        assert quartiles(scores) == nearest_rank_quartiles(scores)


# ---------------------------------------------------------------- kfold


def test_kfold_even_split():
    ids = [f"c{i}" for i in range(10)]
    folds = kfold(ids, 5, seed=3)
    assert sorted(len(f) for f in folds) == [2, 2, 2, 2, 2]
    assert sorted(x for f in folds for x in f) == sorted(ids)


def test_kfold_remainder_sizes():
    ids = [f"c{i}" for i in range(11)]
    folds = kfold(ids, 5, seed=3)
    assert sorted((len(f) for f in folds), reverse=True) == [3, 2, 2, 2, 2]


def test_kfold_deterministic_and_disjoint():
    ids = [f"c{i}" for i in range(23)]
    f1 = kfold(ids, 5, seed=9)
    f2 = kfold(ids, 5, seed=9)
    assert f1 == f2
    seen = [x for f in f1 for x in f]
    assert len(seen) == len(set(seen)) == 23


def test_kfold_too_few_cases():
    with pytest.raises(TooFewCases):
        kfold(["a", "b", "c"], 5, seed=0)


# ---------------------------------------------------------------- risk score


def test_risk_score_anchor():
    assert risk_score(12.0) == 0.0
    assert risk_score(6.0) == pytest.approx(math.log(2.0))
    assert risk_score(24.0) == pytest.approx(-math.log(2.0))


def test_risk_score_monotone_decreasing():
    months = [0.5, 1, 3, 6, 12, 24, 48, 96]
    scores = [risk_score(m) for m in months]
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_risk_score_nonpositive():
    with pytest.raises(NonPositiveTime):
        risk_score(0.0)
    with pytest.raises(NonPositiveTime):
        risk_score(-3.0)


# ---------------------------------------------------------------- formatting


def test_format_cindex_cell():
    assert format_cindex_cell([0.7, 0.7, 0.7]) == "0.700±0.000"
    cell = format_cindex_cell([0.661, 0.705, 0.683, 0.683, 0.683])
    mean, std = cell.split("±")
    assert abs(float(mean) - np.mean([0.661, 0.705, 0.683, 0.683, 0.683])) < 5e-4
    assert abs(float(std) - np.std([0.661, 0.705, 0.683, 0.683, 0.683])) < 5e-4
