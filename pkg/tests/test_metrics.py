import math

import numpy as np
import pytest
from scipy import integrate, stats

from conftest import random_records
from mocsurv.data import SurvivalRecord
from mocsurv.metrics import (
    MetricError,
    chi2_sf_1df,
    c_index,
    km_curve,
    logrank_test,
    median_split,
)

R = SurvivalRecord


def brute_c_index(records, risk):
    num = den = 0.0
    for i, a in enumerate(records):
        for j, b in enumerate(records):
            if i == j or not a.event or not a.time < b.time:
                continue
            den += 1
            if risk[i] > risk[j]:
                num += 1
            elif risk[i] == risk[j]:
                num += 0.5
    return num / den


class TestCIndex:
    def test_perfect(self):
        recs = [R(str(i), float(i + 1), True) for i in range(6)]
        assert c_index(recs, [6, 5, 4, 3, 2, 1]) == 1.0

    def test_all_tied(self):
        recs = [R(str(i), float(i + 1), i % 2 == 0) for i in range(6)]
        assert c_index(recs, [0.3] * 6) == 0.5

    def test_worked_example(self):
        recs = [R("a", 1, True), R("b", 2, True), R("c", 3, False)]
        assert c_index(recs, {"a": 0.9, "b": 0.2, "c": 0.5}) == pytest.approx(2 / 3, rel=1e-15)

    def test_no_comparable(self):
        with pytest.raises(MetricError):
            c_index([R("a", 1, False), R("b", 2, False)], [0.1, 0.2])

    def test_missing_risk(self):
        with pytest.raises(MetricError):
            c_index([R("a", 1, True), R("b", 2, True)], {"a": 0.1})

    @pytest.mark.parametrize("seed", range(15))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 101))
        recs = random_records(rng, n, 0.4, tie_prob=0.3)
        recs[0] = R(recs[0].id, min(r.time for r in recs) / 2, True)
        risk = np.round(rng.normal(size=n), 1)  # coarse grid: prediction ties
        assert c_index(recs, risk) == brute_c_index(recs, risk)

    @pytest.mark.parametrize("seed", range(5))
    def test_negation_and_monotone_transform(self, seed):
        rng = np.random.default_rng(100 + seed)
        recs = random_records(rng, 60, 0.3)
        risk = rng.normal(size=60)
        c = c_index(recs, risk)
        assert c + c_index(recs, -risk) == pytest.approx(1.0, abs=1e-15)
        assert c_index(recs, np.exp(3 * risk) + 2) == c
        assert c_index(recs, np.tanh(risk)) == c


class TestKM:
    def test_all_censored(self):
        curve = km_curve([R("a", 1, False), R("b", 2, False)])
        assert curve.times.size == 0
        assert curve.at(5.0) == 1.0

    def test_first_of_four(self):
        recs = [R("a", 1, True), R("b", 2, False), R("c", 3, True), R("d", 4, False)]
        curve = km_curve(recs)
        assert curve.at(1.0) == 0.75
        # 2 at risk at t=3 after one censoring
        assert curve.at(3.0) == 0.75 * 0.5
        assert curve.at(0.5) == 1.0
        assert curve.at_risk.tolist() == [4, 2]

    def test_two_events(self):
        curve = km_curve([R("a", 1, True), R("b", 2, True)])
        assert curve.at(1.0) == 0.5
        assert curve.at(2.0) == 0.0

    def test_tied_deaths(self):
        recs = [R("a", 1, True), R("b", 1, True), R("c", 1, False), R("d", 2, True), R("e", 5, False)]
        curve = km_curve(recs)
        assert curve.events.tolist() == [2, 1]
        assert curve.survival.tolist() == [0.6, 0.6 * 0.5]

    @pytest.mark.parametrize("seed", range(8))
    def test_against_scipy(self, seed):
        rng = np.random.default_rng(seed)
        recs = random_records(rng, int(rng.integers(2, 7)) if seed < 4 else 80, 0.3, tie_prob=0.4)
        curve = km_curve(recs)
        assert (np.diff(curve.survival) <= 0).all()
        assert ((curve.survival >= 0) & (curve.survival <= 1)).all()
        t = np.array([r.time for r in recs])
        e = np.array([r.event for r in recs])
        if not e.any() or e.all() and len(set(t)) == 1:
            return
        data = stats.CensoredData(uncensored=t[e], right=t[~e])
        ref = stats.ecdf(data).sf
        for q in np.unique(t):
            assert curve.at(q) == pytest.approx(float(ref.evaluate(q)), abs=1e-12)


class TestLogRank:
    @pytest.mark.parametrize("x", [0.1, 1.0, 3.841, 6.635, 10.0])
    def test_chi2_tail_against_integration(self, x):
        # density of chi-square(1): exp(-u/2) / sqrt(2 pi u); substitute u = x + s^2 to tame the tail
        def integrand(s):
            u = x + s * s
            return 2 * s * math.exp(-u / 2) / math.sqrt(2 * math.pi * u)

        ref, _ = integrate.quad(integrand, 0, np.inf, epsabs=1e-13, epsrel=1e-13)
        assert abs(chi2_sf_1df(x) - ref) < 1e-6

    def test_critical_value(self):
        assert abs(chi2_sf_1df(3.841) - 0.05) < 0.001

    def test_identical_groups(self):
        rng = np.random.default_rng(0)
        recs = random_records(rng, 40, 0.3)
        res = logrank_test(recs, list(recs))
        assert res.statistic == pytest.approx(0.0, abs=1e-12)
        assert res.p_value == pytest.approx(1.0, abs=1e-6)

    def test_separated_groups(self):
        a = [R(f"a{i}", 1.0 + i, True) for i in range(30)]
        b = [R(f"b{i}", 100.0 + i, True) for i in range(30)]
        assert logrank_test(a, b).p_value < 0.01

    def test_no_events(self):
        with pytest.raises(MetricError):
            logrank_test([R("a", 1, False)], [R("b", 2, False)])

    @pytest.mark.parametrize("seed", range(6))
    def test_against_scipy(self, seed):
        rng = np.random.default_rng(seed)
        a = random_records(rng, 35, 0.3, tie_prob=0.5)
        b = [R("b" + r.id, r.time * 1.6, r.event) for r in random_records(rng, 45, 0.3, tie_prob=0.5)]
        ours = logrank_test(a, b)

        def cd(g):
            t = np.array([r.time for r in g])
            e = np.array([r.event for r in g])
            return stats.CensoredData(uncensored=t[e], right=t[~e])

        ref = stats.logrank(cd(a), cd(b))
        assert ours.statistic == pytest.approx(ref.statistic ** 2, rel=1e-10)
        assert ours.p_value == pytest.approx(ref.pvalue, rel=1e-8)
        assert (ours.n_a, ours.n_b) == (35, 45)


class TestMedianSplit:
    def test_basic(self):
        high, low = median_split(["a", "b", "c", "d"], {"a": 0.1, "b": 0.2, "c": 0.8, "d": 0.9})
        assert (high, low) == (["c", "d"], ["a", "b"])

    def test_all_equal(self):
        ids = ["e", "a", "d", "b", "c", "f"]
        high, low = median_split(ids, dict.fromkeys(ids, 0.5))
        assert (high, low) == (["b", "d", "f"], ["a", "c", "e"])

    @pytest.mark.parametrize("n", [3, 5, 11, 41])
    def test_odd_sizes(self, n):
        rng = np.random.default_rng(n)
        ids = [f"x{i}" for i in range(n)]
        high, low = median_split(ids, dict(zip(ids, rng.normal(size=n))))
        assert abs(len(high) - len(low)) == 1
        assert sorted(high + low) == sorted(ids)

    def test_too_small(self):
        with pytest.raises(MetricError):
            median_split(["a"], {"a": 1.0})
