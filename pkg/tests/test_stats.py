"""Paired t-test against the frozen worked example and the scipy oracle."""

import math

import numpy as np
import pytest

from warpdetect import stats
from warpdetect.errors import DimensionError

scipy_stats = pytest.importorskip("scipy.stats")
scipy_special = pytest.importorskip("scipy.special")


class TestBetainc:
    def test_against_scipy(self, rng):
        for _ in range(200):
            a = rng.uniform(0.1, 20)
            b = rng.uniform(0.1, 20)
            x = rng.uniform(0, 1)
            ours = stats.betainc_reg(a, b, x)
            ref = float(scipy_special.betainc(a, b, x))
            assert ours == pytest.approx(ref, abs=1e-12)

    def test_endpoints(self):
        assert stats.betainc_reg(2.0, 3.0, 0.0) == 0.0
        assert stats.betainc_reg(2.0, 3.0, 1.0) == 1.0


class TestTTest:
    def test_worked_example(self):
        # d = {1,2,3,4}: t = 2.5 / (sd 1.2909.../2) ~ 3.873, p ~ 0.0305
        res = stats.paired_t_test([1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0])
        assert res.t == pytest.approx(3.872983346207417, abs=1e-3)
        assert res.p == pytest.approx(0.030466291662170977, abs=1e-3)
        assert res.significant_at_05
        assert not res.degenerate

    def test_against_scipy_random(self, rng):
        for _ in range(50):
            n = int(rng.integers(3, 40))
            a = rng.standard_normal(n)
            b = a + rng.standard_normal(n) * 0.5 + rng.uniform(-0.2, 0.2)
            res = stats.paired_t_test(a, b)
            ref = scipy_stats.ttest_rel(a, b)
            assert res.t == pytest.approx(float(ref.statistic), abs=1e-10)
            assert res.p == pytest.approx(float(ref.pvalue), abs=1e-10)

    def test_identical_series_degenerate(self):
        res = stats.paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert res.degenerate
        assert res.p == 1.0
        assert not res.significant_at_05

    def test_constant_offset_degenerate(self):
        res = stats.paired_t_test([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
        assert res.degenerate
        assert res.p == 0.0
        assert res.significant_at_05
        assert math.isinf(res.t)

    def test_significance_rule(self, rng):
        for _ in range(30):
            n = int(rng.integers(3, 20))
            a = rng.standard_normal(n)
            b = rng.standard_normal(n)
            res = stats.paired_t_test(a, b)
            assert res.significant_at_05 == (res.p < 0.05)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            stats.paired_t_test([1.0, 2.0], [1.0])
        with pytest.raises(DimensionError):
            stats.paired_t_test([1.0], [1.0])
