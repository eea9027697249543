import numpy as np
import pytest

from ssmlab.stats import (
    InsufficientDataError,
    bootstrap_ci,
    holm_bonferroni,
    loglog_ols,
    permutation_test,
    rng_for,
    wilson_interval,
)


class TestWilson:
    def test_hand_computed_51_of_101(self):
        # closed form with z = 1.959964:
        # center = (p + z^2/2n)/(1 + z^2/n), half-width per the Wilson formula
        z = 1.9599639845400545
        n, p = 101, 51 / 101
        denom = 1 + z * z / n
        center = (p + z * z / (2 * n)) / denom
        half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
        lo, hi = wilson_interval(51, 101)
        assert lo == pytest.approx(center - half, abs=1e-12)
        assert hi == pytest.approx(center + half, abs=1e-12)

    def test_bounds_inside_unit_interval(self):
        lo, hi = wilson_interval(0, 20)
        assert 0.0 <= lo <= hi <= 1.0


class TestBootstrapCi:
    def test_constant_samples_degenerate(self):
        res = bootstrap_ci([2.5, 2.5, 2.5, 2.5], seed=1)
        assert res.lower == res.point == res.upper == 2.5

    def test_binary_selects_wilson(self):
        res = bootstrap_ci([1, 0, 1, 1, 0, 1], seed=2)
        assert res.method == "wilson"
        assert res.lower <= res.point <= res.upper

    def test_continuous_selects_bootstrap(self):
        rng = np.random.default_rng(3)
        res = bootstrap_ci(rng.standard_normal(50) + 2.0, seed=4, n_resamples=2000)
        assert res.method == "percentile-bootstrap"
        assert res.lower <= res.point <= res.upper

    def test_seed_reproducible(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(30)
        r1 = bootstrap_ci(x, seed=77)
        r2 = bootstrap_ci(x, seed=77)
        assert (r1.lower, r1.upper) == (r2.lower, r2.upper)

    def test_insufficient_data(self):
        with pytest.raises(InsufficientDataError):
            bootstrap_ci([1.0])


class TestPermutation:
    def test_identical_groups_p_one(self):
        assert permutation_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0],
                                n_perm=500, seed=6) == 1.0

    def test_extreme_separation(self):
        p = permutation_test([0.0] * 5, [10.0] * 5, n_perm=2000, seed=7)
        assert p <= 0.01

    def test_two_sided_symmetry(self):
        a = [0.1, 0.4, 0.9, 1.3]
        b = [2.0, 2.4, 3.1]
        p1 = permutation_test(a, b, n_perm=4000, seed=8)
        p2 = permutation_test(b, a, n_perm=4000, seed=8)
        assert p1 == p2

    def test_empty_group_rejected(self):
        with pytest.raises(ValueError):
            permutation_test([], [1.0])


class TestHolm:
    def test_hand_example_both_rejected(self):
        assert holm_bonferroni([0.01, 0.04], alpha=0.05) == [True, True]

    def test_all_ones_none_rejected(self):
        assert holm_bonferroni([1.0, 1.0, 1.0]) == [False, False, False]

    def test_single_hypothesis_reduces_to_alpha(self):
        assert holm_bonferroni([0.04], alpha=0.05) == [True]
        assert holm_bonferroni([0.06], alpha=0.05) == [False]

    def test_step_down_stops_at_first_failure(self):
        # p_(1)=0.001 rejects at 0.05/3; p_(2)=0.03 fails at 0.05/2, so the
        # step-down stops and p_(3)=0.04 stays unrejected despite 0.04 < 0.05
        flags = holm_bonferroni([0.04, 0.001, 0.03], alpha=0.05)
        assert flags == [False, True, False]

    def test_monotone_lowering_p_never_unrejects(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            p = rng.uniform(0, 1, 6)
            base = holm_bonferroni(p)
            j = rng.integers(0, 6)
            lowered = p.copy()
            lowered[j] *= rng.uniform(0, 1)
            after = holm_bonferroni(lowered)
            for i in range(6):
                if base[i] and i != j:
                    assert after[i] or not base[i]
            if base[j]:
                assert after[j]

    def test_invalid_p_rejected(self):
        with pytest.raises(ValueError):
            holm_bonferroni([1.2])


class TestLogLogOls:
    def test_exact_quadratic(self):
        fit = loglog_ols([(64, 4096), (128, 16384), (256, 65536)])
        assert fit.slope == pytest.approx(2.0, abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0)

    def test_exact_cubic(self):
        fit = loglog_ols([(64, 64**3), (128, 128**3), (256, 256**3)])
        assert fit.slope == pytest.approx(3.0, abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0)

    def test_degenerate_duplicated_point(self):
        with pytest.raises(ValueError):
            loglog_ols([(10, 100), (10, 100)])

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            loglog_ols([(0, 1), (2, 4)])


class TestProperties:
    def test_wilson_coverage_bernoulli(self):
        # 93-97% coverage over 1000 Bernoulli(0.3, n=100) datasets
        rng = rng_for(42, 1)
        covered = 0
        for _ in range(1000):
            x = (rng.random(100) < 0.3).astype(float)
            res = bootstrap_ci(x, seed=0)
            covered += res.lower <= 0.3 <= res.upper
        assert 930 <= covered <= 970

    def test_permutation_super_uniform_under_null(self):
        rng = rng_for(123, 2)
        n_sim = 400
        n_perm = 199
        ps = []
        for i in range(n_sim):
            a = rng.standard_normal(8)
            b = rng.standard_normal(8)
            ps.append(permutation_test(a, b, n_perm=n_perm, seed=int(i)))
        ps = np.asarray(ps)
        for x in (0.01, 0.05, 0.1, 0.25, 0.5):
            assert np.mean(ps <= x) <= x + 0.035
