import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dvq.bounds import (BranchUsage, UsageStats, adaptive_bound_terms, continuous_bound_term,
                        fixed_bound_term, format_table, stats_from_dict, tradeoff_report)

mpmath.mp.dps = 40

# frozen from the arbitrary-precision oracles below
FIXED_1_16 = 0.050374466822160145
J2_N3 = 0.3185961021492205
J1_N2 = 0.1080354149952044
J2_N2 = 0.13581015157406195
CONT_16 = 0.22574991348911702


def mp_fixed(G, L, n, delta):
    return mpmath.sqrt((G * mpmath.log(L) + mpmath.log(1 / mpmath.mpf(delta))) / (2 * n))


def mp_terms(n, delta, branches):
    N = len(branches)
    d = mpmath.mpf(delta)
    j1 = sum(mpmath.mpf(c) / n * mpmath.sqrt((G * mpmath.log(L) + mpmath.log(N / d)) / (2 * n))
             for G, L, c in branches)
    j2 = mpmath.sqrt((2 * N * mpmath.log(2) + 2 * mpmath.log(1 / d)) / n) if N >= 2 else mpmath.mpf(0)
    return j1, j2


def _stats(n, branches, delta=0.1):
    return UsageStats(n, tuple(BranchUsage(G, L, c) for G, L, c in branches), delta)


class TestOracles:
    def test_fixed_term_oracle(self):
        assert float(mp_fixed(1, 16, 1000, "0.1")) == pytest.approx(FIXED_1_16, rel=1e-15)

    def test_j2_oracle(self):
        _, j2 = mp_terms(100, "0.05", [(1, 16, 50), (2, 64, 30), (4, 256, 20)])
        assert float(j2) == pytest.approx(J2_N3, rel=1e-15)

    def test_two_branch_oracle(self):
        j1, j2 = mp_terms(400, "0.1", [(1, 16, 300), (4, 256, 100)])
        assert float(j1) == pytest.approx(J1_N2, rel=1e-15)
        assert float(j2) == pytest.approx(J2_N2, rel=1e-15)

    def test_continuous_oracle(self):
        m, n = 16, 1000
        val = mpmath.sqrt((m * mpmath.log(4 * mpmath.sqrt(n * m)) + mpmath.log(10)) / (2 * n))
        assert float(val) == pytest.approx(CONT_16, rel=1e-15)


class TestAdaptiveTerms:
    def test_single_branch_example(self):
        j1, j2 = adaptive_bound_terms(_stats(1000, [(1, 16, 1000)]))
        assert abs(j1 - 0.0503745) < 1e-6
        assert j1 == pytest.approx(FIXED_1_16, rel=1e-14)
        assert j2 == 0.0

    def test_three_branch_j2(self):
        _, j2 = adaptive_bound_terms(_stats(100, [(1, 16, 50), (2, 64, 30), (4, 256, 20)], 0.05))
        assert abs(j2 - 0.3185961) < 1e-6
        assert j2 == pytest.approx(J2_N3, rel=1e-14)

    def test_two_branch_example(self):
        j1, j2 = adaptive_bound_terms(_stats(400, [(1, 16, 300), (4, 256, 100)]))
        assert abs(j1 - 0.108036) < 1e-6
        assert abs(j2 - 0.135811) < 1e-6
        assert (j1, j2) == pytest.approx((J1_N2, J2_N2), rel=1e-14)

    @given(st.integers(1, 8), st.integers(1, 4096), st.integers(1, 100_000), st.floats(1e-4, 0.999))
    def test_single_branch_reduces_to_fixed(self, G, L, n, delta):
        j1, j2 = adaptive_bound_terms(_stats(n, [(G, L, n)], delta))
        assert abs(j1 - fixed_bound_term(G, L, n, delta)) <= 1e-12
        assert j2 == 0.0

    def test_reduction_over_100_configs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            G, L, n = int(rng.integers(1, 9)), int(rng.integers(1, 5000)), int(rng.integers(1, 10**5))
            delta = float(rng.uniform(1e-4, 0.999))
            j1, j2 = adaptive_bound_terms(_stats(n, [(G, L, n)], delta))
            assert abs(j1 - fixed_bound_term(G, L, n, delta)) <= 1e-12 and j2 == 0.0

    @given(st.integers(1, 6), st.integers(2, 512), st.integers(0, 50), st.integers(1, 50))
    def test_j1_monotone_in_sizes(self, G, L, c0, c1):
        base = [(G, L, c0), (2, 16, c1)]
        n = c0 + c1
        j1, _ = adaptive_bound_terms(_stats(n, base))
        j1_g, _ = adaptive_bound_terms(_stats(n, [(G + 1, L, c0), (2, 16, c1)]))
        j1_l, _ = adaptive_bound_terms(_stats(n, [(G, 2 * L, c0), (2, 16, c1)]))
        assert j1_g >= j1 and j1_l >= j1

    def test_j2_monotone_in_pool_size_and_samples(self):
        def j2(N, n):
            counts = [n // N] * N
            counts[0] += n - sum(counts)
            return adaptive_bound_terms(_stats(n, [(1, 16, c) for c in counts]))[1]

        values = [j2(N, 600) for N in range(2, 8)]
        assert all(b > a for a, b in zip(values, values[1:]))
        values = [j2(3, n) for n in (30, 300, 3000)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_continuous_branch_priced_at_large_codebook(self):
        s = UsageStats(10, (BranchUsage(1, 16, 5), BranchUsage(1, 1, 5, continuous=True)), 0.1)
        j1, _ = adaptive_bound_terms(s)
        expect = 0.5 * math.sqrt((math.log(16) + math.log(20)) / 20) + \
            0.5 * math.sqrt((math.log(1e9) + math.log(20)) / 20)
        assert j1 == pytest.approx(expect, rel=1e-14)

    def test_pure(self):
        s = _stats(400, [(1, 16, 300), (4, 256, 100)])
        assert adaptive_bound_terms(s) == adaptive_bound_terms(s)

    def test_counts_must_sum_to_n(self):
        with pytest.raises(ValueError, match="sum to 399"):
            _stats(400, [(1, 16, 300), (4, 256, 99)])

    @pytest.mark.parametrize("delta", [0.0, 1.0, 1.5, -0.2])
    def test_delta_domain(self, delta):
        with pytest.raises(ValueError, match="delta"):
            _stats(10, [(1, 16, 10)], delta)


class TestFixedTerm:
    def test_example(self):
        assert abs(fixed_bound_term(1, 16, 1000, 0.1) - 0.0503745) < 1e-6

    def test_trivial_codebook(self):
        assert fixed_bound_term(3, 1, 50, 0.2) == pytest.approx(math.sqrt(math.log(5) / 100), rel=1e-15)

    @given(st.integers(1, 8), st.integers(1, 4096), st.integers(1, 10**6), st.floats(1e-6, 0.99))
    def test_quadrupling_samples_halves_term(self, G, L, n, delta):
        ratio = fixed_bound_term(G, L, 4 * n, delta) / fixed_bound_term(G, L, n, delta)
        assert ratio == pytest.approx(0.5, rel=1e-15)

    @pytest.mark.parametrize("args", [(0, 16, 10, 0.1), (1, 0, 10, 0.1), (1, 16, 0, 0.1), (1, 16, 10, 1.5)])
    def test_domain_violations(self, args):
        with pytest.raises(ValueError):
            fixed_bound_term(*args)


class TestContinuousTerm:
    def test_example(self):
        val = continuous_bound_term(16, 1000, 0.1, alpha_sup=1.0, varsigma_bar=0.0, radius=1.0)
        assert val == pytest.approx(CONT_16, rel=1e-14)

    def test_lipschitz_term_only(self):
        val = continuous_bound_term(16, 100, 0.1, alpha_sup=0.0, varsigma_bar=1.0, radius=2.0)
        assert val == pytest.approx(0.2, rel=1e-15)

    def test_increasing_in_width(self):
        a = continuous_bound_term(16, 1000, 0.1, 1.0, 0.0, 1.0)
        b = continuous_bound_term(64, 1000, 0.1, 1.0, 0.0, 1.0)
        assert b > a

    @pytest.mark.parametrize("kw", [{"m": 0}, {"n": 0}, {"delta": 1.0}, {"radius": 0.0}, {"varsigma_bar": -1.0}])
    def test_domain_violations(self, kw):
        args = {"m": 4, "n": 10, "delta": 0.1, "alpha_sup": 1.0, "varsigma_bar": 0.1, "radius": 1.0}
        args.update(kw)
        with pytest.raises(ValueError):
            continuous_bound_term(**args)


class TestTradeoffReport:
    def test_all_mass_on_tight_branch(self):
        rep = tradeoff_report(_stats(100, [(1, 16, 100), (4, 256, 0)]), (4, 256))
        assert rep.criterion_adaptive == pytest.approx(1.665109, abs=5e-7)
        assert rep.criterion_fixed == pytest.approx(4.709640, abs=5e-7)
        assert rep.adaptive_improves

    def test_single_branch_equals_fixed(self):
        rep = tradeoff_report(_stats(50, [(2, 64, 50)]), (2, 64))
        assert rep.criterion_adaptive == rep.criterion_fixed
        assert not rep.adaptive_improves
        assert rep.J2 == 0.0

    def test_uniform_usage(self):
        rep = tradeoff_report(_stats(200, [(1, 16, 100), (4, 256, 100)]), (4, 256))
        assert rep.criterion_adaptive == pytest.approx(3.187375, abs=5e-7)

    def test_fixed_defaults_to_first_branch(self):
        rep = tradeoff_report(_stats(200, [(1, 16, 100), (4, 256, 100)]))
        assert rep.criterion_fixed == pytest.approx(math.sqrt(math.log(16)), rel=1e-15)
        assert rep.fixed_term == fixed_bound_term(1, 16, 200, 0.1)

    def test_gap_bound_and_note(self):
        s = UsageStats(400, tuple(BranchUsage(G, L, c) for G, L, c in [(1, 16, 300), (4, 256, 100)]), 0.1, 2.0)
        rep = tradeoff_report(s, (4, 256))
        assert rep.gap_bound == pytest.approx(2.0 * (J1_N2 + J2_N2), rel=1e-14)
        assert "sqrt(N/n)" in rep.note

    @given(st.lists(st.tuples(st.integers(1, 8), st.integers(1, 1024), st.integers(0, 40)), min_size=1, max_size=5))
    def test_criterion_is_convex_combination(self, branches):
        n = sum(c for _, _, c in branches)
        if n == 0:
            return
        rep = tradeoff_report(_stats(n, branches))
        per = [math.sqrt(G * math.log(L)) for G, L, c in branches if c > 0]
        assert min(per) - 1e-12 <= rep.criterion_adaptive <= max(per) + 1e-12

    def test_table_lists_every_term(self):
        text = format_table(tradeoff_report(_stats(400, [(1, 16, 300), (4, 256, 100)]), (4, 256)))
        for key in ("J1", "J2", "gap bound", "fixed term", "criterion adaptive", "adaptive smaller"):
            assert key in text
        assert "0.1080354" in text


class TestStatsSchema:
    def test_parse(self):
        stats, fixed = stats_from_dict({"n": 10, "delta": 0.2, "branches": [{"G": 1, "L": 16, "count": 10}],
                                        "fixed": {"G": 4, "L": 256}})
        assert stats.n == 10 and stats.delta == 0.2 and fixed == (4, 256)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            stats_from_dict({"n": 1, "branches": [], "sigma": 1})

    def test_missing_key_rejected(self):
        with pytest.raises(ValueError, match="branches"):
            stats_from_dict({"n": 1})
