"""Variance-schedule contracts.

Expected values marked "frozen" below were computed once from independent
oracles: the cosine β vector from a 50-digit mpmath evaluation of the cosine
marginals, and the linear-schedule terminal ᾱ from an 80-bit long-double
sequential product. The oracles are kept inline so the numbers stay auditable.
"""

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from windndp.schedules import (
    VarianceSchedule,
    build_cosine_schedule,
    build_linear_schedule,
    cosine_alpha_bar,
    forward_marginal,
    schedule_from_config,
)


def mpmath_cosine_betas(T: int, s: str = "0.008") -> np.ndarray:
    """Extended-precision oracle for the cosine β vector (50 digits)."""
    mp.mp.dps = 50
    s = mp.mpf(s)

    def f(lam):
        return mp.cos(mp.pi / 2 * (lam + s) / (1 + s)) ** 2

    ab = [f(mp.mpf(t) / T) / f(0) for t in range(T + 1)]
    betas = [min(max(1 - ab[t] / ab[t - 1], mp.mpf("1e-8")), mp.mpf("0.999")) for t in range(1, T + 1)]
    return np.array([float(b) for b in betas])


class TestCosineSchedule:
    # frozen from the mpmath oracle above
    COSINE_T4_BETAS = np.array(
        [0.15298783867309527, 0.41695808751199435, 0.7078587123971636, 0.999]
    )

    def test_t4_matches_extended_precision_oracle(self):
        sched = build_cosine_schedule(4, s=0.008)
        np.testing.assert_allclose(sched.beta, self.COSINE_T4_BETAS, rtol=1e-12)
        np.testing.assert_allclose(sched.beta, mpmath_cosine_betas(4), rtol=1e-12)

    def test_t500_terminal_marginals(self):
        raw = cosine_alpha_bar(500, s=0.008)
        assert raw[0] == 1.0
        assert raw[500] <= 1e-6  # cos²(π/2)/f(0): zero up to rounding
        sched = build_cosine_schedule(500)
        assert sched.alpha_bar[0] == 1.0
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.alpha_bar[500] <= 1e-6

    def test_beta_reconstructs_marginals_where_unclipped(self):
        raw = cosine_alpha_bar(200)
        sched = build_cosine_schedule(200)
        unclipped = (sched.beta > 1e-8) & (sched.beta < 0.999)
        np.testing.assert_allclose(
            sched.alpha_bar[1:][unclipped], raw[1:][unclipped], rtol=1e-12
        )

    def test_deterministic_and_rebuildable_from_config(self):
        a = build_cosine_schedule(123, s=0.01)
        b = schedule_from_config(a.config())
        assert np.array_equal(a.beta, b.beta)
        assert np.array_equal(a.alpha_bar, b.alpha_bar)
        assert a.config() == b.config() == {"kind": "cosine", "total_steps": 123, "s": 0.01}


class TestLinearSchedule:
    # frozen from the long-double sequential-product oracle
    LINEAR_T1000_ALPHA_BAR_T = 4.0358297653756835e-05

    def test_endpoints_inclusive(self):
        sched = build_linear_schedule(1000, 1e-4, 0.02)
        assert sched.beta[0] == 1e-4
        assert sched.beta[-1] == 0.02

    def test_single_step(self):
        sched = build_linear_schedule(1, 0.1, 0.1)
        np.testing.assert_array_equal(sched.beta, [0.1])
        np.testing.assert_allclose(sched.alpha_bar, [1.0, 0.9])

    def test_terminal_alpha_bar_matches_long_double_product(self):
        sched = build_linear_schedule(1000, 1e-4, 0.02)
        got = sched.alpha_bar[1000]
        np.testing.assert_allclose(got, self.LINEAR_T1000_ALPHA_BAR_T, rtol=1e-10)
        # recompute the oracle inline
        betas = np.linspace(np.longdouble(1e-4), np.longdouble(0.02), 1000)
        prod = np.longdouble(1.0)
        for b in betas:
            prod = prod * (1 - b)
        np.testing.assert_allclose(got, float(prod), rtol=1e-10)

    def test_bad_endpoints_rejected(self):
        with pytest.raises(ValueError):
            build_linear_schedule(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            build_linear_schedule(10, 1e-4, 1.0)


class TestScheduleInvariants:
    @pytest.mark.parametrize(
        "sched",
        [
            build_cosine_schedule(500),
            build_cosine_schedule(37),
            build_linear_schedule(1000),
            build_linear_schedule(5, 0.05, 0.3),
        ],
        ids=["cos500", "cos37", "lin1000", "lin5"],
    )
    def test_core_invariants(self, sched):
        T = sched.total_steps
        assert sched.beta.shape == (T,)
        assert sched.alpha_bar.shape == (T + 1,)
        assert np.all(sched.beta > 0) and np.all(sched.beta < 1)
        assert sched.alpha_bar[0] == 1.0
        assert np.all(np.diff(sched.alpha_bar) < 0)
        # the product recurrence α_t ᾱ_{t-1} = ᾱ_t holds bit-exactly
        assert np.array_equal(sched.alpha[0] * sched.alpha_bar[0], sched.alpha_bar[1])
        assert np.array_equal(sched.alpha * sched.alpha_bar[:-1], sched.alpha_bar[1:])
        # reverse posterior variances
        assert sched.beta_tilde[0] == 0.0
        assert np.all(sched.beta_tilde >= 0)
        assert np.all(sched.beta_tilde <= sched.beta * (1 + 1e-15))

    def test_near_noise_requirement_enforced_for_long_schedules(self):
        # default linear betas at T=100 leave ᾱ_T ≈ 0.37: not a usable diffusion
        with pytest.raises(ValueError, match="1e-3"):
            build_linear_schedule(100, 1e-4, 0.02)

    def test_arrays_are_immutable(self):
        sched = build_cosine_schedule(10)
        with pytest.raises(ValueError):
            sched.beta[0] = 0.5

    @settings(max_examples=25, deadline=None)
    @given(
        T=st.integers(min_value=1, max_value=99),
        s=st.floats(min_value=1e-4, max_value=0.5),
    )
    def test_cosine_invariants_hold_for_arbitrary_sizes(self, T, s):
        sched = build_cosine_schedule(T, s=s)
        assert np.all(sched.beta > 0) and np.all(sched.beta < 1)
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert np.all(sched.beta_tilde >= 0)
        assert np.all(sched.beta_tilde <= sched.beta * (1 + 1e-15))


class TestForwardMarginal:
    def test_hand_computed_two_point_case(self):
        # schedule with ᾱ_2 = 0.63 exactly up to rounding: β_1 = β_2 = 1 - √0.63
        b = 1.0 - np.sqrt(0.63)
        sched = build_linear_schedule(2, b, b)
        np.testing.assert_allclose(sched.alpha_bar[2], 0.63, rtol=1e-15)
        y = forward_marginal(np.array([1.0, 2.0]), 2, sched, np.array([1.0, -1.0]))
        expected = np.array(
            [np.sqrt(0.63) * 1 + np.sqrt(0.37), np.sqrt(0.63) * 2 - np.sqrt(0.37)]
        )
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_monte_carlo_moments(self):
        sched = build_cosine_schedule(200)
        t = 120
        rng = np.random.default_rng(7)
        y0 = np.array([1.5])
        draws = np.array(
            [forward_marginal(y0, t, sched, rng.standard_normal(1))[0] for _ in range(20000)]
        )
        ab = sched.alpha_bar[t]
        np.testing.assert_allclose(draws.mean(), np.sqrt(ab) * 1.5, rtol=0.02)
        np.testing.assert_allclose(draws.var(), 1 - ab, rtol=0.03)

    def test_validation(self):
        sched = build_cosine_schedule(10)
        y0 = np.zeros(3)
        with pytest.raises(ValueError):
            forward_marginal(y0, 0, sched, np.zeros(3))
        with pytest.raises(ValueError):
            forward_marginal(y0, 11, sched, np.zeros(3))
        with pytest.raises(ValueError):
            forward_marginal(y0, 3, sched, np.zeros(4))
        with pytest.raises(ValueError):
            forward_marginal(np.array([np.nan, 0, 0]), 3, sched, np.zeros(3))

    def test_t_equals_T_is_nearly_pure_noise(self):
        sched = build_cosine_schedule(500)
        y0 = np.full(4, 100.0)
        eps = np.array([0.1, -0.2, 0.3, -0.4])
        y = forward_marginal(y0, 500, sched, eps)
        np.testing.assert_allclose(y, eps, atol=0.02)
