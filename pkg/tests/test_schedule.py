import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffcap.schedule import (
    ScheduleError,
    build_schedule,
    compose_check,
    corrupt,
    marginal,
    step_matrices,
)


def _closed_form(t, T, c_u, n_text):
    """Independent evaluation of the cumulative marginals."""
    g = t / T
    a = (1 - t / T) * (1 - c_u * t / T)
    return a, g, (1 - a - g) / n_text


class TestBuild:
    def test_endpoints(self):
        s = build_schedule(20, 5, 0.1)
        assert (s.abar[0], s.gbar[0]) == (1.0, 0.0)
        assert (s.abar[20], s.gbar[20]) == (0.0, 1.0)

    def test_midpoint_values(self):
        s = build_schedule(20, 5, 0.1)
        assert s.abar[10] == pytest.approx(0.475, abs=1e-15)
        assert s.gbar[10] == pytest.approx(0.5, abs=1e-15)
        assert 1 - s.abar[10] - s.gbar[10] == pytest.approx(0.025, abs=1e-15)

    @pytest.mark.parametrize("T,c_u", [(5, 0.0), (20, 0.1), (100, 0.3)])
    def test_matches_closed_form_and_mass_sums_to_one(self, T, c_u):
        s = build_schedule(T, 7, c_u)
        for t in range(T + 1):
            a, g, b = _closed_form(t, T, c_u, 7)
            assert s.abar[t] == pytest.approx(a, abs=1e-12)
            assert s.gbar[t] == pytest.approx(g, abs=1e-12)
            assert s.abar[t] + s.gbar[t] + 7 * s.bbar[t] == pytest.approx(1.0, abs=1e-12)

    @given(T=st.integers(1, 60), n=st.integers(2, 12), c_u=st.floats(0.0, 0.95))
    def test_monotone_and_per_step_valid(self, T, n, c_u):
        s = build_schedule(T, n, c_u)
        assert np.all(np.diff(s.gbar) > 0)
        assert np.all(np.diff(s.abar) < 0)
        a, g = s.alpha[1:], s.gamma[1:]
        assert np.all((a >= 0) & (a <= 1) & (g >= 0) & (g <= 1) & (a + g <= 1 + 1e-12))
        assert np.all(s.beta[1:] >= -1e-15)

    def test_no_uniform_noise_when_c_u_zero(self):
        s = build_schedule(20, 5, 0.0)
        assert np.all(np.abs(s.bbar) < 1e-15)

    @pytest.mark.parametrize("args", [(0, 5, 0.1), (20, 1, 0.1), (20, 5, 1.0), (20, 5, -0.1)])
    def test_invalid_inputs(self, args):
        with pytest.raises(ScheduleError):
            build_schedule(*args)


class TestMarginal:
    def test_t0_one_hot_at_x0(self):
        np.testing.assert_array_equal(marginal(2, 0, build_schedule(20, 5)), np.eye(6)[2])

    def test_tT_one_hot_at_mask(self):
        np.testing.assert_array_equal(marginal(2, 20, build_schedule(20, 5)), np.eye(6)[5])

    def test_midpoint_vector(self):
        # keep 0.475 plus a 0.025 replacement budget spread over the 5 text tokens
        p = marginal(0, 10, build_schedule(20, 5, 0.1))
        np.testing.assert_allclose(p, [0.48, 0.005, 0.005, 0.005, 0.005, 0.5], atol=1e-12)

    @given(x0=st.integers(0, 4), t=st.integers(0, 20))
    def test_probability_vector(self, x0, t):
        p = marginal(x0, t, build_schedule(20, 5, 0.3))
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12

    def test_mask_start_rejected(self):
        with pytest.raises(ScheduleError):
            marginal(5, 3, build_schedule(20, 5))

    def test_fractional_level_uses_closed_form(self):
        s = build_schedule(20, 5, 0.1)
        a, g, b = _closed_form(7.5, 20, 0.1, 5)
        np.testing.assert_allclose(marginal(1, 7.5, s), [b, a + b, b, b, b, g], atol=1e-14)


class TestComposition:
    @pytest.mark.parametrize("T", [1, 5, 20, 100])
    @pytest.mark.parametrize("c_u", [0.0, 0.1, 0.3])
    def test_step_products_match_cumulative(self, T, c_u):
        assert compose_check(build_schedule(T, 5, c_u)) <= 1e-9

    def test_products_against_independent_closed_form(self):
        T, c_u, n = 20, 0.3, 5
        prod = np.eye(n + 1)
        for t, q in enumerate(step_matrices(build_schedule(T, n, c_u))):
            prod = prod @ q if t else prod
            a, g, b = _closed_form(t, T, c_u, n)
            expected = np.full(n + 1, b)
            expected[0] += a
            expected[n] = g
            np.testing.assert_allclose(prod[0], expected, atol=1e-12)

    def test_mask_row_absorbing(self):
        for q in step_matrices(build_schedule(20, 5, 0.1)):
            assert q[5, 5] == 1.0 and np.all(q[5, :5] == 0)

    def test_single_step_equals_cumulative(self):
        s = build_schedule(1, 5, 0.2)
        np.testing.assert_allclose(step_matrices(s)[1][0], marginal(0, 1, s))


class TestCorrupt:
    def test_full_corruption_at_T(self):
        s = build_schedule(20, 5)
        x0 = np.array([0, 1, 2, 3, 4, 6, 6])
        for seed in range(5):
            out = corrupt(x0, 20, s, np.random.default_rng(seed), mask_id=5, pad_id=6)
            assert out.tolist() == [5] * 5 + [6, 6]

    def test_t0_identity(self):
        x0 = np.array([0, 4, 2, 6])
        out = corrupt(x0, 0, build_schedule(20, 5), np.random.default_rng(0), mask_id=5, pad_id=6)
        assert out.tolist() == x0.tolist()

    def test_pad_exempt_unless_token(self):
        s = build_schedule(20, 5)
        x0 = np.full(200, 6)
        kept = corrupt(x0, 15, s, np.random.default_rng(0), mask_id=5, pad_id=6)
        assert np.all(kept == 6)
        noised = corrupt(x0, 15, s, np.random.default_rng(0), mask_id=5, pad_id=6, pad_is_token=True)
        assert np.mean(noised == 5) > 0.5

    @pytest.mark.parametrize("t", [3, 10, 17])
    def test_mask_fraction_within_three_standard_errors(self, t):
        s = build_schedule(20, 5, 0.1)
        n = 100_000
        out = corrupt(np.zeros(n, dtype=np.int64), t, s, np.random.default_rng(t), mask_id=5)
        g = s.gbar[t]
        assert abs(np.mean(out == 5) - g) <= 3 * np.sqrt(g * (1 - g) / n)

    def test_empirical_distribution_matches_marginal(self):
        s = build_schedule(20, 5, 0.3)
        n = 200_000
        out = corrupt(np.full(n, 2), 8, s, np.random.default_rng(1), mask_id=5)
        freq = np.bincount(out, minlength=6) / n
        p = marginal(2, 8, s)
        assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n) + 1e-12)
