import numpy as np
import pytest

from subsidyctl.core import SeededRng
from subsidyctl.diffusion import (
    BETA_MAX,
    cosine_schedule,
    forward_noise,
    implied_clean,
    reverse_mean,
    reverse_sample,
)


def zero_denoiser(z, tau, c):
    return np.zeros_like(z)


class TestSchedule:
    @pytest.mark.parametrize("L", [1, 10, 50, 100, 150])
    def test_identities(self, L):
        s = cosine_schedule(L)
        ab = s.alpha_bar
        assert ab[0] == 1.0
        assert np.all(np.diff(ab) < 0)
        assert np.all((ab[1:] > 0) & (ab[1:] < 1))
        np.testing.assert_allclose(np.cumprod(1 - s.beta), ab, rtol=0, atol=1e-10)
        ref = s.beta[1:] * (1 - ab[:-1]) / (1 - ab[1:])
        np.testing.assert_allclose(s.beta_tilde[1:], ref, rtol=0, atol=1e-12)
        assert np.all(s.beta_tilde[1:] <= s.beta[1:])
        assert s.beta[1:].max() <= BETA_MAX

    def test_alpha_bar_end_near_zero(self):
        assert cosine_schedule(50).alpha_bar[-1] < 1e-3

    def test_first_posterior_variance_zero(self):
        # alpha_bar_0 = 1 makes the first posterior variance vanish
        assert cosine_schedule(20).beta_tilde[1] == 0.0

    def test_bad_args(self):
        with pytest.raises(ValueError):
            cosine_schedule(0)
        with pytest.raises(ValueError):
            cosine_schedule(10, s=0.0)


class TestForward:
    def test_prefix_untouched(self, rng):
        s = cosine_schedule(20)
        x = rng.standard_normal((30, 4))
        for tau in (1, 7, 20):
            dv = forward_noise(x, 12, tau, s, rng)
            np.testing.assert_array_equal(dv.z[:12], x[:12])
            np.testing.assert_array_equal(dv.eps[:12], 0.0)

    def test_zero_noise(self, rng):
        s = cosine_schedule(20)
        x = rng.standard_normal((30, 4))
        dv = forward_noise(x, 5, 9, s, eps=np.zeros((25, 4)))
        np.testing.assert_array_equal(dv.z[5:], np.sqrt(s.alpha_bar[9]) * x[5:])

    def test_marginal_variance(self):
        s = cosine_schedule(50)
        rng = SeededRng(0, 1)
        x = np.full((101, 1000), 0.7)
        tau = 17
        dv = forward_noise(x, 1, tau, s, rng)
        resid = dv.z[1:] - np.sqrt(s.alpha_bar[tau]) * x[1:]
        assert resid.size == 100_000
        assert abs(resid.var() / (1 - s.alpha_bar[tau]) - 1) < 0.02
        assert abs(resid.mean()) < 0.02

    def test_bounds(self, rng):
        s = cosine_schedule(5)
        x = rng.standard_normal((10, 2))
        with pytest.raises(IndexError):
            forward_noise(x, 11, 1, s, rng)
        with pytest.raises(IndexError):
            forward_noise(x, 3, 0, s, rng)
        with pytest.raises(IndexError):
            forward_noise(x, 3, 6, s, rng)


class TestImpliedClean:
    def test_roundtrip_sweep(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            L = int(rng.integers(1, 151))
            s = cosine_schedule(L)
            tau = int(rng.integers(1, L + 1))
            T = int(rng.integers(2, 40))
            K = int(rng.integers(0, T))
            x = rng.standard_normal((T, 3))
            dv = forward_noise(x, K, tau, s, rng)
            back = implied_clean(dv.z[K:], dv.eps[K:], tau, s)
            np.testing.assert_allclose(back, x[K:], rtol=0, atol=1e-10)

    def test_zero_eps(self, rng):
        s = cosine_schedule(10)
        x = rng.standard_normal(6)
        np.testing.assert_allclose(implied_clean(np.sqrt(s.alpha_bar[4]) * x, 0.0, 4, s), x, atol=1e-15)


class TestReverse:
    def test_single_step_oracle(self, rng):
        s = cosine_schedule(1)
        T, K = 24, 9
        x = rng.standard_normal((T, 3))
        ab = s.alpha_bar[1]

        def oracle(z, tau, c):
            # the exact forward noise that maps x to whatever z the sampler holds
            return (z - np.sqrt(ab) * x) / np.sqrt(1 - ab)

        out = reverse_sample(x[:K], None, s, oracle, SeededRng(0), T)
        np.testing.assert_allclose(out, x[K:], rtol=0, atol=1e-8)

    def test_prefix_bit_identical_every_step(self):
        s = cosine_schedule(6)
        r = np.random.default_rng(2)
        for case in range(100):
            T = int(r.integers(2, 30))
            K = int(r.integers(0, T))
            prefix = r.standard_normal((K, 4))
            trace = []
            den = lambda z, tau, c: 0.3 * z + 0.1
            reverse_sample(prefix, None, s, den, SeededRng(case), T, trace=trace)
            assert len(trace) == s.L
            for z in trace:
                np.testing.assert_array_equal(z[:K], prefix)

    def test_denoiser_sees_clamped_prefix(self, rng):
        s = cosine_schedule(5)
        prefix = rng.standard_normal((7, 2))
        seen = []

        def den(z, tau, c):
            seen.append(z[:7].copy())
            return np.zeros_like(z)

        reverse_sample(prefix, None, s, den, SeededRng(0), 12)
        for p in seen:
            np.testing.assert_array_equal(p, prefix)

    def test_deterministic_flag(self):
        s = cosine_schedule(8)
        prefix = np.ones((3, 2))
        a = reverse_sample(prefix, None, s, zero_denoiser, SeededRng(1), 10, deterministic=True)
        b = reverse_sample(prefix, None, s, zero_denoiser, SeededRng(1), 10, deterministic=True)
        np.testing.assert_array_equal(a, b)

    def test_full_prefix_noop(self):
        out = reverse_sample(np.ones((10, 3)), None, cosine_schedule(4), zero_denoiser, SeededRng(0), 10)
        assert out.shape == (0, 3)

    def test_shape_mismatch(self):
        bad = lambda z, tau, c: np.zeros((z.shape[0] - 1, z.shape[1]))
        with pytest.raises(ValueError, match="shape"):
            reverse_sample(np.ones((3, 2)), None, cosine_schedule(4), bad, SeededRng(0), 10)

    def test_batched(self, rng):
        s = cosine_schedule(4)
        P = rng.standard_normal((5, 3, 2))
        out = reverse_sample(P, None, s, zero_denoiser, SeededRng(0), 9)
        assert out.shape == (5, 6, 2)

    def test_clip_bounds_final_sample(self):
        s = cosine_schedule(10)
        wild = lambda z, tau, c: -5.0 * np.ones_like(z)
        lo, hi = -np.ones(2), np.ones(2)
        out = reverse_sample(np.zeros((2, 2)), None, s, wild, SeededRng(0), 8, deterministic=True, clip=(lo, hi))
        assert np.all(out >= lo - 1e-9) and np.all(out <= hi + 1e-9)

    def test_reverse_mean_formula(self, rng):
        s = cosine_schedule(7)
        z, e = rng.standard_normal(5), rng.standard_normal(5)
        a, b, ab = s.alpha[3], s.beta[3], s.alpha_bar[3]
        np.testing.assert_allclose(reverse_mean(z, e, 3, s), (z - b / np.sqrt(1 - ab) * e) / np.sqrt(a))
