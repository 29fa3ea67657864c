import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from _fd import central_diff, rel_err
from ddrnerf.ddr import (
    DensityLossConfig, GumbelConfig, TriangularMixture, composite_sample, density_loss, draw_noise, gumbel_max,
    gumbel_noise, gumbel_softmax, mixture_pdf, normalize_weights, sample_triangle, weight_loss,
)
from ddrnerf.errors import DomainError, ShapeMismatchError
from ddrnerf.render import RaySampling, WeightDistribution


def mix(w, t=None, hw=0.1):
    w = np.asarray(w, float)
    t = np.arange(len(w)) * hw if t is None else np.asarray(t, float)
    return TriangularMixture(t, hw, normalize_weights(w))


class TestMixture:
    def test_peak(self):
        m = mix([0, 0, 1.0, 0])
        assert mixture_pdf(m, 0.2) == pytest.approx(1 / 0.1, rel=1e-6)

    def test_outside_support(self):
        assert mixture_pdf(mix([0.5, 0.5]), 5.0) == 0

    def test_linear_interpolation_midway(self):
        # each leg evaluates to w_i (1 - 1/2) / hw; sum = (w_0 + w_1) / (2 hw)
        m = mix([0.3, 0.7], hw=0.1)
        assert mixture_pdf(m, 0.05) == pytest.approx((0.3 + 0.7) / 2 / 0.1, rel=1e-6)
        assert mixture_pdf(m, 0.025) == pytest.approx((0.75 * 0.3 + 0.25 * 0.7) / 0.1, rel=1e-6)

    def test_integrates_to_one(self, rng):
        for _ in range(20):
            m = mix(rng.random(12), hw=0.05)
            x = np.linspace(-0.1, 0.7, 10_000)
            assert np.trapezoid(mixture_pdf(m, x), x) == pytest.approx(1.0, abs=1e-4)

    def test_normalization_floor(self):
        w = normalize_weights(np.zeros(4))
        np.testing.assert_allclose(w, 0.25)


class TestGumbel:
    def test_values(self):
        assert gumbel_noise(np.exp(-1)) == pytest.approx(0.0, abs=1e-15)
        assert gumbel_noise(np.exp(-np.e)) == pytest.approx(-1.0, rel=1e-12)
        u = np.linspace(0.01, 0.999999, 50)
        assert np.all(np.diff(gumbel_noise(u)) > 0)

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.5, 1.5])
    def test_domain(self, u):
        with pytest.raises(DomainError):
            gumbel_noise(u)

    def test_uniform_symmetry(self):
        np.testing.assert_allclose(gumbel_softmax(np.full(5, 0.2), np.zeros(5)), 0.2)

    def test_zero_temperature_limit(self, rng):
        w, g = normalize_weights(rng.random(6)), rng.gumbel(size=6)
        out = gumbel_softmax(w, g, 1e-4)
        assert out[np.argmax(g + np.log(w))] == pytest.approx(1.0)

    @given(arrays(float, 7, elements=st.floats(1e-6, 1.0)), st.floats(1e-3, 1e3),
           arrays(float, 7, elements=st.floats(-5, 5)))
    def test_scale_invariance_and_sum(self, w, k, g):
        a = gumbel_softmax(w, g, 2.0)
        b = gumbel_softmax(w * k, g, 2.0)
        assert a.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(a > 0)
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-15)

    def test_temperature_sharpening(self, rng):
        w, g = normalize_weights(rng.random(8)), rng.gumbel(size=8)
        tops = [gumbel_softmax(w, g, e).max() for e in (2, 0.5, 0.1, 0.01)]
        assert all(b >= a for a, b in zip(tops, tops[1:]))
        assert tops[-1] > 0.99

    def test_gumbel_max_matches_categorical(self, rng):
        w = np.array([0.05, 0.1, 0.25, 0.6])
        u = rng.random((100_000, 4))
        counts = np.bincount(gumbel_max(w, gumbel_noise(u)), minlength=4)
        assert stats.chisquare(counts, 100_000 * w).pvalue > 0.01

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            gumbel_softmax(np.ones(3), np.ones(4))


class TestTriangle:
    def test_median(self):
        assert sample_triangle(2.0, 0.5, 0.5) == pytest.approx(2.0)

    def test_eighth(self):
        assert sample_triangle(2.0, 0.5, 0.125) == pytest.approx(2.0 - 0.25)

    def test_endpoints(self):
        assert sample_triangle(2.0, 0.5, 1e-15) == pytest.approx(1.5, abs=1e-6)
        assert sample_triangle(2.0, 0.5, 1 - 1e-15) == pytest.approx(2.5, abs=1e-6)

    def test_domain(self):
        with pytest.raises(DomainError):
            sample_triangle(0.0, 1.0, 0.0)

    def test_distribution(self, rng):
        x = sample_triangle(0.0, 1.0, rng.random(50_000) + 1e-17)
        assert stats.kstest(x, stats.triang(c=0.5, loc=-1, scale=2).cdf).pvalue > 0.01


class TestCompositeSample:
    def test_cases(self):
        assert composite_sample([0, 1.0, 0], [1, 2, 3]) == 2
        assert composite_sample([0.5, 0.5], [0.2, 0.8]) == pytest.approx(0.5)
        assert composite_sample([0.7, 0.2, 0.1], [1, 2, 3]) == pytest.approx(1.4)

    def test_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            composite_sample([1.0], [1, 2])

    def test_expectation_low_temperature(self, rng):
        t = np.linspace(0, 1, 16)
        w = normalize_weights(np.exp(-((t - 0.4) ** 2) / 0.01))
        n = 100_000
        ug, ut = rng.random((n, 16)) + 1e-17, rng.random((n, 16)) + 1e-17
        T = composite_sample(gumbel_softmax(w, gumbel_noise(ug), 0.01), sample_triangle(t, t[1] - t[0], ut))
        se = T.std() / np.sqrt(n)
        assert abs(T.mean() - w @ t) < 2 * se


class TestWeightLoss:
    t = np.linspace(0.05, 0.75, 8)
    hw = 0.1

    def test_one_hot_at_target(self, rng):
        # Monte-Carlo oracle: E|X| of a symmetric triangle of half-width h is h/3
        w = np.zeros(8)
        w[4] = 1.0
        cfg = GumbelConfig(epsilon=1e-3, n_samples=20_000)
        r = weight_loss(WeightDistribution(self.t, w), self.t[4], cfg, rng, half_width=self.hw)
        assert r.loss == pytest.approx(self.hw / 3, rel=0.02)

    def test_unimodal_beats_bimodal(self):
        n = 10**6
        rng = np.random.default_rng(7)
        cfg = GumbelConfig(n_samples=n)
        uni = np.zeros(8)
        uni[4] = 1.0
        bi = np.zeros(8)
        bi[[2, 6]] = 0.5  # same expectation t[4]
        noise = draw_noise(rng, n, 8)
        a = weight_loss(WeightDistribution(self.t, uni), self.t[4], cfg, noise=noise, half_width=self.hw).loss
        b = weight_loss(WeightDistribution(self.t, bi), self.t[4], cfg, noise=noise, half_width=self.hw).loss
        assert a < b

    def test_gradient_common_random_numbers(self, rng):
        cfg = GumbelConfig(n_samples=30)
        worst = 0.0
        for _ in range(10):
            w = rng.uniform(0.05, 1.0, 8) / 4
            gt = rng.uniform(0.1, 0.7)
            noise = draw_noise(rng, 30, 8)

            def f(x):
                return weight_loss(WeightDistribution(self.t, x), gt, cfg, noise=noise, half_width=self.hw).loss

            g = weight_loss(WeightDistribution(self.t, w), gt, cfg, noise=noise, half_width=self.hw).grad
            worst = max(worst, rel_err(g, central_diff(f, w, 1e-7)))
        assert worst < 1e-3

    def test_one_hot_is_minimizer(self, rng):
        cfg = GumbelConfig(epsilon=0.1, n_samples=20_000)
        noise = draw_noise(np.random.default_rng(3), 20_000, 8)
        base = np.zeros(8)
        base[4] = 1.0

        def loss(w):
            return weight_loss(WeightDistribution(self.t, w), self.t[4], cfg, noise=noise, half_width=self.hw).loss

        best = loss(base)
        for _ in range(100):
            # mass moved symmetrically off the centre keeps the mean at t[4]
            k = int(rng.integers(1, 4))
            a = rng.uniform(0.02, 0.5)
            w = base.copy()
            w[4] -= a
            w[4 - k] += a / 2
            w[4 + k] += a / 2
            assert loss(w) > best

    def test_skip_empty(self):
        r = weight_loss(WeightDistribution(self.t, np.zeros(8)), 0.3)
        assert r.skipped and r.loss == 0 and not np.any(r.grad)


class TestDensityLoss:
    s = RaySampling(np.arange(10) * 0.1 + 0.05, np.full(10, 0.1))

    def test_empty(self):
        assert density_loss(self.s, np.zeros(10), 0.6).loss == 0

    def test_three_before_margin(self):
        sig = np.zeros(10)
        sig[[0, 1, 2]] = 1.0
        sig[5] = 9.0  # inside the margin
        r = density_loss(self.s, sig, 0.6, DensityLossConfig(2))
        assert r.loss == pytest.approx(3.0)

    def test_boundary_before_near(self):
        assert density_loss(self.s, np.ones(10), 0.0).loss == 0

    def test_gradient_is_indicator(self, rng):
        sig = rng.exponential(size=10)
        r = density_loss(self.s, sig, 0.6)
        np.testing.assert_array_equal(r.grad, (self.s.t < 0.4).astype(float))
        fd = central_diff(lambda x: density_loss(self.s, x, 0.6).loss, sig)
        np.testing.assert_allclose(r.grad, fd, atol=1e-8)

    def test_negative_margin(self):
        with pytest.raises(ValueError):
            DensityLossConfig(-1)


@pytest.mark.parametrize("kw", [{"epsilon": 0}, {"n_samples": 0}, {"weight_floor": 0}])
def test_gumbel_config_invariants(kw):
    with pytest.raises(ValueError):
        GumbelConfig(**kw)
