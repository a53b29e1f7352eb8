import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from residiff.data import synth_generate
from residiff.errors import ConfigurationError
from residiff.point import (
    LinearL1,
    SeasonalNaive,
    fit_point_estimator,
    fit_sigma_trn,
    gaussian_baseline_ensemble,
    residuals,
    restore_point_estimator,
)


def test_seasonal_naive_repeats_last_cycle():
    x = np.arange(12.0).reshape(1, 12, 1)
    est = SeasonalNaive(4, 12, 6, 1)
    np.testing.assert_array_equal(est.predict(x).ravel(), [8, 9, 10, 11, 8, 9])


def test_seasonal_naive_exact_on_clean_sinusoid():
    ds = synth_generate("sinusoid_noise", 600, 2, seed=1, noise=0.0)
    x, y, _ = ds.windows("test", 48, 24)
    est = fit_point_estimator(*ds.windows("train", 48, 24)[:2], "seasonal_naive", period=24)
    assert np.mean(np.abs(est.predict(x) - y)) < 1e-8


def test_seasonal_period_validated():
    with pytest.raises(ConfigurationError):
        SeasonalNaive(30, 24, 4, 1)


def test_linear_recovers_realizable_map():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((2, 3, 5)) / 3
    b = rng.standard_normal((2, 3))
    x = rng.standard_normal((300, 5, 2))
    y = np.einsum("jmn,bnj->bmj", W, x) + b.T[None]
    est = fit_point_estimator(x, y, "linear_l1", epochs=50)
    assert est.mae(x, y) < 1e-3


def test_linear_l1_targets_the_median():
    # skewed noise: mean and median differ, an L1 fit should follow the median
    rng = np.random.default_rng(1)
    x = np.ones((4000, 1, 1))
    y = rng.exponential(1.0, size=(4000, 1, 1))
    est = LinearL1(1, 1, 1).fit(x, y, epochs=400)
    pred = est.predict(x[:1]).item()
    assert abs(pred - np.log(2)) < 0.05
    assert abs(pred - 1.0) > 0.2


def test_linear_loss_never_increases():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((200, 8, 1))
    y = x[:, -3:] * 0.5 + rng.laplace(size=(200, 3, 1))
    est = LinearL1(8, 3, 1).fit(x, y, epochs=100)
    assert len(est.history) > 1
    assert np.all(np.diff(est.history) <= 1e-15)


def test_linear_round_trip_through_params():
    rng = np.random.default_rng(3)
    est = LinearL1(4, 2, 1)
    est.weight = rng.standard_normal(est.weight.shape)
    est.bias = rng.standard_normal(est.bias.shape)
    back = restore_point_estimator(est.meta(), est.params())
    x = rng.standard_normal((5, 4, 1))
    np.testing.assert_array_equal(back.predict(x), est.predict(x))


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        fit_point_estimator(np.zeros((2, 3, 1)), np.zeros((2, 1, 1)), "arima")


def test_residuals_are_differences():
    est = SeasonalNaive(1, 3, 2, 1)
    x = np.array([[[1.0], [2.0], [3.0]]])
    y = np.array([[[5.0], [1.0]]])
    np.testing.assert_array_equal(residuals(est, x, y), [[[2.0], [-2.0]]])


class TestSigma:
    def test_constant_residual(self):
        np.testing.assert_allclose(fit_sigma_trn(np.full((7, 2, 1), -3.0)), 3.0)

    def test_gaussian_scale(self):
        r = np.random.default_rng(4).normal(0, 2, size=(10_000, 3, 2))
        s = fit_sigma_trn(r)
        assert np.all((s >= 1.94) & (s <= 2.06))

    def test_floor(self):
        assert np.all(fit_sigma_trn(np.zeros((4, 2, 2))) == 1e-6)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        r = rng.standard_normal((50, 4, 2))
        np.testing.assert_allclose(fit_sigma_trn(r[rng.permutation(50)]), fit_sigma_trn(r), rtol=1e-14)

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            fit_sigma_trn(np.zeros((4, 2)))


class TestGaussianBaseline:
    def test_moments(self):
        y_hat = np.array([[[1.0, -1.0], [0.0, 2.0]]])
        sigma = np.array([[0.5, 1.0], [2.0, 0.1]])
        ens = gaussian_baseline_ensemble(y_hat, sigma, 20_000, np.random.default_rng(5))
        assert ens.shape == (1, 20_000, 2, 2)
        np.testing.assert_allclose(ens.std(axis=1)[0], sigma, rtol=0.02)
        assert np.all(np.abs(ens.mean(axis=1)[0] - y_hat[0]) <= 3 * sigma / np.sqrt(20_000))

    def test_tiny_sigma_collapses(self):
        y_hat = np.ones((2, 3, 1))
        ens = gaussian_baseline_ensemble(y_hat, np.full((3, 1), 1e-12), 5, np.random.default_rng(0))
        np.testing.assert_allclose(ens, 1.0, atol=1e-10)

    def test_seeded(self):
        y_hat = np.zeros((3, 2))
        a = gaussian_baseline_ensemble(y_hat, np.ones((3, 2)), 4, np.random.default_rng(9))
        b = gaussian_baseline_ensemble(y_hat, np.ones((3, 2)), 4, np.random.default_rng(9))
        assert a.shape == (4, 3, 2)
        np.testing.assert_array_equal(a, b)
