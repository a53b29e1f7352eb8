import math

import numpy as np
import pytest

from residiff.data import synth_generate
from residiff.diffusion import (
    Adam,
    MLPDenoiser,
    ddim_step,
    denoise,
    forward_diffuse,
    noise_loss,
    predict_r0,
    sample_ensemble,
    sample_noise,
    train_denoiser,
)
from residiff.errors import NumericalError
from residiff.point import fit_point_estimator, fit_sigma_trn, residuals
from residiff.schedule import build_cosine_kappa, build_linear_beta, build_uniform_kappa

# frozen after agreeing with loop_forward to 6e-17
GOLDEN_EPS_HAT = [-0.1272700120352746, 0.07906857445384671, -0.019968325380084584, 0.39478791112592426]


def loop_forward(p, dims, rk, k, x, y_hat):
    """Scalar-by-scalar evaluation of the denoiser on one window."""
    N, M, d, H, dk, K, nf = (dims[n] for n in ("N", "M", "d", "H", "d_k", "K", "n_freq"))
    L = N + 2 * M

    def act(v):
        return v * 0.5 * (1 + math.erf(v / math.sqrt(2)))

    rows = []
    for j in range(d):
        col = [x[t][j] for t in range(N)] + [y_hat[t][j] for t in range(M)]
        mu = sum(col) / len(col)
        sd = math.sqrt(sum((c - mu) ** 2 for c in col) / len(col))
        col = [(c - mu) / max(sd, 1e-6) for c in col] + [rk[t][j] for t in range(M)]
        rows.append([act(p["b1"][h] + sum(col[i] * p["W1"][i][h] for i in range(L))) for h in range(H)])
    freqs = [math.exp(-math.log(10000.0) * f / nf) for f in range(nf)]
    feats = [math.sin(k * w) for w in freqs] + [math.cos(k * w) for w in freqs]
    he = [act(p["be1"][h] + sum(feats[f] * p["We1"][f][h] for f in range(2 * nf))) for h in range(H)]
    flat = [p["be2"][c] + sum(he[h] * p["We2"][h][c] for h in range(H)) for c in range(dk * H)]
    rows += [flat[i * H:(i + 1) * H] for i in range(dk)]
    R = d + dk
    z5 = [[rows[r][h] + act(p["bm"][r] + sum(p["Wm"][r][s] * rows[s][h] for s in range(R)))
           for h in range(H)] for r in range(R)]
    zh = [[z5[r][h] + act(p["bh"][h] + sum(z5[r][g] * p["Wh"][g][h] for g in range(H)))
           for h in range(H)] for r in range(R)]
    return [[p["bo"][m] + sum(zh[j][h] * p["Wo"][h][m] for h in range(H)) + rk[m][j] * k / K
             for j in range(d)] for m in range(M)]


def golden_model():
    m = MLPDenoiser(3, 2, 2, H=4, d_k=2, K=50, n_freq=2, seed=1)
    rng = np.random.default_rng(0)
    for n in ("b1", "be1", "be2", "bm", "bh", "bo"):
        m.params[n] = rng.uniform(-0.5, 0.5, m.params[n].shape)
    x = rng.standard_normal((3, 2))
    y_hat = rng.standard_normal((2, 2))
    rk = rng.standard_normal((2, 2))
    return m, rk, x, y_hat


def eq8(r, r0, a, a_prev):
    # transcribed separately: mean of the sigma=0 reverse kernel
    return math.sqrt(a_prev) * r0 + math.sqrt(1 - a_prev) * (r - math.sqrt(a) * r0) / math.sqrt(1 - a)


class TestClosedForm:
    def test_hand_value(self):
        s = build_linear_beta(1, 0.19, 0.19)
        out = forward_diffuse(np.array([1.0]), 1, np.array([2.0]), s)
        assert out[0] == pytest.approx(0.9 + 2 * math.sqrt(0.19), abs=1e-15)

    def test_zero_signal(self):
        s = build_linear_beta(100)
        eps = np.random.default_rng(0).standard_normal((4, 2))
        np.testing.assert_allclose(forward_diffuse(np.zeros((4, 2)), 37, eps, s),
                                   math.sqrt(1 - s.abar(37)) * eps, rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros(3), 1, np.zeros(4), build_linear_beta(5))

    def test_round_trip(self):
        s = build_linear_beta(1000)
        rng = np.random.default_rng(1)
        for k in (1, 10, 500, 1000):
            r0, eps = rng.standard_normal((2, 24, 3))
            back = predict_r0(forward_diffuse(r0, k, eps, s), eps, k, s)
            np.testing.assert_allclose(back, r0, atol=1e-10)

    def test_per_row_steps(self):
        s = build_linear_beta(100)
        rng = np.random.default_rng(2)
        r0, eps = rng.standard_normal((2, 3, 4, 1))
        k = np.array([1, 50, 100])
        out = forward_diffuse(r0, k, eps, s)
        for b in range(3):
            np.testing.assert_allclose(out[b], forward_diffuse(r0[b], k[b], eps[b], s))

    def test_ddim_to_zero_returns_estimate(self):
        s = build_linear_beta(100)
        rng = np.random.default_rng(3)
        r, r0 = rng.standard_normal((2, 5, 2))
        np.testing.assert_array_equal(ddim_step(r, r0, 40, 0, s), r0)

    def test_ddim_noise_free_input(self):
        s = build_linear_beta(1000)
        r0 = np.random.default_rng(4).standard_normal(6)
        out = ddim_step(math.sqrt(s.abar(800)) * r0, r0, 800, 300, s)
        np.testing.assert_allclose(out, math.sqrt(s.abar(300)) * r0, rtol=1e-13)

    def test_ddim_matches_transcription(self):
        s = build_linear_beta(1000)
        rng = np.random.default_rng(5)
        r, r0 = rng.standard_normal(2)
        got = ddim_step(np.array([r]), np.array([r0]), 1000, 500, s)[0]
        assert got == pytest.approx(eq8(r, r0, s.abar(1000), s.abar(500)), abs=1e-14)

    def test_ddim_rejects_non_decreasing(self):
        s = build_linear_beta(10)
        with pytest.raises(ValueError):
            ddim_step(np.zeros(2), np.zeros(2), 5, 5, s)

    def test_single_hop_with_true_estimate(self):
        s = build_linear_beta(100)
        r0 = np.random.default_rng(6).standard_normal((3, 2))
        rK = forward_diffuse(r0, 100, np.ones_like(r0), s)
        np.testing.assert_array_equal(ddim_step(rK, r0, 100, 0, s), r0)

    def test_marginal_moments(self):
        s = build_linear_beta(1000)
        rng = np.random.default_rng(7)
        r0 = np.array([[1.5, -0.3], [0.0, 2.0]])
        n = 100_000
        for k in (10, 300, 1000):
            ab = s.abar(k)
            rk = forward_diffuse(np.broadcast_to(r0, (n, 2, 2)), k, rng.standard_normal((n, 2, 2)), s)
            assert np.all(np.abs(rk.mean(axis=0) - math.sqrt(ab) * r0) <= 3 * math.sqrt((1 - ab) / n))
            np.testing.assert_allclose(rk.var(axis=0), 1 - ab, rtol=0.05)

    def test_noise_correlation(self):
        s = build_linear_beta(1000)
        rng = np.random.default_rng(8)
        n = 100_000
        for k in (100, 500, 1000):
            r0, eps = rng.standard_normal((2, n))
            rk = forward_diffuse(r0, k, eps, s)
            assert abs(np.corrcoef(rk, eps)[0, 1] - math.sqrt(1 - s.abar(k))) <= 0.02


class TestDenoiser:
    def test_zero_weights_is_skip(self):
        m = MLPDenoiser(6, 4, 2, H=8, K=200).zero_()
        rng = np.random.default_rng(0)
        x, rk = rng.standard_normal((3, 6, 2)), rng.standard_normal((3, 4, 2))
        y_hat = rng.standard_normal((3, 4, 2))
        np.testing.assert_allclose(m(rk, 50, x, y_hat), rk * 0.25, rtol=1e-15)
        np.testing.assert_array_equal(denoise(m, rk, 200, x, y_hat), rk)

    def test_golden_vector(self):
        m, rk, x, y_hat = golden_model()
        got = m(rk, 17, x, y_hat)
        ref = loop_forward({k: v.tolist() for k, v in m.params.items()}, m.dims(),
                           rk.tolist(), 17, x.tolist(), y_hat.tolist())
        np.testing.assert_allclose(got, ref, atol=1e-13)
        np.testing.assert_allclose(got.ravel(), GOLDEN_EPS_HAT, rtol=1e-12)

    def test_batched_matches_single(self):
        m, _, _, _ = golden_model()
        rng = np.random.default_rng(1)
        x, y_hat, rk = rng.standard_normal((4, 3, 2)), rng.standard_normal((4, 2, 2)), rng.standard_normal((4, 2, 2))
        k = np.array([1, 7, 30, 50])
        batched = m(rk, k, x, y_hat)
        for b in range(4):
            np.testing.assert_allclose(batched[b], m(rk[b], k[b], x[b], y_hat[b]), atol=1e-15)

    def test_dimension_mismatch(self):
        m = MLPDenoiser(6, 4, 2, H=8)
        with pytest.raises(ValueError):
            m(np.zeros((1, 4, 3)), 1, np.zeros((1, 6, 3)), np.zeros((1, 4, 3)))

    def test_init_is_seeded(self):
        a, b = MLPDenoiser(5, 3, 1, seed=4), MLPDenoiser(5, 3, 1, seed=4)
        for n in MLPDenoiser.param_names:
            np.testing.assert_array_equal(a.params[n], b.params[n])
        assert np.all(np.abs(a.params["W1"]) <= 1 / math.sqrt(5 + 6))


def finite_difference_check(model, objective, h=1e-5):
    worst = 0.0
    for name in MLPDenoiser.param_names:
        w = model.params[name]
        fd = np.empty_like(w)
        for i in np.ndindex(w.shape):
            old = w[i]
            w[i] = old + h
            up = objective()[0]
            w[i] = old - h
            down = objective()[0]
            w[i] = old
            fd[i] = (up - down) / (2 * h)
        grad = objective()[1][name]
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-8)
        worst = max(worst, rel)
    return worst


def random_toy(seed):
    rng = np.random.default_rng(seed)
    N, M, d = rng.integers(2, 5), rng.integers(1, 4), rng.integers(1, 3)
    m = MLPDenoiser(N, M, d, H=int(rng.integers(2, 5)), d_k=int(rng.integers(1, 3)), K=20,
                    n_freq=2, seed=seed)
    for n in m.param_names:
        m.params[n] = rng.uniform(-1, 1, m.params[n].shape)
    B = 3
    x, y_hat = rng.standard_normal((B, N, d)), rng.standard_normal((B, M, d))
    rk, G = rng.standard_normal((B, M, d)), rng.standard_normal((B, M, d))
    k = rng.integers(1, 21, size=B)
    return m, rk, k, x, y_hat, G


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    m, rk, k, x, y_hat, G = random_toy(seed)

    def objective():
        out, cache = m.forward(rk, k, x, y_hat)
        return float(np.sum(out * G)), m.backward(cache, G)

    assert finite_difference_check(m, objective) <= 1e-4


def test_noise_loss_gradient():
    m, rk, k, x, y_hat, _ = random_toy(99)
    sched = build_linear_beta(20)
    eps = np.random.default_rng(0).standard_normal(rk.shape)

    def objective():
        return noise_loss(m, x, y_hat, rk, k, eps, sched)

    assert finite_difference_check(m, objective) <= 1e-4


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0])}
    Adam(params, lr=0.1, weight_decay=0.0).step({"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-7)


def ar1_training_set(N=24, M=8):
    ds = synth_generate("ar1", 1200, 1, seed=3)
    x, y, _ = ds.windows("train", N, M, 2)
    xv, yv, _ = ds.windows("val", N, M, 1)
    point = fit_point_estimator(x, y, "linear_l1", epochs=50)
    r = residuals(point, x, y)
    sigma = fit_sigma_trn(r)
    return (x, point.predict(x), r / sigma), (xv, point.predict(xv), residuals(point, xv, yv) / sigma)


class TestTraining:
    def test_constant_residuals_loss_descends(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((64, 8, 1))
        y_hat = rng.standard_normal((64, 4, 1))
        m = MLPDenoiser(8, 4, 1, H=16, K=50, seed=0)
        hist = train_denoiser(m, x, y_hat, np.zeros((64, 4, 1)), build_linear_beta(50),
                              epochs=30, lr=2e-3)
        assert hist["train"][-1] < hist["train"][0]

    def test_ar1_validation_loss_drops(self):
        (x, y_hat, r0), val = ar1_training_set()
        m = MLPDenoiser(24, 8, 1, H=16, K=1000, seed=0)
        hist = train_denoiser(m, x, y_hat, r0, build_linear_beta(1000), epochs=200, lr=1e-3, val=val)
        assert len(hist["val"]) == 201
        assert hist["val"][-1] <= 0.8 * hist["val"][0]

    def test_non_finite_loss_aborts(self):
        m = MLPDenoiser(4, 2, 1, H=4, K=10)
        m.params["Wo"][:] = np.nan
        with pytest.raises(NumericalError):
            train_denoiser(m, np.ones((4, 4, 1)), np.ones((4, 2, 1)), np.ones((4, 2, 1)),
                           build_linear_beta(10), epochs=1)


class TestSampling:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x = rng.standard_normal((5, 6, 2))
        self.y_hat = rng.standard_normal((5, 3, 2))
        self.sigma = rng.uniform(0.5, 2, size=(3, 2))
        self.sched = build_linear_beta(100)

    def test_skip_only_single_step(self):
        m = MLPDenoiser(6, 3, 2, K=100).zero_()
        ens = sample_ensemble(m, self.x, self.y_hat, self.sigma, self.sched,
                              build_cosine_kappa(100, 1), 7, seed=3)
        ab = self.sched.abar(100)
        noise = sample_noise((5, 3, 2), 7, 3)
        np.testing.assert_allclose(ens, noise * (1 - math.sqrt(1 - ab)) / math.sqrt(ab) * self.sigma,
                                   rtol=1e-13)

    def test_zero_estimator_variance(self):
        sched, kappa = self.sched, build_uniform_kappa(100, 5)
        ens = sample_ensemble(lambda r, k, x, y: np.zeros_like(r), np.zeros((2000, 6, 1)),
                              np.zeros((2000, 3, 1)), np.ones((3, 1)), sched, kappa, 10, seed=1)
        chain = [0] + list(kappa.kappa)
        coef = 1.0
        for i in range(len(chain) - 1, 0, -1):
            coef *= math.sqrt(sched.abar(chain[i - 1]) / sched.abar(chain[i]))
        assert coef ** 2 == pytest.approx(1 / sched.abar(100), rel=1e-12)
        np.testing.assert_allclose(ens.var(axis=(0, 1)), coef ** 2, rtol=0.03)

    def test_deterministic_and_thread_invariant(self):
        m = MLPDenoiser(6, 3, 2, H=8, K=100, seed=2)
        kappa = build_cosine_kappa(100, 4)
        a = sample_ensemble(m, self.x, self.y_hat, self.sigma, self.sched, kappa, 1, seed=9)
        b = sample_ensemble(m, self.x, self.y_hat, self.sigma, self.sched, kappa, 1, seed=9)
        np.testing.assert_array_equal(a, b)
        c = sample_ensemble(m, self.x, self.y_hat, self.sigma, self.sched, kappa, 6, seed=9)
        d = sample_ensemble(m, self.x, self.y_hat, self.sigma, self.sched, kappa, 6, seed=9,
                            n_jobs=3, chunk=4)
        np.testing.assert_array_equal(c, d)
        np.testing.assert_array_equal(c[:, 0], a[:, 0])

    def test_trajectory_states(self):
        m = MLPDenoiser(6, 3, 2, H=8, K=100, seed=2)
        kappa = build_cosine_kappa(100, 4)
        final, traj = sample_ensemble(m, self.x, self.y_hat, self.sigma, self.sched, kappa, 3,
                                      seed=1, trajectory=True)
        assert len(traj) == 5
        np.testing.assert_array_equal(traj[-1], final)
        np.testing.assert_allclose(traj[0], sample_noise((5, 3, 2), 3, 1) * self.sigma)

    def test_nan_reports_step(self):
        with pytest.raises(NumericalError, match="step 100"):
            sample_ensemble(lambda r, k, x, y: np.full_like(r, np.nan), self.x, self.y_hat,
                            self.sigma, self.sched, build_cosine_kappa(100, 3), 2)
