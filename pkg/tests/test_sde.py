import numpy as np
import pytest

from scorelab.datasets import GaussianMixture
from scorelab.errors import DivergenceError, ParameterError
from scorelab.sde import SamplerConfig, SdeSchedule, annealed_langevin, langevin, reverse_em

VE, SUBVP = SdeSchedule("ve"), SdeSchedule("subvp")


class TestSchedules:
    def test_ve_formulas(self):
        t = 0.3
        sig = 0.01 * 5000 ** t
        assert VE.marginal_std(t) == pytest.approx(sig, rel=1e-14)
        assert VE.diffusion(t) == pytest.approx(sig * np.sqrt(2 * np.log(5000)), rel=1e-14)
        assert VE.marginal_std(1.0) == pytest.approx(50.0, rel=1e-14)

    def test_ve_has_no_drift(self):
        x = np.random.default_rng(0).standard_normal((5, 2))
        assert not VE.drift(x, 0.4).any()

    def test_subvp_drift_example(self):
        # beta(0) = beta_min = 0.1
        np.testing.assert_allclose(SUBVP.drift(np.array([2.0, 0.0]), 0.0), [-0.1, 0.0])

    def test_subvp_formulas(self):
        t = 0.6
        B = 0.1 * t + 0.5 * t * t * 19.9
        beta = 0.1 + t * 19.9
        assert SUBVP.marginal_std(t) == pytest.approx(1 - np.exp(-B), rel=1e-14)
        assert SUBVP.diffusion(t) ** 2 == pytest.approx(beta * (1 - np.exp(-2 * B)), rel=1e-13)
        assert 1 - SUBVP.marginal_std(1.0) == pytest.approx(np.exp(-10.05), rel=1e-9)

    @pytest.mark.parametrize("sde", [VE, SUBVP])
    def test_drift_is_affine(self, sde):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((2, 3, 2))
        a = 1.7
        np.testing.assert_allclose(sde.drift(a * x + y, 0.5), a * sde.drift(x, 0.5) + sde.drift(y, 0.5), rtol=1e-14)

    @pytest.mark.parametrize("sde", [VE, SUBVP])
    def test_marginal_std_increasing(self, sde):
        s = sde.marginal_std(np.linspace(1e-3, 1.0, 1000))
        assert np.all(np.diff(s) > 0)

    def test_subvp_diffusion_matches_variance_ode(self):
        # d(var)/dt of the subVP marginal is -beta var + g^2, var = sigma_t^2 for x0 = 0
        t, h = 0.4, 1e-6
        var = lambda s: SUBVP.marginal_std(s) ** 2  # noqa: E731
        lhs = (var(t + h) - var(t - h)) / (2 * h)
        rhs = -SUBVP.beta(t) * var(t) + SUBVP.diffusion(t) ** 2
        assert lhs == pytest.approx(rhs, rel=1e-6)

    def test_time_range_checked(self):
        with pytest.raises(ParameterError):
            VE.marginal_std(0.0)
        with pytest.raises(ParameterError):
            VE.diffusion(1.5)
        with pytest.raises(ParameterError):
            VE.drift(np.zeros(2), -0.1)

    def test_invalid_parameters(self):
        with pytest.raises(ParameterError):
            SdeSchedule("vp")
        with pytest.raises(ParameterError):
            SdeSchedule("ve", sigma_min=1.0, sigma_max=0.5)
        with pytest.raises(ParameterError):
            SamplerConfig(steps=0)
        with pytest.raises(ParameterError):
            SamplerConfig(langevin_eps=0.0)

    def test_time_feature_range(self):
        assert VE.time_feature(VE.t_min) == pytest.approx(-0.5)
        assert VE.time_feature(1.0) == pytest.approx(0.5)


class TestPerturb:
    def test_zero_noise(self):
        x0 = np.array([[1.0, 2.0]])
        np.testing.assert_array_equal(VE.perturb(x0, 0.5, None, noise=np.zeros((1, 2))), x0)

    def test_empirical_std(self):
        x = VE.perturb(np.zeros((100_000, 1)), 0.3, np.random.default_rng(0))
        assert x.std() == pytest.approx(VE.marginal_std(0.3), rel=0.01)

    def test_deterministic(self):
        a = VE.perturb(np.zeros((4, 2)), 0.2, np.random.default_rng(3))
        b = VE.perturb(np.zeros((4, 2)), 0.2, np.random.default_rng(3))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("sde", [VE, SUBVP])
    def test_gmm_time_score_is_gradient_of_log_density(self, sde):
        gmm = GaussianMixture.ring()
        t = 0.05
        m, s = sde.mean_scale(t), sde.marginal_std(t)
        pt = GaussianMixture(gmm.weights, m * gmm.means, np.sqrt(m ** 2 * gmm.stds ** 2 + s ** 2))
        x = np.random.default_rng(4).uniform(-3, 3, (10, 2))
        h = 1e-5
        fd = np.stack([(pt.log_prob(x + h * e) - pt.log_prob(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
        an = gmm.time_score(x, sde, t)
        assert np.max(np.abs(fd - an)) / np.max(np.abs(an)) < 1e-4


class TestReverseEM:
    def test_identity_dynamics(self):
        x_T = np.random.default_rng(0).standard_normal((5, 2))
        out = reverse_em(VE, lambda x, t: np.zeros_like(x), x_T, 50, np.random.default_rng(1),
                         diffusion=lambda t: 0.0)
        np.testing.assert_array_equal(out, x_T)

    def test_gaussian_target_moments(self):
        rng = np.random.default_rng(2)
        score = lambda x, t: -x / (1.0 + VE.marginal_std(t) ** 2)  # noqa: E731
        x_T = np.sqrt(1 + 50.0 ** 2) * rng.standard_normal((10_000, 1))
        x = reverse_em(VE, score, x_T, 500, rng)
        assert abs(x.mean()) < 0.05
        assert abs(x.var() - 1.0) < 0.1

    def test_step_refinement(self):
        score = lambda x, t: -(x - 1.0) / (1.0 + VE.marginal_std(t) ** 2)  # noqa: E731
        means, ses = [], []
        for steps in (250, 500):
            rng = np.random.default_rng(steps)
            x = reverse_em(VE, score, 1.0 + 50 * rng.standard_normal((10_000, 1)), steps, rng)
            means.append(x.mean())
            ses.append(x.std() / 100)
        assert abs(means[0] - means[1]) < 3 * np.hypot(*ses)

    def test_divergence_reports_step(self):
        with pytest.raises(DivergenceError) as info:
            reverse_em(VE, lambda x, t: np.full_like(x, np.inf), np.zeros((2, 2)), 10, np.random.default_rng(0))
        assert info.value.step == 0

    def test_path(self):
        _, path = reverse_em(SUBVP, lambda x, t: -x, np.zeros((3, 2)), 7, np.random.default_rng(0),
                             return_path=True)
        assert len(path) == 8


class TestLangevin:
    def test_stationary_variance(self):
        eps = 0.1
        rng = np.random.default_rng(3)
        x = langevin(lambda y: -y, rng.standard_normal((10_000, 1)), eps, 1000, rng)
        assert x.var() == pytest.approx(1 / (1 - eps / 4), rel=0.1)

    def test_random_walk(self):
        rng = np.random.default_rng(4)
        x = langevin(lambda y: np.zeros_like(y), np.zeros((20_000, 1)), 0.1, 50, rng)
        assert x.var() == pytest.approx(5.0, rel=0.05)

    def test_zero_step_never_moves(self):
        x0 = np.ones((3, 2))
        np.testing.assert_array_equal(langevin(lambda y: -y, x0, 0.0, 10, None, noise=False), x0)

    def test_final_step_without_noise(self):
        x0 = np.ones((2, 2))
        rng = np.random.default_rng(5)
        out = langevin(lambda y: -y, x0, 0.1, 1, rng, final_noise=False)
        np.testing.assert_allclose(out, 0.95 * x0)

    def test_divergence(self):
        with pytest.raises(DivergenceError):
            langevin(lambda y: 100 * y, np.ones((1, 1)), 0.1, 100, np.random.default_rng(0))

    def test_annealed_reaches_target_scale(self):
        rng = np.random.default_rng(6)
        sigmas = np.geomspace(3.0, 0.5, 5)
        x = annealed_langevin(lambda y, s: -y / (1 + s ** 2), 3 * rng.standard_normal((5000, 1)),
                              sigmas, 0.05, 200, rng)
        assert x.var() == pytest.approx(1 + 0.25, rel=0.15)
