import itertools

import numpy as np
import pytest

from scorelab import autodiff as ad
from scorelab import objectives as ob
from scorelab.errors import CapabilityError, ContractError, ParameterError
from scorelab.nets import MlpConfig, ScoreNet, init
from scorelab.sde import SdeSchedule

from conftest import central_diff, rel_err

DIAG = np.diag([-1.0, -2.0])
GENERAL = np.array([[-1.0, 0.4], [0.7, -2.5]])


def value(fn, *args, **kw):
    with ad.Tape():
        return float(fn(*args, **kw).data)


def signs(d=2):
    return [np.array(u) for u in itertools.product((-1.0, 1.0), repeat=d)]


def fd_jacobian(net, x, h=1e-6):
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((net.score(x + e) - net.score(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


class TestSpecs:
    def test_projection_second_moment(self):
        rng = np.random.default_rng(0)
        for dist in ("rademacher", "gaussian"):
            v = ob.ProjectionSampler(dist, epsilon=0.3).draw((200_000, 3), rng)
            second = v.T @ v / len(v)
            np.testing.assert_allclose(second, 0.09 / 3 * np.eye(3), atol=4 * 0.09 / 3 * np.sqrt(2 / 200_000) * 3)

    def test_objective_spec_invariants(self):
        with pytest.raises(ParameterError):
            ob.ObjectiveSpec("DSM", sigma=0.0)
        with pytest.raises(ParameterError):
            ob.ObjectiveSpec("SSM", epsilon=-1.0)
        with pytest.raises(ParameterError):
            ob.ObjectiveSpec("LCSS", mc_samples=0)
        with pytest.raises(ParameterError):
            ob.ObjectiveSpec("LCSS_GAMMA", gamma=np.inf)
        with pytest.raises(ParameterError):
            ob.ObjectiveSpec("FOO")


class TestExactScoreMatching:
    def test_trace_only_at_origin(self, diag_net):
        assert value(ob.sm_exact, diag_net, np.zeros(2)) == -3.0

    def test_standard_normal_score(self):
        assert value(ob.sm_exact, ScoreNet.linear(-np.eye(2)), np.ones(2)) == -1.0

    def test_mlp_against_finite_differences(self, small_mlp):
        x = np.array([0.3, -0.8])
        expected = np.trace(fd_jacobian(small_mlp, x)) + 0.5 * np.sum(small_mlp.score(x) ** 2)
        assert value(ob.sm_exact, small_mlp, x) == pytest.approx(expected, rel=1e-4)

    def test_energy_mlp_against_finite_differences(self, energy_mlp):
        x = np.array([-0.5, 0.9])
        expected = np.trace(fd_jacobian(energy_mlp, x)) + 0.5 * np.sum(energy_mlp.score(x) ** 2)
        assert value(ob.sm_exact, energy_mlp, x) == pytest.approx(expected, rel=1e-4)

    def test_dimension_limit(self):
        net = ScoreNet.linear(-np.eye(17))
        with pytest.raises(CapabilityError):
            value(ob.sm_exact, net, np.zeros(17))
        with pytest.raises(CapabilityError):
            value(ob.lcs_exact, net, np.zeros(17), 0.1)


class TestSlicedScoreMatching:
    def test_diagonal_rademacher_is_constant(self, diag_net):
        for u in signs():
            assert value(ob.ssm, diag_net, np.zeros(2), noise=u / np.sqrt(2)) == pytest.approx(-1.5, abs=1e-15)

    def test_enumeration_gives_half_trace(self):
        net = ScoreNet.linear(GENERAL)
        vals = [value(ob.ssm, net, np.zeros(2), noise=u / np.sqrt(2)) for u in signs()]
        assert np.mean(vals) == pytest.approx(np.trace(GENERAL) / 2, abs=1e-14)

    def test_expectation_is_exact_over_d(self):
        net = ScoreNet.linear(GENERAL)
        n = 100_000
        x = np.tile([0.6, -1.1], (n, 1))
        rng = np.random.default_rng(1)
        for dist in ("rademacher", "gaussian"):
            sampler = ob.ProjectionSampler(dist)
            v = sampler.draw(x.shape, rng)
            with ad.Tape():
                first, second = ob.ssm_terms(net, x, v, 1.0)
            rows = first.data + second.data
            target = value(ob.sm_exact, net, x[0]) / 2
            assert abs(rows.mean() - target) < 3 * rows.std(ddof=1) / np.sqrt(n)

    def test_epsilon_cancels(self, small_mlp):
        x = np.random.default_rng(2).standard_normal((5, 2))
        u = np.sign(np.random.default_rng(3).standard_normal((5, 2)))
        a = value(ob.ssm, small_mlp, x, ob.ProjectionSampler(epsilon=1.0), noise=u / np.sqrt(2))
        b = value(ob.ssm, small_mlp, x, ob.ProjectionSampler(epsilon=0.1), noise=0.1 * u / np.sqrt(2))
        assert a == pytest.approx(b, rel=1e-12)


class TestFiniteDifferenceSSM:
    def test_diagonal_example(self, diag_net):
        eps = 0.1
        v = eps / np.sqrt(2) * np.ones(2)
        got = value(ob.fd_ssm, diag_net, np.zeros(2), ob.ProjectionSampler(epsilon=eps), noise=v)
        assert got == pytest.approx(-1.5, abs=1e-12)

    def test_first_term_exact_for_linear_nets(self):
        net = ScoreNet.linear(GENERAL, np.array([0.3, -0.2]))
        rng = np.random.default_rng(4)
        x = rng.standard_normal((64, 2))
        for eps in (1e-2, 0.1, 1.0):
            v = ob.ProjectionSampler(epsilon=eps).draw(x.shape, rng)
            with ad.Tape():
                a = ob.ssm_terms(net, x, v, eps)[0].data
                b = ob.fd_ssm_terms(net, x, v, eps)[0].data
            np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-12)

    def test_gap_is_second_order(self, small_mlp):
        x = np.array([[0.2, 0.5], [-0.7, 0.1]])
        u = np.array([[1.0, -1.0], [1.0, 1.0]]) / np.sqrt(2)

        def gap(eps):
            s = ob.ProjectionSampler(epsilon=eps)
            return abs(value(ob.fd_ssm, small_mlp, x, s, noise=eps * u) - value(ob.ssm, small_mlp, x, s, noise=eps * u))

        ratio = gap(1e-3) / gap(5e-4)
        assert 3.5 < ratio < 4.5


class TestDenoising:
    def test_target_formula(self):
        np.testing.assert_array_equal(ob.dsm_target([1.0, 0.0], [1.5, 0.0], 0.5), [-2.0, 0.0])

    def test_zero_net(self):
        net = ScoreNet.linear(np.zeros((2, 2)))
        z = np.array([0.3, -1.2])
        assert value(ob.dsm, net, np.zeros(2), 0.5, noise=z) == pytest.approx(0.5 * z @ z / 0.25)

    def test_perfect_oracle(self):
        # s(x~) = (x0 - x~) / sigma^2 with x0 = 0 is the linear map -I / sigma^2
        sigma = 0.5
        net = ScoreNet.linear(-np.eye(2) / sigma ** 2)
        assert value(ob.dsm, net, np.zeros((3, 2)), sigma, noise=np.ones((3, 2))) == pytest.approx(0.0, abs=1e-14)

    def test_sigma_must_be_positive(self, diag_net):
        with pytest.raises(ParameterError):
            value(ob.dsm, diag_net, np.zeros(2), 0.0, rng=np.random.default_rng(0))


class TestLocalCurvatureSmoothing:
    def test_lcs_exact_example(self, diag_net):
        assert value(ob.lcs_exact, diag_net, np.ones(2), 0.5) == pytest.approx(0.125, abs=1e-15)

    def test_lcs_sigma_zero_is_sm(self, small_mlp):
        x = np.array([0.1, 0.4])
        assert value(ob.lcs_exact, small_mlp, x, 0.0) == value(ob.sm_exact, small_mlp, x)

    def test_frobenius_against_finite_differences(self, small_mlp):
        x = np.array([0.9, -0.3])
        sigma = 0.7
        reg = value(ob.lcs_exact, small_mlp, x, sigma) - value(ob.sm_exact, small_mlp, x)
        expected = 0.5 * sigma ** 2 * np.sum(fd_jacobian(small_mlp, x) ** 2)
        assert reg == pytest.approx(expected, rel=1e-4)

    def test_lcss_mean_matches_lcs_exact(self, diag_net):
        n = 1_000_000
        x = np.ones((n, 2))
        with ad.Tape():
            rows = ob.lcss_rows(diag_net, x, np.random.default_rng(5).standard_normal((n, 2)), 0.5).data
        assert abs(rows.mean() - 0.125) < 3 * rows.std(ddof=1) / np.sqrt(n)

    def test_zero_net_gives_zero(self):
        net = ScoreNet.linear(np.zeros((2, 2)))
        assert value(ob.lcss, net, np.ones((4, 2)), 0.3, rng=np.random.default_rng(0)) == 0.0

    def test_gamma_one_bit_equal(self, small_mlp):
        z = np.random.default_rng(6).standard_normal((8, 2))
        x = np.random.default_rng(7).standard_normal((8, 2))
        assert value(ob.lcss, small_mlp, x, 0.2, noise=z) == value(ob.lcss, small_mlp, x, 0.2, gamma=1.0, noise=z)

    def test_gamma_weights_inner_product(self, small_mlp):
        z = np.random.default_rng(8).standard_normal((8, 2))
        x = np.zeros((8, 2))
        base = value(ob.lcss, small_mlp, x, 0.2, gamma=0.0, noise=z)
        one = value(ob.lcss, small_mlp, x, 0.2, noise=z)
        two = value(ob.lcss, small_mlp, x, 0.2, gamma=2.0, noise=z)
        assert two - base == pytest.approx(2 * (one - base), rel=1e-12)

    def test_mc_samples_is_mean_of_single_draws(self, small_mlp):
        x = np.random.default_rng(9).standard_normal((5, 2))
        k = 3
        multi = value(ob.lcss, small_mlp, x, 0.3, rng=np.random.default_rng(11), mc_samples=k)
        rng = np.random.default_rng(11)
        with ad.Tape():
            singles = [ob.lcss(small_mlp, x, 0.3, rng=rng) for _ in range(k)]
            total = singles[0]
            for s in singles[1:]:
                total = ad.add(total, s)
            mean = float(ad.scale(total, 1.0 / k).data)
        assert multi == mean

    def test_sigma_must_be_positive(self, diag_net):
        with pytest.raises(ParameterError):
            value(ob.lcss, diag_net, np.zeros(2), -0.1, rng=np.random.default_rng(0))

    def test_needs_noise_source(self, diag_net):
        with pytest.raises(ContractError):
            value(ob.lcss, diag_net, np.zeros(2), 0.1)


def _theta_grad(net, build):
    with ad.Tape():
        return net.flatten(ad.backward(build(net), net.leaves))


def _fd_theta(net, build):
    def f(theta):
        with ad.Tape():
            return float(build(ScoreNet(net.config, theta, net.sde)).data)
    return central_diff(f, net.theta, h=1e-6)


class TestParameterGradients:
    rng = np.random.default_rng(12)
    x = rng.standard_normal((4, 2))
    z = rng.standard_normal((4, 2))
    v = ob.ProjectionSampler(epsilon=0.5).draw((4, 2), rng)

    @pytest.mark.parametrize("name", ["SM", "LCS_EXACT", "SSM", "FDSSM", "DSM", "LCSS", "LCSS_GAMMA"])
    def test_gradient_matches_finite_difference(self, name):
        net = init(MlpConfig(2, hidden=(6, 6)), seed=1)
        spec = ob.ObjectiveSpec(name, sigma=0.4, epsilon=0.5, gamma=0.7)
        noise = self.v if name in ("SSM", "FDSSM") else self.z

        def build(n):
            return ob.objective_loss(spec, n, self.x, noise=noise)

        assert rel_err(_theta_grad(net, build), _fd_theta(net, build)) < 1e-6

    def test_energy_net_second_order(self):
        net = init(MlpConfig(2, hidden=(5,), mode="energy"), seed=2)

        def build(n):
            return ob.ssm(n, self.x, ob.ProjectionSampler(epsilon=0.5), noise=self.v)

        assert rel_err(_theta_grad(net, build), _fd_theta(net, build)) < 1e-6


class TestDiffusionLoss:
    sde = SdeSchedule("ve")

    def _net(self, seed=0):
        return init(MlpConfig(2, hidden=(16, 16), time_conditional=True), seed, self.sde)

    def test_needs_time_conditional(self, small_mlp):
        with pytest.raises(ContractError):
            value(ob.sdm_loss, small_mlp, np.zeros((2, 2)), self.sde, ob.ObjectiveSpec("LCSS"),
                  np.random.default_rng(0))

    def test_rejects_exact_objectives(self):
        with pytest.raises(ContractError):
            value(ob.sdm_loss, self._net(), np.zeros((2, 2)), self.sde, ob.ObjectiveSpec("SM"),
                  np.random.default_rng(0))

    @pytest.mark.parametrize("kind", ["DSM", "LCSS", "LCSS_GAMMA", "SSM", "FDSSM"])
    def test_finite_at_t_min(self, kind):
        x = np.random.default_rng(1).standard_normal((8, 2))
        got = value(ob.sdm_loss, self._net(), x, self.sde, ob.ObjectiveSpec(kind), np.random.default_rng(2),
                    t=self.sde.t_min)
        assert np.isfinite(got)

    @pytest.mark.parametrize("kind", ["ve", "subvp"])
    def test_single_sample_equals_weighted_lcss(self, kind):
        sde = SdeSchedule(kind)
        net = init(MlpConfig(2, hidden=(8,), time_conditional=True), 0, sde)
        x0, z, t = np.array([[0.4, -0.3]]), np.array([[1.1, 0.2]]), 0.37
        sig = sde.marginal_std(t)
        got = value(ob.sdm_loss, net, x0, sde, ob.ObjectiveSpec("LCSS"), t=t, noise=z)
        want = sig ** 2 * value(ob.lcss, net, x0, sig, t=t, noise=z)
        assert got == pytest.approx(want, rel=1e-12)

    def test_single_sample_equals_weighted_dsm(self):
        net = self._net()
        x0, z, t = np.array([[0.4, -0.3]]), np.array([[1.1, 0.2]]), 0.05
        sig = self.sde.marginal_std(t)
        got = value(ob.sdm_loss, net, x0, self.sde, ob.ObjectiveSpec("DSM"), t=t, noise=z)
        want = sig ** 2 * value(ob.dsm, net, x0, sig, t=t, noise=z)
        assert got == pytest.approx(want, rel=1e-10)

    def test_lcss_and_dsm_share_gradients(self):
        # with lambda = sigma^2 the two losses differ by a theta-free constant
        net = self._net(3)
        x0 = np.random.default_rng(4).standard_normal((6, 2))
        z = np.random.default_rng(5).standard_normal((6, 2))
        t = np.linspace(0.01, 0.9, 6)
        grads = [_theta_grad(net, lambda n, k=k: ob.sdm_loss(n, x0, self.sde, ob.ObjectiveSpec(k), t=t, noise=z))
                 for k in ("DSM", "LCSS")]
        np.testing.assert_allclose(grads[0], grads[1], rtol=1e-9, atol=1e-12)

    def test_permutation_invariant(self):
        net = self._net(1)
        rng = np.random.default_rng(6)
        x0, z, t = rng.standard_normal((7, 2)), rng.standard_normal((7, 2)), rng.uniform(0.01, 1, 7)
        perm = rng.permutation(7)
        spec = ob.ObjectiveSpec("LCSS")
        a = value(ob.sdm_loss, net, x0, self.sde, spec, t=t, noise=z)
        b = value(ob.sdm_loss, net, x0[perm], self.sde, spec, t=t[perm], noise=z[perm])
        assert a == pytest.approx(b, rel=1e-13)


class TestHutchinson:
    def test_identity_is_exact(self):
        rep = ob.hutchinson_error_bound_check(np.eye(2), 10, 1000, np.random.default_rng(0))
        assert rep.rms_error == 0.0 and rep.fraction_within == 1.0

    def test_rms_halves_when_m_quadruples(self):
        A = np.random.default_rng(1).standard_normal((4, 4))
        rep = ob.hutchinson_error_bound_check(A, 25, 10_000, np.random.default_rng(2))
        assert rep.rms_error / rep.rms_error_4m == pytest.approx(2.0, rel=0.2)
        assert -0.6 < rep.slope < -0.4

    def test_rms_matches_rademacher_variance(self):
        # Var(u^T A u) = 2 * sum_{i != j} S_ij^2, S the symmetric part of A
        A = np.random.default_rng(3).standard_normal((4, 4))
        A /= np.linalg.norm(A)
        S = (A + A.T) / 2
        want = np.sqrt(2 * (np.sum(S ** 2) - np.sum(np.diag(S) ** 2)))
        rep = ob.hutchinson_error_bound_check(A, 1, 20_000, np.random.default_rng(4))
        assert rep.rms_error == pytest.approx(want, rel=0.05)
        assert rep.rms_error <= 1.0

    def test_rejects_non_square(self):
        with pytest.raises(ParameterError):
            ob.hutchinson_error_bound_check(np.ones((2, 3)), 1, 10, np.random.default_rng(0))
