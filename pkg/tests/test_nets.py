import numpy as np
import pytest

from scorelab import autodiff as ad
from scorelab import nets
from scorelab.errors import CheckpointError, ContractError, DimensionError, NonFiniteError, ParameterError
from scorelab.nets import MlpConfig, ScoreNet
from scorelab.sde import SdeSchedule

from conftest import central_diff, rel_err


class TestConfig:
    def test_param_count_checkerboard_mlp(self):
        # (2+1)*300 + (300+1)*300 + (300+1)*1
        assert MlpConfig(2, (300, 300), mode="energy").param_count() == 900 + 90300 + 301

    def test_time_conditional_adds_input(self):
        assert MlpConfig(2, (4,), time_conditional=True).layer_shapes()[0] == (3, 4)

    def test_output_dim_follows_mode(self):
        assert MlpConfig(3, (4,)).output_dim == 3
        assert MlpConfig(3, (4,), mode="energy").output_dim == 1
        with pytest.raises(ParameterError):
            MlpConfig(3, (4,), output_dim=1)

    def test_rejects_bad_values(self):
        with pytest.raises(ParameterError):
            MlpConfig(2, (0,))
        with pytest.raises(ParameterError):
            MlpConfig(2, (4,), activation="relu")
        with pytest.raises(ParameterError):
            MlpConfig(2, (4,), scale_by_sigma=True)


class TestForward:
    def test_linear_constructor(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        net = ScoreNet.linear(A, np.array([0.5, -0.5]))
        np.testing.assert_allclose(net.score(np.array([[1.0, 1.0]])), [[3.5, 6.5]])

    def test_single_vector_input(self, small_mlp):
        x = np.array([0.3, -0.4])
        np.testing.assert_array_equal(small_mlp.score(x), small_mlp.score(x[None])[0])

    def test_energy_score_is_gradient(self, energy_mlp):
        x0 = np.array([0.4, -1.2])

        def f(v):
            with ad.Tape():
                return energy_mlp.energy(v).data

        assert rel_err(energy_mlp.score(x0), central_diff(f, x0)) < 1e-7

    def test_square_activation_energy_is_exact(self):
        # f(x) = -(x1^2 + x2^2) / 2 through one hidden layer with square activation
        cfg = MlpConfig(2, (2,), activation="square", mode="energy")
        theta = np.concatenate([np.eye(2).ravel(), np.zeros(2), [-0.5, -0.5], [0.0]])
        net = ScoreNet(cfg, theta)
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        np.testing.assert_allclose(net.score(x), -x, rtol=1e-15)

    def test_batch_rows_are_independent(self, energy_mlp):
        x = np.random.default_rng(0).standard_normal((6, 2))
        batch = energy_mlp.score(x)
        for i in range(6):
            np.testing.assert_allclose(energy_mlp.score(x[i]), batch[i], rtol=1e-13)

    def test_dimension_mismatch(self, small_mlp):
        with pytest.raises(DimensionError):
            small_mlp.score(np.ones((2, 3)))

    def test_time_conditional_needs_t(self):
        net = nets.init(MlpConfig(2, (4,), time_conditional=True), 0, SdeSchedule())
        with pytest.raises(ContractError):
            net.score(np.ones((1, 2)))
        assert net.score(np.ones((1, 2)), 0.5).shape == (1, 2)

    def test_scale_by_sigma(self):
        sde = SdeSchedule()
        plain = nets.init(MlpConfig(2, (4,), time_conditional=True), 0, sde)
        scaled = ScoreNet(MlpConfig(2, (4,), time_conditional=True, scale_by_sigma=True), plain.theta, sde)
        x = np.ones((3, 2))
        np.testing.assert_allclose(scaled.score(x, 0.3), plain.score(x, 0.3) / sde.marginal_std(0.3))

    def test_theta_views_track_updates(self, small_mlp):
        x = np.ones((1, 2))
        before = small_mlp.score(x)
        small_mlp.theta[-1] += 1.0
        np.testing.assert_allclose(small_mlp.score(x)[0, 1], before[0, 1] + 1.0)


class TestInit:
    def test_deterministic(self):
        cfg = MlpConfig(2, (8, 8))
        a, b = nets.init(cfg, 7), nets.init(cfg, 7)
        assert np.array_equal(a.theta, b.theta)
        assert not np.array_equal(a.theta, nets.init(cfg, 8).theta)

    def test_uniform_bounds_and_zero_bias(self):
        net = nets.init(MlpConfig(2, (50,)), 0)
        (W1, b1), (W2, b2) = net.layers()
        assert np.all(np.abs(W1) <= 1 / np.sqrt(2)) and np.all(np.abs(W2) <= 1 / np.sqrt(50))
        assert not b1.any() and not b2.any()


class TestUpdates:
    def test_sgd_step(self, small_mlp):
        theta = small_mlp.theta.copy()
        g = np.ones_like(theta)
        nets.sgd_step(small_mlp, g, 0.1)
        np.testing.assert_allclose(small_mlp.theta, theta - 0.1)

    def test_sgd_step_errors(self, small_mlp):
        with pytest.raises(DimensionError):
            nets.sgd_step(small_mlp, np.ones(3), 0.1)
        with pytest.raises(ParameterError):
            nets.sgd_step(small_mlp, np.ones_like(small_mlp.theta), -1.0)
        with pytest.raises(NonFiniteError):
            nets.sgd_step(small_mlp, np.full_like(small_mlp.theta, np.nan), 0.1, check=True)

    def test_adam_first_step_is_signed_lr(self, small_mlp):
        theta = small_mlp.theta.copy()
        g = np.where(np.arange(theta.size) % 2 == 0, 3.0, -0.5)
        nets.Adam(lr=0.01).step(small_mlp, g)
        np.testing.assert_allclose(small_mlp.theta, theta - 0.01 * np.sign(g), rtol=1e-6)

    def test_momentum_accumulates(self, small_mlp):
        theta = small_mlp.theta.copy()
        opt = nets.SGD(0.1, momentum=0.5)
        g = np.ones_like(theta)
        opt.step(small_mlp, g)
        opt.step(small_mlp, g)
        np.testing.assert_allclose(small_mlp.theta, theta - 0.1 - 0.15)


class TestCheckpoint:
    def test_layout(self, small_mlp):
        raw = nets.checkpoint_bytes(small_mlp)
        assert raw[:4] == b"SMLB"
        version, count, dim, tc = np.frombuffer(raw[4:20], dtype="<u4")
        assert (version, count, dim, tc) == (1, small_mlp.theta.size, 2, 0)
        assert np.array_equal(np.frombuffer(raw[20:], dtype="<f8"), small_mlp.theta)

    def test_roundtrip_bit_exact(self, tmp_path, small_mlp):
        path = tmp_path / "a.smlb"
        nets.save_checkpoint(small_mlp, path, {"seed": 3})
        back = nets.load_checkpoint(path, small_mlp.config)
        assert back.theta.tobytes() == small_mlp.theta.tobytes()
        assert (tmp_path / "a.smlb.json").exists()

    def test_incompatible(self, tmp_path, small_mlp):
        path = tmp_path / "a.smlb"
        nets.save_checkpoint(small_mlp, path)
        with pytest.raises(CheckpointError):
            nets.load_checkpoint(path, MlpConfig(3, (16, 16)))
        with pytest.raises(CheckpointError):
            nets.load_checkpoint(path, MlpConfig(2, (16, 16), time_conditional=True))

    def test_corrupt(self):
        with pytest.raises(CheckpointError):
            nets.parse_checkpoint(b"XXXX" + bytes(16))
        with pytest.raises(CheckpointError):
            nets.parse_checkpoint(b"SMLB")
        good = nets.checkpoint_bytes(ScoreNet.linear(np.eye(2)))
        with pytest.raises(CheckpointError):
            nets.parse_checkpoint(good[:-3])
