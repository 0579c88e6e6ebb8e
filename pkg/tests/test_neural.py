import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

from app.errors import ParameterError
from app.neural import (
    Dataset,
    NeuronParams,
    NeuronSystem,
    NNConfig,
    SampledPredictor,
    data_potentials,
    empirical_loss,
    generate_data,
    loss_via_energy,
    neuron_gradient,
    neuron_outputs,
    noisy_sgd_step,
    predict,
    train_by_sampling,
    train_sgd,
)
from app.sampler import SamplerConfig


class TestGenerateData:
    def test_noise_free_targets(self):
        data = generate_data(64, seed=1, noise_std=0.0)
        assert data.x.shape == (64, 1)
        assert_array_equal(data.y, np.sin(3 * data.x[:, 0]))
        assert np.all((data.x >= 0) & (data.x < 1))

    def test_seeded(self):
        assert_array_equal(generate_data(16, seed=4).y, generate_data(16, seed=4).y)
        assert not np.array_equal(generate_data(16, seed=4).y, generate_data(16, seed=5).y)

    def test_label_mean(self):
        data = generate_data(100_000, seed=0)
        assert data.y.mean() == pytest.approx((1 - math.cos(3)) / 3, abs=0.01)
        residual = data.y - np.sin(3 * data.x[:, 0])
        assert residual.std() == pytest.approx(0.2, rel=0.02)

    def test_rejects_empty(self):
        with pytest.raises(ParameterError):
            generate_data(0, seed=0)


class TestPredict:
    def test_identical_neurons(self):
        theta = np.tile([1.5, -2.0, 0.3], (5, 1))
        x = np.linspace(0, 1, 7)[:, None]
        assert_allclose(predict(x, theta), 1.5 * expit(-2.0 * x[:, 0] + 0.3))

    def test_zero_output_weights(self, rng):
        theta = NeuronParams.random(6, 1, rng).theta
        theta[:, 0] = 0.0
        assert_allclose(predict(rng.random((4, 1)), theta), 0.0)

    def test_two_neurons_by_hand(self):
        theta = NeuronParams(np.array([[2.0, 1.0, 0.5], [-1.0, 3.0, -1.0]]))
        expected = (2.0 * expit(0.5) - expit(-1.0)) / 2
        assert predict(np.array([[0.0]]), theta)[0] == pytest.approx(expected)

    def test_linear_in_output_weights(self, rng):
        theta = NeuronParams.random(8, 1, rng).theta
        x = rng.random((10, 1))
        doubled = theta.copy()
        doubled[:, 0] *= 2
        assert_allclose(predict(x, doubled), 2 * predict(x, theta))

    def test_gradient_matches_finite_differences(self, rng):
        theta = NeuronParams.random(3, 2, rng).theta
        x = rng.random((5, 2))
        analytic = neuron_gradient(x, theta)
        h = 1e-6
        for d in range(theta.shape[1]):
            step = np.zeros_like(theta)
            step[:, d] = h
            numeric = (neuron_outputs(x, theta + step) - neuron_outputs(x, theta - step)) / (2 * h)
            assert_allclose(analytic[:, :, d], numeric, rtol=1e-6, atol=1e-9)

    def test_rejects_malformed_parameters(self):
        with pytest.raises(ParameterError):
            NeuronParams(np.zeros((3, 2)))
        with pytest.raises(ParameterError):
            NeuronParams(np.array([[1.0, math.nan, 0.0]]))


class TestLoss:
    def test_zero_prediction_against_ones(self):
        theta = np.zeros((4, 3))
        data = Dataset(np.linspace(0, 1, 9), np.ones(9))
        assert empirical_loss(theta, data) == pytest.approx(0.5)

    def test_perfect_fit(self, rng):
        theta = NeuronParams.random(4, 1, rng)
        x = rng.random((12, 1))
        assert empirical_loss(theta, Dataset(x, predict(x, theta))) == pytest.approx(0.0, abs=1e-15)

    def test_energy_decomposition(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            data = generate_data(int(rng.integers(1, 129)), seed=seed)
            theta = NeuronParams.random(int(rng.integers(1, 65)), 1, rng, float(rng.uniform(0.1, 3.0)))
            assert abs(loss_via_energy(theta, data) - empirical_loss(theta, data)) <= 1e-10, seed

    def test_energy_without_output_weights(self, rng):
        data = generate_data(32, seed=3)
        theta = NeuronParams.random(5, 1, rng).theta
        theta[:, 0] = 0.0
        assert loss_via_energy(theta, data) == pytest.approx(0.5 * np.mean(data.y**2))

    def test_potentials(self, rng):
        data = generate_data(40, seed=6)
        theta = NeuronParams.random(6, 1, rng).theta
        U, W = data_potentials(data)
        zero_labels = Dataset(data.x, np.zeros(40))
        assert_allclose(data_potentials(zero_labels).U(theta), 0.0)
        gram = W(theta, theta)
        assert_allclose(gram, gram.T)
        assert np.linalg.eigvalsh(gram).min() >= -1e-12
        assert U(theta).shape == (6,)


class TestNoisySGD:
    def test_perfect_prediction_without_noise_is_a_fixed_point(self, rng):
        theta = NeuronParams.random(5, 1, rng)
        x = np.array([[0.3]])
        updated = noisy_sgd_step(theta, x, predict(x, theta), 0.5, 0.0, math.inf, rng)
        assert_array_equal(updated.theta, theta.theta)

    def test_weight_decay_contracts(self, rng):
        theta = NeuronParams.random(5, 1, rng)
        x = np.array([[0.7]])
        updated = noisy_sgd_step(theta, x, predict(x, theta), 0.5, 0.1, math.inf, rng)
        assert_allclose(updated.theta, 0.95 * theta.theta)

    def test_noise_scale(self):
        theta = NeuronParams(np.zeros((2000, 3)))
        rng = np.random.default_rng(0)
        updated = noisy_sgd_step(theta, np.array([[0.5]]), np.array([0.0]), 0.5, 0.0, 100.0, rng)
        assert updated.theta.std() == pytest.approx(math.sqrt(2 * 0.5 / 100), rel=0.05)

    def test_full_batch_descent_is_monotone(self, rng):
        data = generate_data(64, seed=8)
        theta = NeuronParams.random(8, 1, rng)
        losses = [empirical_loss(theta, data)]
        for _ in range(50):
            theta = noisy_sgd_step(theta, data.x, data.y, 0.05, 0.0, math.inf, rng)
            losses.append(empirical_loss(theta, data))
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_rejects_bad_step(self, rng):
        theta = NeuronParams.random(2, 1, rng)
        with pytest.raises(ParameterError):
            noisy_sgd_step(theta, [[0.1]], [0.0], 0.0, 0.0, 1.0, rng)

    def test_train_sgd_is_seeded(self):
        cfg = NNConfig(n_neurons=8, step_size=0.5, burn_in=50, iterations=20, beta=500.0)
        data, test = generate_data(32, seed=1), generate_data(32, seed=2)
        first = train_sgd(data, test, cfg, np.random.default_rng(3))
        second = train_sgd(data, test, cfg, np.random.default_rng(3))
        assert first.train_loss == second.train_loss
        assert first.test_loss == second.test_loss
        assert first.train_loss > 0


class TestNeuronSystem:
    def test_kappa(self):
        data = generate_data(8, seed=0)
        assert NeuronSystem(data, 16).kappa == pytest.approx(1 / 16)
        assert NeuronSystem(data, 16, interaction_scale="loss").kappa == pytest.approx(1 / 32)

    def test_loss_scale_energy_is_n_times_the_loss(self, rng):
        data = generate_data(32, seed=5)
        theta = NeuronParams.random(6, 1, rng).theta
        system = NeuronSystem(data, 6, interaction_scale="loss")
        expected = 6 * (empirical_loss(theta, data) - 0.5 * np.mean(data.y**2))
        assert system.energy(theta) == pytest.approx(expected, rel=1e-10)

    def test_default_energy_uses_the_one_over_n_prefactor(self, rng):
        data = generate_data(40, seed=8)
        theta = NeuronParams.random(7, 1, rng).theta
        U, W = data_potentials(data)
        lam = 0.4
        expected = (
            sum(U(theta[i])[0] + 0.5 * lam * theta[i] @ theta[i] for i in range(7))
            + sum(W(theta[i], theta[j])[0, 0] for i in range(7) for j in range(7)) / 7
        )
        assert NeuronSystem(data, 7, lam=lam).energy(theta) == pytest.approx(expected, rel=1e-10)
        assert NNConfig().interaction_scale == "literal"

    def test_energy_is_permutation_invariant(self, rng):
        data = generate_data(32, seed=5)
        theta = NeuronParams.random(6, 1, rng).theta
        system = NeuronSystem(data, 6, lam=0.3)
        assert system.energy(rng.permutation(theta)) == pytest.approx(system.energy(theta), rel=1e-12)

    @pytest.mark.parametrize("scale", ["loss", "literal"])
    def test_full_batch_drift_is_the_energy_gradient(self, rng, scale):
        data = generate_data(24, seed=9)
        theta = NeuronParams.random(5, 1, rng).theta
        system = NeuronSystem(data, 5, lam=0.2, interaction_scale=scale)
        drift = system.drift(theta[[0]], np.array([0]), theta, np.array([[1, 2, 3, 4]]))[0]
        h = 1e-6
        numeric = np.zeros(3)
        for d in range(3):
            up, down = theta.copy(), theta.copy()
            up[0, d] += h
            down[0, d] -= h
            numeric[d] = (system.energy(up) - system.energy(down)) / (2 * h)
        assert_allclose(drift, numeric, rtol=1e-6, atol=1e-8)


class TestSampling:
    def test_predictor_averages_recorded_neurons(self, rng):
        theta = NeuronParams.random(7, 1, rng).theta
        x = rng.random((5, 1))
        assert_allclose(SampledPredictor(theta)(x), predict(x, theta))
        with pytest.raises(ParameterError):
            SampledPredictor(np.zeros((0, 3)))

    def test_train_by_sampling_records_every_neuron(self):
        data = generate_data(32, seed=1)
        cfg = SamplerConfig(
            beta=1.0, tau=0.5, batch_size=4, iterations=20, movers_per_iteration=2, seed=7
        )
        measure, predictor = train_by_sampling(data, 8, 2000.0, 0.0, cfg)
        assert measure.size == 8 * 20
        assert measure.dim == 3
        assert predictor(data.x).shape == (32,)
        assert np.isfinite(predictor.loss(data))

    def test_train_by_sampling_is_seeded(self):
        data = generate_data(16, seed=1)
        cfg = SamplerConfig(beta=1.0, tau=0.5, batch_size=2, iterations=10, seed=3)
        first, _ = train_by_sampling(data, 4, 2000.0, 0.0, cfg)
        second, _ = train_by_sampling(data, 4, 2000.0, 0.0, cfg)
        assert_array_equal(first.points, second.points)


@pytest.mark.slow
def test_noise_free_sgd_fits_the_target():
    data = generate_data(256, seed=0, noise_std=0.0)
    cfg = NNConfig(
        n_neurons=32, step_size=1.0, beta=math.inf, burn_in=100_000, iterations=1000, sgd_batch=1
    )
    result = train_sgd(data, data, cfg, np.random.default_rng(0))
    assert result.final_train_loss < 5e-3
