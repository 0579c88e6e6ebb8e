"""Two-layer networks trained by noisy SGD or by sampling the neuron Gibbs measure."""
import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from app.diagnostics import EmpiricalMeasure
from app.errors import ParameterError
from app.gibbs import ParticleConfiguration
from app.potentials import DomainSpec
from app.sampler import SamplerConfig, rbmc_run

logger = logging.getLogger(__name__)

PREDICT_CHUNK = 4096


class NNConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_neurons: int = Field(64, ge=1, description="network width N")
    step_size: float = Field(0.5, gt=0, description="noisy SGD step s_k")
    beta: float = Field(2000.0, gt=0, description="inverse temperature of the noise")
    lam: float = Field(0.0, ge=0, description="l2 regularization lambda")
    burn_in: int = Field(10000, ge=0, description="warm-up iterations N_b")
    iterations: int = Field(20000, ge=1, description="recorded iterations N_s")
    sgd_batch: int = Field(1, ge=1, description="data samples per SGD step")
    train_size: int = Field(256, ge=1, description="training set size")
    test_size: int = Field(256, ge=1, description="test set size")
    noise_std: float = Field(0.2, ge=0, description="standard deviation of the label noise")
    init_std: float = Field(1.0, gt=0, description="standard deviation of the initial parameters")
    movers: int = Field(4, ge=1, description="neurons moved per sampler iteration")
    batch_size: int = Field(32, ge=2, description="sampler batch size p")
    sampler_step_size: float = Field(2.0, gt=0, description="Langevin step tau of the neuron sampler")
    interaction_scale: Literal["literal", "loss"] = Field(
        "literal", description="1/N pair prefactor, or 1/(2N) (stationary law of noisy SGD)"
    )
    prediction_points: int = Field(201, ge=2, description="grid points of predictions.csv")


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    noise_std: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if x.shape[0] < 1:
            raise ParameterError("dataset needs at least one sample")
        if y.shape[0] != x.shape[0]:
            raise ParameterError("inputs and outputs differ in length")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


def target_function(x):
    return np.sin(3.0 * np.asarray(x, dtype=float))


def generate_data(P: int, seed: int, noise_std: float = 0.2) -> Dataset:
    """x ~ U[0, 1], y = sin(3x) + noise_std * N(0, 1)."""
    if P < 1:
        raise ParameterError(f"need at least one sample, got {P}")
    rng = np.random.default_rng(seed)
    x = rng.random((P, 1))
    y = target_function(x[:, 0]) + noise_std * rng.standard_normal(P)
    return Dataset(x, y, noise_std)


@dataclass(frozen=True, eq=False)
class NeuronParams:
    """Ensemble theta of shape (N, 1 + d_x + 1), rows (c, w, b)."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] < 1 or theta.shape[1] < 3:
            raise ParameterError(f"theta must have shape (N, d_x + 2), got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ParameterError("neuron parameters must be finite")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def random(cls, n: int, input_dim: int, rng: np.random.Generator, std: float = 1.0) -> "NeuronParams":
        return cls(std * rng.standard_normal((n, input_dim + 2)))

    @property
    def n_neurons(self) -> int:
        return self.theta.shape[0]

    @property
    def c(self) -> np.ndarray:
        return self.theta[:, 0]

    @property
    def w(self) -> np.ndarray:
        return self.theta[:, 1:-1]

    @property
    def b(self) -> np.ndarray:
        return self.theta[:, -1]


def _as_theta(theta) -> np.ndarray:
    return theta.theta if isinstance(theta, NeuronParams) else np.asarray(theta, dtype=float)


def neuron_outputs(x, theta) -> np.ndarray:
    """sigma*(x_j; theta_i) as a (P, N) array."""
    theta = _as_theta(theta)
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    return theta[:, 0] * expit(x @ theta[:, 1:-1].T + theta[:, -1])


def neuron_gradient(x, theta) -> np.ndarray:
    """Gradient of sigma*(x_j; theta_i) in (c, w, b) as a (P, N, D) array."""
    theta = _as_theta(theta)
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    s = expit(x @ theta[:, 1:-1].T + theta[:, -1])
    ds = theta[:, 0] * s * (1.0 - s)
    return np.concatenate(
        [s[:, :, None], ds[:, :, None] * x[:, None, :], ds[:, :, None]],
        axis=2,
    )


def predict(x, ensemble) -> np.ndarray:
    return neuron_outputs(x, ensemble).mean(axis=1)


def empirical_loss(ensemble, data: Dataset) -> float:
    residual = predict(data.x, ensemble) - data.y
    return 0.5 * float(np.mean(residual**2))


class DataPotentials:
    """U and W as dataset averages; unpacks as (U, W)."""

    def __init__(self, data: Dataset):
        self.data = data

    def __iter__(self):
        return iter((self.U, self.W))

    def U(self, theta) -> np.ndarray:
        theta = np.atleast_2d(_as_theta(theta))
        return -(self.data.y @ neuron_outputs(self.data.x, theta)) / self.data.size

    def W(self, theta, theta_prime) -> np.ndarray:
        """Pairwise W between the rows of theta and theta_prime."""
        a = neuron_outputs(self.data.x, np.atleast_2d(_as_theta(theta)))
        b = neuron_outputs(self.data.x, np.atleast_2d(_as_theta(theta_prime)))
        return a.T @ b / self.data.size

    def gram(self, theta) -> np.ndarray:
        return self.W(theta, theta)

    def grad_U(self, theta) -> np.ndarray:
        grads = neuron_gradient(self.data.x, np.atleast_2d(_as_theta(theta)))
        return -np.einsum("p,pnd->nd", self.data.y, grads) / self.data.size


def data_potentials(data: Dataset) -> DataPotentials:
    return DataPotentials(data)


def loss_via_energy(ensemble, data: Dataset) -> float:
    """(1/2N^2) sum_{i,i'} W + (1/N) sum_i U + E|y|^2 / 2."""
    theta = _as_theta(ensemble)
    n = theta.shape[0]
    potentials = DataPotentials(data)
    interaction = float(np.sum(potentials.gram(theta))) / (2.0 * n * n)
    external = float(np.sum(potentials.U(theta))) / n
    return interaction + external + 0.5 * float(np.mean(data.y**2))


def noisy_sgd_step(
    ensemble: NeuronParams,
    x_k,
    y_k,
    step: float,
    lam: float,
    beta: float,
    rng: np.random.Generator,
) -> NeuronParams:
    """One simultaneous noisy SGD update of every neuron; beta = inf turns noise off."""
    if not step > 0:
        raise ParameterError(f"step size must be positive, got {step}")
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    theta = ensemble.theta
    x_k = np.asarray(x_k, dtype=float).reshape(-1, theta.shape[1] - 2)
    y_k = np.asarray(y_k, dtype=float).reshape(-1)
    residual = y_k - predict(x_k, theta)
    grads = neuron_gradient(x_k, theta)
    signal = np.einsum("p,pnd->nd", residual, grads) / y_k.size
    updated = theta - lam * step * theta + step * signal
    if np.isfinite(beta):
        updated = updated + np.sqrt(2.0 * step / beta) * rng.standard_normal(theta.shape)
    return NeuronParams(updated)


@dataclass
class SGDResult:
    ensemble: NeuronParams
    train_loss: float
    test_loss: float
    final_train_loss: float
    final_test_loss: float


def train_sgd(
    data: Dataset,
    test: Dataset,
    cfg: NNConfig,
    rng: np.random.Generator,
    initial: NeuronParams | None = None,
) -> SGDResult:
    """N_b + N_s noisy SGD steps; losses averaged over the last N_s iterates."""
    ensemble = initial or NeuronParams.random(cfg.n_neurons, data.input_dim, rng, cfg.init_std)
    train_sum = test_sum = 0.0
    total = cfg.burn_in + cfg.iterations
    for k in range(total):
        picks = rng.integers(data.size, size=cfg.sgd_batch)
        ensemble = noisy_sgd_step(
            ensemble, data.x[picks], data.y[picks], cfg.step_size, cfg.lam, cfg.beta, rng
        )
        if k >= cfg.burn_in:
            train_sum += empirical_loss(ensemble, data)
            test_sum += empirical_loss(ensemble, test)
    result = SGDResult(
        ensemble=ensemble,
        train_loss=train_sum / cfg.iterations,
        test_loss=test_sum / cfg.iterations,
        final_train_loss=empirical_loss(ensemble, data),
        final_test_loss=empirical_loss(ensemble, test),
    )
    logger.info(
        f"Noisy SGD: averaged train loss {result.train_loss:.4f}, test loss {result.test_loss:.4f}"
    )
    return result


@dataclass(frozen=True, eq=False)
class NeuronSystem:
    """Gibbs target exp(-beta (sum_i (U + lam |theta_i|^2 / 2) + kappa sum_{i,j} W)).

    kappa is 1/N for interaction_scale "literal" and 1/(2N) for "loss";
    diagonal terms i = j are included.
    """

    data: Dataset
    n_neurons: int
    lam: float = 0.0
    interaction_scale: Literal["literal", "loss"] = "literal"

    has_short_range = False
    short_range_cutoff = None

    @property
    def n_particles(self) -> int:
        return self.n_neurons

    @property
    def kappa(self) -> float:
        n = self.n_neurons
        return 1.0 / (2.0 * n) if self.interaction_scale == "loss" else 1.0 / n

    def species_index(self) -> np.ndarray:
        return np.zeros(self.n_neurons, dtype=int)

    def energy(self, theta) -> float:
        theta = _as_theta(theta)
        potentials = DataPotentials(self.data)
        return float(
            np.sum(potentials.U(theta))
            + 0.5 * self.lam * np.sum(theta**2)
            + self.kappa * np.sum(potentials.gram(theta))
        )

    def drift(self, x, movers, positions, partners) -> np.ndarray:
        data = self.data
        n_data = data.size
        grads = neuron_gradient(data.x, x)
        own = neuron_outputs(data.x, x)
        batch = positions[partners]
        partner_sum = np.stack(
            [neuron_outputs(data.x, rows).sum(axis=1) for rows in batch], axis=1
        )
        scale = (self.n_neurons - 1) / partners.shape[1]
        coefficient = -data.y[:, None] + 2.0 * self.kappa * (own + scale * partner_sum)
        return np.einsum("pm,pmd->md", coefficient, grads) / n_data + self.lam * x


class SampledPredictor:
    """tilde y(x) = mean of sigma*(x; theta) over every recorded neuron."""

    def __init__(self, thetas: np.ndarray):
        self.thetas = np.asarray(thetas, dtype=float)
        if self.thetas.ndim != 2 or self.thetas.shape[0] == 0:
            raise ParameterError("predictor needs at least one recorded neuron")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        total = np.zeros(x.shape[0])
        for start in range(0, self.thetas.shape[0], PREDICT_CHUNK):
            total += neuron_outputs(x, self.thetas[start : start + PREDICT_CHUNK]).sum(axis=1)
        return total / self.thetas.shape[0]

    def loss(self, data: Dataset) -> float:
        return 0.5 * float(np.mean((self(data.x) - data.y) ** 2))


def train_by_sampling(
    data: Dataset,
    n_neurons: int,
    beta: float,
    lam: float,
    sampler_config: SamplerConfig,
    interaction_scale: Literal["literal", "loss"] = "literal",
    initial: NeuronParams | None = None,
    init_std: float = 1.0,
) -> tuple[EmpiricalMeasure, SampledPredictor]:
    """RBMC without splitting on the neuron Gibbs measure; every recorded neuron enters the predictor."""
    if sampler_config.beta != beta:
        sampler_config = sampler_config.model_copy(update={"beta": beta})
    system = NeuronSystem(data, n_neurons, lam, interaction_scale)
    rng = np.random.default_rng(np.random.SeedSequence(sampler_config.seed, spawn_key=(0,)))
    initial = initial or NeuronParams.random(n_neurons, data.input_dim, rng, init_std)
    domain = DomainSpec("all_space", initial.theta.shape[1], boundary="none")
    stream = rbmc_run(ParticleConfiguration(initial.theta, domain), system, sampler_config, rng=rng)
    thetas = stream.configurations.reshape(-1, initial.theta.shape[1])
    logger.info(f"Sampled {thetas.shape[0]} neuron parameters")
    return EmpiricalMeasure.uniform(thetas), SampledPredictor(thetas)
