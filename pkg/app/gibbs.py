"""N-body energies and Gibbs log-densities for one or several species."""
import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from app.errors import (
    InfeasibleChargeError,
    ParameterError,
    SingularityError,
    UnsupportedConfigurationError,
)
from app.potentials import (
    DomainSpec,
    ExternalPotential,
    PairKernel,
    coulomb_1d,
    coulomb_3d_split,
    lennard_jones,
    point_charge_potential,
    scaled_kernel,
    zero_kernel,
)

logger = logging.getLogger(__name__)

PairWeight = Literal["mean_field", "charge_unit"]


@dataclass(frozen=True, eq=False)
class ParticleConfiguration:
    positions: np.ndarray
    domain: DomainSpec
    species: np.ndarray | None = None

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float)
        if positions.ndim == 1:
            positions = positions[:, None]
        if positions.ndim != 2 or positions.shape[1] != self.domain.dim:
            raise ParameterError(
                f"positions must have shape (N, {self.domain.dim}), got {positions.shape}"
            )
        if positions.shape[0] < 2:
            raise ParameterError(f"need at least 2 particles, got {positions.shape[0]}")
        if not np.all(np.isfinite(positions)):
            raise ParameterError("positions must be finite")
        if self.domain.reflecting and not np.all(self.domain.contains(positions)):
            raise ParameterError("positions outside the domain")
        species = (
            np.zeros(positions.shape[0], dtype=int)
            if self.species is None
            else np.asarray(self.species, dtype=int)
        )
        if species.shape != (positions.shape[0],):
            raise ParameterError("one species tag per particle required")
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "species", species)

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class Species:
    name: str
    count: int
    external: ExternalPotential
    valence: float = 1.0


@dataclass(frozen=True, eq=False)
class SpeciesSystem:
    """Species, their kernels and the pair-weight convention.

    ``kernels`` maps species pairs (k, l) with k <= l to pair kernels.
    ``pair_weight`` selects the energy normalization:

    * ``mean_field``: intra-species pairs weigh 1/(N_k - 1), cross pairs
      1/N (equal counts required), external terms weigh 1.
    * ``charge_unit``: pairs weigh q z_i z_j, external terms z_i.

    ``contact`` is an optional short-range kernel (Lennard-Jones) acting on
    every pair with unit weight.
    """

    species: tuple[Species, ...]
    kernels: dict[tuple[int, int], PairKernel]
    pair_weight: PairWeight = "mean_field"
    charge_unit: float = 1.0
    contact: PairKernel | None = None
    _weights: np.ndarray = field(init=False, repr=False)
    _tags: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n_species = len(self.species)
        if n_species == 0:
            raise ParameterError("at least one species required")
        for sp in self.species:
            if sp.count < 2:
                raise ParameterError(f"species {sp.name!r} needs at least 2 particles")
        for k in range(n_species):
            for l in range(k, n_species):
                if (k, l) not in self.kernels:
                    raise ParameterError(f"missing kernel for species pair {(k, l)}")
        if self.pair_weight not in ("mean_field", "charge_unit"):
            raise ParameterError(f"unknown pair weight mode {self.pair_weight!r}")
        counts = {sp.count for sp in self.species}
        if self.pair_weight == "mean_field" and len(counts) > 1:
            raise UnsupportedConfigurationError(
                "mean_field weighting needs equal species counts; use charge_unit"
            )
        if self.pair_weight == "charge_unit" and not self.charge_unit > 0:
            raise ParameterError(f"charge unit must be positive, got {self.charge_unit}")

        weights = np.empty((n_species, n_species))
        for k, sk in enumerate(self.species):
            for l, sl in enumerate(self.species):
                if self.pair_weight == "charge_unit":
                    weights[k, l] = self.charge_unit * sk.valence * sl.valence
                elif k == l:
                    weights[k, l] = 1.0 / (sk.count - 1)
                else:
                    weights[k, l] = 1.0 / sk.count
        object.__setattr__(self, "_weights", weights)
        object.__setattr__(self, "_tags", np.repeat(np.arange(n_species), self.counts))

    @classmethod
    def single(cls, external: ExternalPotential, kernel: PairKernel, count: int) -> "SpeciesSystem":
        return cls(species=(Species("particle", count, external),), kernels={(0, 0): kernel})

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def counts(self) -> list[int]:
        return [sp.count for sp in self.species]

    @property
    def n_particles(self) -> int:
        return sum(self.counts)

    def species_index(self) -> np.ndarray:
        """Species tag per particle, species laid out in consecutive blocks."""
        return self._tags.copy()

    def kernel(self, k: int, l: int) -> PairKernel:
        return self.kernels[(min(k, l), max(k, l))]

    def pair_weight_matrix(self) -> np.ndarray:
        return self._weights.copy()

    def external_weight(self, k: int) -> float:
        return self.species[k].valence if self.pair_weight == "charge_unit" else 1.0

    def coupling(self, k: int, l: int) -> float:
        """Coefficient c_kl of W_kl * rho_l in the mean-field potential of species k."""
        if self.pair_weight == "charge_unit":
            return self._weights[k, l] * self.species[l].count
        return 1.0

    @property
    def has_short_range(self) -> bool:
        return self.short_range_cutoff is not None

    @property
    def short_range_cutoff(self) -> float | None:
        radii = [w.cutoff for w in self.kernels.values() if w.has_singular_part]
        if self.contact is not None and self.contact.has_singular_part:
            radii.append(self.contact.cutoff)
        return max(radii) if radii else None

    # ------------------------------------------------------------------
    # sampler protocol
    # ------------------------------------------------------------------

    def drift(
        self,
        x: np.ndarray,
        movers: np.ndarray,
        positions: np.ndarray,
        partners: np.ndarray,
    ) -> np.ndarray:
        """Random-batch estimate of grad E_N at the movers' current positions.

        ``x`` holds the movers' positions (M, d), ``partners`` the (M, p-1)
        batch indices. The batch sum is rescaled by (N-1)/(p-1).
        """
        tags = self._tags
        n_total = positions.shape[0]
        scale = (n_total - 1) / partners.shape[1]
        own = tags[movers]
        force = np.empty_like(x)
        for k in np.unique(own):
            rows = own == k
            force[rows] = self.external_weight(k) * self.species[k].external.gradient(x[rows])

        diffs = x[:, None, :] - positions[partners]
        other = tags[partners]
        weights = self._weights[own[:, None], other]
        pair_force = np.zeros_like(diffs)
        for (k, l), kernel in self.kernels.items():
            mask = ((own[:, None] == k) & (other == l)) | ((own[:, None] == l) & (other == k))
            if np.any(mask):
                pair_force[mask] = weights[mask][:, None] * kernel.gradient_smooth(diffs[mask])
        if self.contact is not None:
            pair_force += self.contact.gradient_smooth(diffs)
        return force + scale * pair_force.sum(axis=1)

    def short_range_delta(
        self,
        i: int,
        proposal: np.ndarray,
        positions: np.ndarray,
        neighbors,
    ) -> float:
        """Change of the singular (and contact) energy when particle i moves.

        Returns +inf when the proposal lands on a singularity.
        """
        neighbors = np.array(sorted(j for j in neighbors if j != i), dtype=int)
        if neighbors.size == 0:
            return 0.0
        tags = self._tags
        k = tags[i]
        current = positions[i]
        terms = []
        try:
            for j, l in zip(neighbors, tags[neighbors]):
                kernel = self.kernel(k, l)
                pair_terms = []
                if kernel.has_singular_part:
                    pair_terms.append((kernel, self._weights[k, l]))
                if self.contact is not None and self.contact.has_singular_part:
                    pair_terms.append((self.contact, 1.0))
                for kern, weight in pair_terms:
                    new = kern.singular_part(proposal - positions[j])
                    old = kern.singular_part(current - positions[j])
                    terms.append(weight * float(new))
                    terms.append(-weight * float(old))
        except SingularityError:
            return math.inf
        delta = math.fsum(terms)
        return delta if math.isfinite(delta) else math.inf


# ----------------------------------------------------------------------
# Energies
# ----------------------------------------------------------------------


def system_energy(config: ParticleConfiguration, system: SpeciesSystem) -> float:
    """Total energy, pairs accumulated in i < j order with compensated summation."""
    x = config.positions
    tags = config.species
    terms = []
    for k in range(system.n_species):
        rows = tags == k
        if np.any(rows):
            values = system.external_weight(k) * system.species[k].external.evaluate(x[rows])
            terms.extend(np.atleast_1d(values).tolist())

    iu, ju = np.triu_indices(config.n_particles, 1)
    diffs = x[iu] - x[ju]
    weights = system.pair_weight_matrix()[tags[iu], tags[ju]]
    pair_values = np.zeros(iu.size)
    for (k, l), kernel in system.kernels.items():
        mask = ((tags[iu] == k) & (tags[ju] == l)) | ((tags[iu] == l) & (tags[ju] == k))
        if np.any(mask):
            pair_values[mask] = weights[mask] * kernel.total(diffs[mask])
    if system.contact is not None:
        pair_values += system.contact.total(diffs)
    terms.extend(pair_values.tolist())
    return math.fsum(terms)


def energy_nbody(config: ParticleConfiguration, U: ExternalPotential, W: PairKernel) -> float:
    """E_N = sum_i U(x_i) + 1/(2(N-1)) sum_{i != j} W(x_i - x_j)."""
    system = SpeciesSystem.single(U, W, config.n_particles)
    return system_energy(config, system)


def log_gibbs_unnormalized(
    config: ParticleConfiguration,
    U: ExternalPotential,
    W: PairKernel,
    beta: float,
) -> float:
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    return -beta * energy_nbody(config, U, W)


def energy_two_species(x, y, system: SpeciesSystem) -> float:
    """Two-species energy with 1/(2(N-1)) intra sums and a 1/N cross sum."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if system.n_species != 2:
        raise ParameterError("energy_two_species needs a two-species system")
    if x.shape[0] != y.shape[0]:
        raise UnsupportedConfigurationError(
            f"unequal species counts {x.shape[0]} and {y.shape[0]}"
        )
    if system.pair_weight != "mean_field":
        raise ParameterError("energy_two_species uses mean_field weighting")
    domain = DomainSpec("all_space", x.shape[1], boundary="none")
    config = ParticleConfiguration(
        np.vstack([x, y]),
        domain,
        np.repeat([0, 1], [x.shape[0], y.shape[0]]),
    )
    return system_energy(config, system)


# ----------------------------------------------------------------------
# Poisson-Boltzmann systems
# ----------------------------------------------------------------------


def pb_particle_counts(
    Q_plus: float,
    rho_f_integral: float,
    q: float,
    z_plus: float = 1.0,
    z_minus: float = -1.0,
) -> tuple[int, int, float]:
    """(N_+, N_-, Q_-) from charge neutrality Q_+ - Q_- + int rho_f = 0."""
    if not q > 0:
        raise ParameterError(f"charge unit must be positive, got {q}")
    if not z_plus > 0 > z_minus:
        raise ParameterError(f"valences must satisfy z_+ > 0 > z_-, got {z_plus}, {z_minus}")
    if not Q_plus > 0:
        raise InfeasibleChargeError(f"cation charge must be positive, got {Q_plus}")
    Q_minus = Q_plus + rho_f_integral
    if Q_minus <= 0:
        raise InfeasibleChargeError(f"anion charge Q_- = {Q_minus} is not positive")
    n_plus = math.ceil(round(Q_plus / (z_plus * q), 9))
    n_minus = math.ceil(round(Q_minus / (abs(z_minus) * q), 9))
    return n_plus, n_minus, Q_minus


def pb_system(
    dim: int,
    epsilon: float,
    Q_f: float,
    Q_plus: float,
    n_plus: int,
    z_plus: float = 1.0,
    z_minus: float = -1.0,
    r_c: float | None = None,
    lj_epsilon: float | None = None,
    lj_sigma: float | None = None,
    interaction: Literal["coulomb", "none"] = "coulomb",
) -> SpeciesSystem:
    """Two-species electrolyte around a free charge Q_f at the origin.

    In 1D the interaction is the sheet Green's function -|x|/(2 eps); in 3D
    it is the split Coulomb kernel, optionally with a Lennard-Jones contact.
    With interaction="none" the particles only feel the field of Q_f.
    """
    q = Q_plus / (z_plus * n_plus)
    _, n_minus, _ = pb_particle_counts(Q_plus, Q_f, q, z_plus, z_minus)
    if dim == 1:
        kernel = scaled_kernel(coulomb_1d(epsilon), -1.0)
        contact = None
    elif dim == 3:
        if r_c is None:
            raise ParameterError("3D Poisson-Boltzmann needs a split radius r_c")
        kernel = coulomb_3d_split(epsilon, r_c)
        contact = (
            lennard_jones(lj_epsilon, lj_sigma)
            if lj_epsilon is not None and lj_sigma is not None
            else None
        )
    else:
        raise ParameterError(f"Poisson-Boltzmann systems are 1D or 3D, got d={dim}")

    field_potential = point_charge_potential(Q_f, kernel)
    if interaction == "none":
        kernel = zero_kernel()
        contact = None
    logger.info(
        f"PB system d={dim}: N_+={n_plus}, N_-={n_minus}, q={q:.6g}, Q_f={Q_f}"
    )
    return SpeciesSystem(
        species=(
            Species("plus", n_plus, field_potential, z_plus),
            Species("minus", n_minus, field_potential, z_minus),
        ),
        kernels={(0, 0): kernel, (0, 1): kernel, (1, 1): kernel},
        pair_weight="charge_unit",
        charge_unit=q,
        contact=contact,
    )


# ----------------------------------------------------------------------
# Small-beta thresholds
# ----------------------------------------------------------------------


def _sup(kernel: PairKernel) -> float:
    bound = kernel.sup_norm_bound
    if bound is None:
        raise ParameterError(f"{type(kernel).__name__} is unbounded; no beta threshold")
    return bound


def beta_threshold(kernel: PairKernel) -> float:
    """(2 e sqrt(2) ||W||_inf)^-1; infinite for W == 0."""
    bound = _sup(kernel)
    return math.inf if bound == 0 else 1.0 / (2.0 * math.e * math.sqrt(2.0) * bound)


def species_beta_threshold(W1: PairKernel, W2: PairKernel, Wc: PairKernel) -> float:
    scale = 2.0 * _sup(Wc) + max(_sup(W1), _sup(W2))
    return math.inf if scale == 0 else 1.0 / (2.0 * math.sqrt(2.0) * math.e * scale)
