"""Damped Picard solvers for the mean-field density on a line or on radii."""
import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import xlogy

from app.errors import ConvergenceError, NumericError, ParameterError
from app.gibbs import SpeciesSystem
from app.potentials import ExternalPotential, PairKernel

logger = logging.getLogger(__name__)

DAMPING_FLOOR = 1e-4

Geometry = Literal["line", "radial"]


@dataclass(frozen=True, eq=False)
class Grid:
    nodes: np.ndarray
    weights: np.ndarray
    geometry: Geometry = "line"

    @classmethod
    def uniform(cls, low: float, high: float, n: int, geometry: Geometry = "line") -> "Grid":
        if n < 3:
            raise ParameterError(f"grid needs at least 3 nodes, got {n}")
        if not low < high:
            raise ParameterError(f"empty grid interval [{low}, {high}]")
        if geometry == "radial" and low < 0:
            raise ParameterError("radial grids start at a nonnegative radius")
        nodes = np.linspace(low, high, n)
        h = nodes[1] - nodes[0]
        weights = np.full(n, h)
        weights[0] = weights[-1] = 0.5 * h
        if geometry == "radial":
            weights = weights * 4.0 * math.pi * nodes**2
        elif geometry != "line":
            raise ParameterError(f"unknown grid geometry {geometry!r}")
        return cls(nodes, weights, geometry)

    @property
    def size(self) -> int:
        return self.nodes.size

    @property
    def spacing(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def low(self) -> float:
        return float(self.nodes[0])

    @property
    def high(self) -> float:
        return float(self.nodes[-1])

    def points(self) -> np.ndarray:
        """Nodes as positions: (n, 1) on a line, (n, 3) along the first axis for radii."""
        if self.geometry == "line":
            return self.nodes[:, None]
        points = np.zeros((self.size, 3))
        points[:, 0] = self.nodes
        return points

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


@dataclass(frozen=True, eq=False)
class GridDensity:
    grid: Grid
    values: np.ndarray
    iterations: int = 0
    residual: float = math.nan
    history: tuple = field(default=(), repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.nodes.shape:
            raise ParameterError("density values must match the grid")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise NumericError("density values must be finite and nonnegative")
        object.__setattr__(self, "values", values)

    @property
    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def expectation(self, f) -> float:
        return self.grid.integrate(self.values * f(self.grid.nodes))


def normalize(values: np.ndarray, grid: Grid) -> np.ndarray:
    mass = grid.integrate(values)
    if not (mass > 0 and math.isfinite(mass)):
        raise NumericError(f"cannot normalize a density of mass {mass}")
    return values / mass


def boltzmann(potential: np.ndarray, beta: float, grid: Grid) -> np.ndarray:
    """Normalize(exp(-beta * potential)), shifted by the minimum to stay finite."""
    if not np.all(np.isfinite(potential)):
        raise NumericError("potential is not finite on the grid")
    return normalize(np.exp(-beta * (potential - potential.min())), grid)


def kernel_matrix(kernel: PairKernel, grid: Grid) -> np.ndarray:
    """Quadrature matrix K with (W * rho)(x_i) = K[i] @ rho."""
    if grid.geometry == "line":
        diffs = grid.nodes[:, None] - grid.nodes[None, :]
        values = kernel.total(diffs[..., None])
    else:
        values = kernel.shell_average(grid.nodes[:, None], grid.nodes[None, :])
    return values * grid.weights[None, :]


def convolve_grid(
    W: PairKernel,
    rho: GridDensity,
    method: Literal["direct", "fft"] = "direct",
    matrix: np.ndarray | None = None,
) -> np.ndarray:
    """(W * rho) on the grid nodes by quadrature."""
    grid = rho.grid
    if method == "fft":
        if grid.geometry != "line":
            raise ParameterError("fft convolution needs a line grid")
        n = grid.size
        offsets = grid.spacing * np.arange(-(n - 1), n)
        kern = W.total(offsets[:, None])
        full = fftconvolve(rho.values * grid.weights, kern, mode="full")
        return full[n - 1 : 2 * n - 1]
    if method != "direct":
        raise ParameterError(f"unknown convolution method {method!r}")
    if matrix is None:
        matrix = kernel_matrix(W, grid)
    return matrix @ rho.values


def _external_values(U: ExternalPotential, grid: Grid) -> np.ndarray:
    values = np.asarray(U.evaluate(grid.points()), dtype=float)
    if not np.all(np.isfinite(values)):
        raise NumericError("external potential is not finite on the grid")
    return values


def _check_solver_args(beta: float, damping: float, tol: float, max_iter: int):
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if not 0 < damping <= 1:
        raise ParameterError(f"damping must lie in (0, 1], got {damping}")
    if not tol > 0:
        raise ParameterError(f"tolerance must be positive, got {tol}")
    if max_iter < 1:
        raise ParameterError(f"max_iter must be positive, got {max_iter}")


def picard_fixed_point(
    U: ExternalPotential,
    W: PairKernel,
    beta: float,
    grid: Grid,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 10000,
    method: Literal["direct", "fft"] = "direct",
) -> GridDensity:
    """Damped Picard iteration from Normalize(exp(-beta U)).

    The residual ||rho - Normalize(exp(-beta (U + W * rho)))||_inf is checked
    before each update; when it grows the damping is halved.
    """
    _check_solver_args(beta, damping, tol, max_iter)
    u = _external_values(U, grid)
    matrix = kernel_matrix(W, grid) if method == "direct" else None
    rho = boltzmann(u, beta, grid)
    theta = damping
    history: list[float] = []
    previous = math.inf

    for iteration in range(1, max_iter + 1):
        current = GridDensity(grid, rho)
        target = boltzmann(u + convolve_grid(W, current, method, matrix), beta, grid)
        residual = float(np.max(np.abs(rho - target)))
        history.append(residual)
        logger.debug(f"Picard iteration {iteration}: residual {residual:.3e}")
        if residual <= tol:
            logger.info(f"Picard converged in {iteration} iterations (residual {residual:.2e})")
            return GridDensity(grid, rho, iteration, residual, tuple(history))
        if residual > previous and theta > DAMPING_FLOOR:
            theta = max(theta / 2.0, DAMPING_FLOOR)
            logger.warning(f"Picard residual grew to {residual:.3e}; damping lowered to {theta:g}")
        previous = residual
        rho = normalize((1.0 - theta) * rho + theta * target, grid)

    raise ConvergenceError("Picard iteration did not converge", history[-1], max_iter)


def picard_species(
    system: SpeciesSystem,
    beta: float,
    grid: Grid,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 10000,
) -> list[GridDensity]:
    """Alternating damped updates of every species density.

    Species k sees w_k U_k + sum_l c_kl W_kl * rho_l with the external
    weights and couplings of the system's pair-weight mode.
    """
    _check_solver_args(beta, damping, tol, max_iter)
    n_species = system.n_species
    externals = [
        system.external_weight(k) * _external_values(system.species[k].external, grid)
        for k in range(n_species)
    ]
    matrices = {
        (k, l): system.coupling(k, l) * kernel_matrix(system.kernel(k, l), grid)
        for k in range(n_species)
        for l in range(n_species)
    }

    def target(k: int, rhos: list[np.ndarray]) -> np.ndarray:
        potential = externals[k] + sum(matrices[(k, l)] @ rhos[l] for l in range(n_species))
        return boltzmann(potential, beta, grid)

    rhos = [boltzmann(u, beta, grid) for u in externals]
    theta = damping
    history: list[float] = []
    previous = math.inf

    for iteration in range(1, max_iter + 1):
        residual = max(float(np.max(np.abs(rhos[k] - target(k, rhos)))) for k in range(n_species))
        history.append(residual)
        logger.debug(f"Species Picard iteration {iteration}: residual {residual:.3e}")
        if residual <= tol:
            logger.info(
                f"Species Picard converged in {iteration} iterations (residual {residual:.2e})"
            )
            return [GridDensity(grid, rho, iteration, residual, tuple(history)) for rho in rhos]
        if residual > previous and theta > DAMPING_FLOOR:
            theta = max(theta / 2.0, DAMPING_FLOOR)
            logger.warning(
                f"Species Picard residual grew to {residual:.3e}; damping lowered to {theta:g}"
            )
        previous = residual
        for k in range(n_species):
            rhos[k] = normalize((1.0 - theta) * rhos[k] + theta * target(k, rhos), grid)

    raise ConvergenceError("Species Picard iteration did not converge", history[-1], max_iter)


def picard_two_species(
    system: SpeciesSystem,
    beta: float,
    grid: Grid,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 10000,
) -> tuple[GridDensity, GridDensity]:
    if system.n_species != 2:
        raise ParameterError(f"expected two species, got {system.n_species}")
    rho_1, rho_2 = picard_species(system, beta, grid, damping, tol, max_iter)
    return rho_1, rho_2


# ----------------------------------------------------------------------
# Free energy and stationarity
# ----------------------------------------------------------------------


def mean_field_free_energy(rho: GridDensity, U: ExternalPotential, W: PairKernel, beta: float) -> float:
    """int U rho + 1/2 int rho (W * rho) + 1/beta int rho log rho (0 log 0 = 0)."""
    grid = rho.grid
    u = _external_values(U, grid)
    interaction = convolve_grid(W, rho)
    energy = grid.integrate(u * rho.values) + 0.5 * grid.integrate(rho.values * interaction)
    entropy = grid.integrate(xlogy(rho.values, rho.values))
    return energy + entropy / beta


def mean_field_free_energy_species(
    rhos: list[GridDensity],
    system: SpeciesSystem,
    beta: float,
) -> float:
    """Species free energy; in charge_unit mode each species counts with its N_k."""
    grid = rhos[0].grid
    masses = [
        float(sp.count) if system.pair_weight == "charge_unit" else 1.0 for sp in system.species
    ]
    total = 0.0
    for k, rho_k in enumerate(rhos):
        u = system.external_weight(k) * _external_values(system.species[k].external, grid)
        total += masses[k] * (
            grid.integrate(u * rho_k.values)
            + grid.integrate(xlogy(rho_k.values, rho_k.values)) / beta
        )
        for l, rho_l in enumerate(rhos):
            interaction = system.coupling(k, l) * convolve_grid(system.kernel(k, l), rho_l)
            total += 0.5 * masses[k] * grid.integrate(rho_k.values * interaction)
    return total


def _divergence(flux: np.ndarray, grid: Grid) -> np.ndarray:
    h = grid.spacing
    if grid.geometry == "line":
        return np.gradient(flux, h)
    r = grid.nodes
    return np.gradient(r**2 * flux, h) / np.where(r > 0, r**2, 1.0)


def _flux_residual(rho: np.ndarray, potential: np.ndarray, beta: float, grid: Grid) -> float:
    h = grid.spacing
    flux = rho * np.gradient(potential, h) + np.gradient(rho, h) / beta
    divergence = _divergence(flux, grid)
    return float(np.max(np.abs(divergence[2:-2])))


def stationarity_residual(rho: GridDensity, U: ExternalPotential, W: PairKernel, beta: float) -> float:
    """Sup norm of div(rho grad(U + W * rho) + grad(rho) / beta) away from the edges."""
    grid = rho.grid
    potential = _external_values(U, grid) + convolve_grid(W, rho)
    return _flux_residual(rho.values, potential, beta, grid)


def stationarity_residual_species(
    rhos: list[GridDensity],
    system: SpeciesSystem,
    beta: float,
) -> float:
    grid = rhos[0].grid
    worst = 0.0
    for k, rho_k in enumerate(rhos):
        potential = system.external_weight(k) * _external_values(system.species[k].external, grid)
        for l, rho_l in enumerate(rhos):
            potential = potential + system.coupling(k, l) * convolve_grid(system.kernel(k, l), rho_l)
        worst = max(worst, _flux_residual(rho_k.values, potential, beta, grid))
    return worst


def sample_grid_density(rho: GridDensity, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. coordinates (x, or r for radial grids) as an (n, 1) array.

    Cells are chosen by their trapezoidal mass, positions uniform inside a cell.
    """
    if n < 1:
        raise ParameterError(f"need at least one draw, got {n}")
    grid = rho.grid
    density = rho.values
    if grid.geometry == "radial":
        density = density * 4.0 * math.pi * grid.nodes**2
    cell_mass = 0.5 * (density[:-1] + density[1:]) * np.diff(grid.nodes)
    cdf = np.cumsum(cell_mass)
    cdf /= cdf[-1]
    cells = np.searchsorted(cdf, rng.random(n), side="right")
    cells = np.minimum(cells, cell_mass.size - 1)
    left = grid.nodes[cells]
    draws = left + rng.random(n) * (grid.nodes[cells + 1] - left)
    return draws[:, None]
