"""Distances and errors between empirical measures and oracle densities."""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.special import gamma, kv

from app.errors import EmptyMeasureError, NumericError, ParameterError
from app.oracle import GridDensity

logger = logging.getLogger(__name__)

TAIL_TOLERANCE = 1e-8
PAIR_CHUNK = 2048

TEST_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "square": lambda x: x * x,
    "identity": lambda x: x,
    "abs": np.abs,
}


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    points: np.ndarray
    weights: np.ndarray
    species: int | None = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        weights = np.asarray(self.weights, dtype=float)
        if points.shape[0] == 0:
            raise EmptyMeasureError("empirical measure has no points")
        if weights.shape != (points.shape[0],):
            raise ParameterError("one weight per point required")
        if np.any(weights < 0):
            raise ParameterError("weights must be nonnegative")
        total = math.fsum(weights.tolist())
        if abs(total - 1.0) > 1e-12:
            raise ParameterError(f"weights sum to {total!r}, not 1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points, species: int | None = None) -> "EmpiricalMeasure":
        points = np.asarray(points, dtype=float)
        if points.shape[0] == 0:
            raise EmptyMeasureError("empirical measure has no points")
        return cls(points, np.full(points.shape[0], 1.0 / points.shape[0]), species)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def coordinates(self, geometry: str = "line") -> np.ndarray:
        if geometry == "radial":
            return np.linalg.norm(self.points, axis=1)
        return self.points[:, 0]

    def expectation(self, f, geometry: str = "line") -> float:
        return float(np.dot(self.weights, f(self.coordinates(geometry))))


class DiagnosticsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(1.0, description="Sobolev exponent of the H^-alpha distance (> d/2)")
    dim: int = Field(1, ge=1, description="dimension the distance is taken in")
    method: Literal["kernel", "fourier"] = Field(
        "kernel", description="closed-form kernel sums, or truncated Fourier quadrature"
    )
    xi_max: float = Field(200.0, gt=0, description="Fourier truncation |xi| <= xi_max")
    xi_points: int = Field(20001, ge=3, description="Fourier quadrature nodes")
    bins: int = Field(50, ge=1, description="histogram bins")
    test_function: Literal["square", "identity", "abs"] = Field(
        "square", description="test function f of the weak error"
    )

    @model_validator(mode="after")
    def check_alpha(self):
        if not self.alpha > self.dim / 2:
            raise ValueError(f"alpha must exceed d/2 = {self.dim / 2}, got {self.alpha}")
        return self


class RateFit(NamedTuple):
    slope: float
    intercept: float
    residual: float


# ----------------------------------------------------------------------
# Moments
# ----------------------------------------------------------------------


def weak_error(mu: EmpiricalMeasure, rho: GridDensity, f=TEST_FUNCTIONS["square"]) -> float:
    """|int f rho - mean f(mu)| / int f rho."""
    if isinstance(f, str):
        f = TEST_FUNCTIONS[f]
    reference = rho.expectation(f)
    if reference == 0:
        raise NumericError("reference moment is zero; relative weak error undefined")
    sampled = mu.expectation(f, rho.grid.geometry)
    return abs(reference - sampled) / abs(reference)


def mswe(errors_plus, errors_minus) -> float:
    errors_plus = np.asarray(errors_plus, dtype=float)
    errors_minus = np.asarray(errors_minus, dtype=float)
    if errors_plus.size == 0 or errors_minus.size == 0:
        raise ParameterError("mswe needs at least one repetition per species")
    if errors_plus.size != errors_minus.size:
        raise ParameterError("both species need the same number of repetitions")
    m = errors_plus.size
    return math.sqrt((np.sum(errors_plus**2) + np.sum(errors_minus**2)) / (2 * m))


# ----------------------------------------------------------------------
# H^-alpha distance
# ----------------------------------------------------------------------


def _as_weighted_points(measure) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(measure, GridDensity):
        if measure.grid.geometry != "line":
            raise ParameterError("H^-alpha distances are taken on line grids")
        weights = measure.values * measure.grid.weights
        keep = weights != 0
        return measure.grid.nodes[keep][:, None], weights[keep]
    return measure.points, measure.weights


def matern_kernel(r, alpha: float, dim: int) -> np.ndarray:
    """(2 pi)^-d int (1 + |xi|^2)^-alpha exp(i xi . z) d xi as a function of r = |z|."""
    r = np.asarray(r, dtype=float)
    nu = alpha - dim / 2.0
    at_zero = gamma(nu) / ((4.0 * math.pi) ** (dim / 2.0) * gamma(alpha))
    safe = np.where(r > 0, r, 1.0)
    away = (
        2.0 ** (1.0 - alpha)
        * safe**nu
        * kv(nu, safe)
        / ((2.0 * math.pi) ** (dim / 2.0) * gamma(alpha))
    )
    return np.where(r > 0, away, at_zero)


def _kernel_energy(xa, wa, xb, wb, alpha: float, dim: int) -> float:
    total = 0.0
    for start in range(0, xa.shape[0], PAIR_CHUNK):
        block = xa[start : start + PAIR_CHUNK]
        r = np.linalg.norm(block[:, None, :] - xb[None, :, :], axis=-1)
        total += float(wa[start : start + PAIR_CHUNK] @ matern_kernel(r, alpha, dim) @ wb)
    return total


def _fourier_norm_sq(xa, wa, xb, wb, cfg: DiagnosticsConfig) -> float:
    if xa.shape[1] != 1:
        raise ParameterError("fourier quadrature is implemented for d = 1")
    tail = 8.0 * cfg.xi_max ** (1.0 - 2.0 * cfg.alpha) / (2.0 * cfg.alpha - 1.0)
    if tail > TAIL_TOLERANCE:
        logger.warning(f"Fourier truncation at {cfg.xi_max:g} leaves a tail bound of {tail:.2e}")
    xi = np.linspace(-cfg.xi_max, cfg.xi_max, cfg.xi_points)
    transform = np.zeros(xi.size, dtype=complex)
    for x, w, sign in ((xa[:, 0], wa, 1.0), (xb[:, 0], wb, -1.0)):
        for start in range(0, x.size, PAIR_CHUNK):
            chunk = slice(start, start + PAIR_CHUNK)
            transform += sign * (w[chunk] @ np.exp(-1j * np.outer(x[chunk], xi)))
    integrand = (1.0 + xi**2) ** (-cfg.alpha) * np.abs(transform) ** 2
    return float(trapezoid(integrand, xi)) / (2.0 * math.pi)


def h_neg_alpha_distance(mu, rho, cfg: DiagnosticsConfig | None = None) -> float:
    """||mu - rho||_{H^-alpha} with f^(xi) = int exp(-i xi x) f(dx).

    Both arguments may be empirical measures or line-grid densities (grid
    densities enter as trapezoidal point weights).
    """
    cfg = cfg or DiagnosticsConfig()
    xa, wa = _as_weighted_points(mu)
    xb, wb = _as_weighted_points(rho)
    dim = xa.shape[1]
    if xb.shape[1] != dim:
        raise ParameterError("measures live in different dimensions")
    if not cfg.alpha > dim / 2:
        raise ParameterError(f"alpha must exceed d/2 = {dim / 2}, got {cfg.alpha}")
    if cfg.method == "fourier":
        squared = _fourier_norm_sq(xa, wa, xb, wb, cfg)
    else:
        squared = (
            _kernel_energy(xa, wa, xa, wa, cfg.alpha, dim)
            - 2.0 * _kernel_energy(xa, wa, xb, wb, cfg.alpha, dim)
            + _kernel_energy(xb, wb, xb, wb, cfg.alpha, dim)
        )
    return math.sqrt(max(squared, 0.0))


# ----------------------------------------------------------------------
# Histograms
# ----------------------------------------------------------------------


def _grid_bin_masses(rho: GridDensity, edges: np.ndarray) -> np.ndarray:
    grid = rho.grid
    density = rho.values
    if grid.geometry == "radial":
        density = density * 4.0 * math.pi * grid.nodes**2
    inside = edges[(edges > grid.low) & (edges < grid.high)]
    nodes = np.union1d(grid.nodes, inside)
    values = np.interp(nodes, grid.nodes, density)
    cumulative = cumulative_trapezoid(values, nodes, initial=0.0)
    at_edges = np.interp(np.clip(edges, grid.low, grid.high), nodes, cumulative)
    return np.diff(at_edges)


def tv_histogram(mu: EmpiricalMeasure, rho: GridDensity, bins: int = 50) -> float:
    """1/2 sum over equal-width bins of |mu(bin) - int_bin rho|; mass off the grid counts fully."""
    if bins < 1:
        raise ParameterError(f"need at least one bin, got {bins}")
    edges = np.linspace(rho.grid.low, rho.grid.high, bins + 1)
    coords = mu.coordinates(rho.grid.geometry)
    mu_mass, _ = np.histogram(coords, bins=edges, weights=mu.weights)
    outside = max(0.0, 1.0 - float(mu_mass.sum()))
    rho_mass = _grid_bin_masses(rho, edges)
    tv = 0.5 * (float(np.sum(np.abs(mu_mass - rho_mass))) + outside)
    return min(max(tv, 0.0), 1.0)


def histogram_density(
    mu: EmpiricalMeasure,
    low: float,
    high: float,
    bins: int = 50,
    radial: bool = False,
    total: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Bin centers and densities; radial densities divide by shell volumes."""
    edges = np.linspace(low, high, bins + 1)
    coords = mu.coordinates("radial" if radial else "line")
    mass, _ = np.histogram(coords, bins=edges, weights=mu.weights)
    if radial:
        volume = 4.0 * math.pi / 3.0 * (edges[1:] ** 3 - edges[:-1] ** 3)
    else:
        volume = np.diff(edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, total * mass / volume


def merge_measures(measures: list[EmpiricalMeasure]) -> EmpiricalMeasure:
    """Pool measures, each weighted by its number of points."""
    if not measures:
        raise EmptyMeasureError("nothing to merge")
    points = np.concatenate([m.points for m in measures])
    total = sum(m.size for m in measures)
    weights = np.concatenate([m.weights * (m.size / total) for m in measures])
    return EmpiricalMeasure(points, weights, species=measures[0].species)


def fit_rate(N_values, error_values) -> RateFit:
    """Least-squares line through (log N, log err); err ~ N^slope."""
    n = np.asarray(N_values, dtype=float)
    err = np.asarray(error_values, dtype=float)
    if n.size != err.size:
        raise ParameterError("N and error lists differ in length")
    if n.size < 3:
        raise ParameterError(f"rate fit needs at least 3 points, got {n.size}")
    if np.any(n <= 0) or np.any(err <= 0):
        raise ParameterError("rate fit needs positive N and errors")
    log_n, log_err = np.log(n), np.log(err)
    slope, intercept = np.polyfit(log_n, log_err, 1)
    residual = math.sqrt(float(np.mean((log_err - (slope * log_n + intercept)) ** 2)))
    return RateFit(float(slope), float(intercept), residual)
