"""External potentials, radial pair kernels and simulation domains."""
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from app.errors import ParameterError, SingularityError


def _as_points(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _radii(z) -> np.ndarray:
    return np.linalg.norm(_as_points(z), axis=-1)


def _require_positive(**values: float):
    for name, value in values.items():
        if not (value > 0 and math.isfinite(value)):
            raise ParameterError(f"{name} must be positive and finite, got {value}")


# ----------------------------------------------------------------------
# Domains
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    """Box [low, high]^d, annulus B(0, high) minus B(0, low), or all of R^d."""

    kind: Literal["box", "annulus", "all_space"]
    dim: int
    low: float = 0.0
    high: float = 1.0
    boundary: Literal["reflecting", "none"] = "reflecting"

    def __post_init__(self):
        if self.dim < 1:
            raise ParameterError(f"dimension must be >= 1, got {self.dim}")
        if self.kind == "all_space":
            if self.boundary != "none":
                raise ParameterError("all_space domains have no boundary")
            return
        if not self.low < self.high:
            raise ParameterError(f"empty {self.kind}: low={self.low}, high={self.high}")
        if self.kind == "annulus" and self.low < 0:
            raise ParameterError("annulus inner radius must be nonnegative")

    @property
    def bounded(self) -> bool:
        return self.kind != "all_space"

    @property
    def reflecting(self) -> bool:
        return self.bounded and self.boundary == "reflecting"

    def contains(self, points) -> np.ndarray:
        x = _as_points(points)
        if self.kind == "box":
            return np.all((x >= self.low) & (x <= self.high), axis=-1)
        if self.kind == "annulus":
            r = np.linalg.norm(x, axis=-1)
            return (r >= self.low) & (r <= self.high)
        return np.all(np.isfinite(x), axis=-1)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "box":
            return np.full(self.dim, self.low), np.full(self.dim, self.high)
        if self.kind == "annulus":
            return np.full(self.dim, -self.high), np.full(self.dim, self.high)
        raise ParameterError("all_space has no bounding box")

    def sample_uniform(
        self,
        n: int,
        rng: np.random.Generator,
        sub_range: tuple[float, float] | None = None,
    ) -> np.ndarray:
        """Uniform placement; for annuli uniform in volume between the radii.

        ``sub_range`` narrows the box edges (or annulus radii) to a sub-region.
        """
        low, high = sub_range if sub_range is not None else (self.low, self.high)
        if self.kind == "box":
            return rng.uniform(low, high, size=(n, self.dim))
        if self.kind == "annulus":
            d = self.dim
            u = rng.random(n)
            r = (low**d + u * (high**d - low**d)) ** (1.0 / d)
            direction = rng.standard_normal((n, d))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            return direction * r[:, None]
        if sub_range is None:
            raise ParameterError("all_space placement needs an explicit init box")
        return rng.uniform(low, high, size=(n, self.dim))


# ----------------------------------------------------------------------
# External potentials
# ----------------------------------------------------------------------


class ExternalPotential:
    """U: R^d -> R, evaluated on arrays of shape (..., d)."""

    def evaluate(self, x) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class QuadraticConfinement(ExternalPotential):
    stiffness: float

    def evaluate(self, x) -> np.ndarray:
        x = _as_points(x)
        return 0.5 * self.stiffness * np.sum(x * x, axis=-1)

    def gradient(self, x) -> np.ndarray:
        return self.stiffness * _as_points(x)


@dataclass(frozen=True)
class ZeroPotential(ExternalPotential):
    def evaluate(self, x) -> np.ndarray:
        return np.zeros(_as_points(x).shape[:-1])

    def gradient(self, x) -> np.ndarray:
        return np.zeros_like(_as_points(x))


@dataclass(frozen=True)
class PointChargePotential(ExternalPotential):
    """U(x) = Q W(x): the field of a free charge Q sitting at the origin."""

    charge: float
    kernel: "PairKernel"

    def evaluate(self, x) -> np.ndarray:
        return self.charge * self.kernel.total(x)

    def gradient(self, x) -> np.ndarray:
        return self.charge * self.kernel.gradient_total(x)


def quadratic_confinement(lam: float) -> QuadraticConfinement:
    if not (lam >= 0 and math.isfinite(lam)):
        raise ParameterError(f"stiffness must be nonnegative, got {lam}")
    return QuadraticConfinement(float(lam))


def zero_potential() -> ZeroPotential:
    return ZeroPotential()


def point_charge_potential(charge: float, kernel: "PairKernel") -> PointChargePotential:
    return PointChargePotential(float(charge), kernel)


# ----------------------------------------------------------------------
# Pair kernels
# ----------------------------------------------------------------------


class PairKernel:
    """Symmetric two-body potential W = W1 (smooth) + W2 (singular, compact).

    Subclasses provide the radial profiles. ``cutoff`` is the support radius
    of the singular part (None when W2 == 0); ``sup_norm_bound`` is None for
    unbounded kernels.
    """

    cutoff: float | None = None
    sup_norm_bound: float | None = None

    def profile(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def smooth_profile(self, r: np.ndarray) -> np.ndarray:
        return self.profile(r)

    def smooth_slope(self, r: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def total_slope(self, r: np.ndarray) -> np.ndarray:
        return self.smooth_slope(r)

    @property
    def has_singular_part(self) -> bool:
        return self.cutoff is not None

    def total(self, z) -> np.ndarray:
        return self.profile(_radii(z))

    def smooth_part(self, z) -> np.ndarray:
        return self.smooth_profile(_radii(z))

    def singular_part(self, z) -> np.ndarray:
        r = _radii(z)
        if not self.has_singular_part:
            return np.zeros_like(r)
        inside = r <= self.cutoff
        out = np.zeros_like(r)
        if np.any(inside):
            near = r[inside]
            out[inside] = self.profile(near) - self.smooth_profile(near)
        return out

    def gradient_smooth(self, z) -> np.ndarray:
        return self._radial_gradient(z, self.smooth_slope)

    def gradient_total(self, z) -> np.ndarray:
        return self._radial_gradient(z, self.total_slope)

    @staticmethod
    def _radial_gradient(z, slope) -> np.ndarray:
        z = _as_points(z)
        r = np.linalg.norm(z, axis=-1)
        safe = np.where(r > 0, r, 1.0)
        factor = np.where(r > 0, slope(safe) / safe, 0.0)
        return factor[..., None] * z

    def shell_average(self, r, r_prime) -> np.ndarray:
        """Average of W over a sphere of radius r' seen from radius r (3D)."""
        raise ParameterError(f"{type(self).__name__} has no radial shell average")


def _reject_origin(r: np.ndarray, name: str):
    if np.any(np.asarray(r) == 0):
        raise SingularityError(f"{name} is singular at r = 0")


@dataclass(frozen=True)
class Coulomb1D(PairKernel):
    """W(x) = |x| / (2 eps): the field of a charged sheet, no splitting needed."""

    epsilon: float

    def profile(self, r):
        return np.asarray(r, dtype=float) / (2.0 * self.epsilon)

    def smooth_slope(self, r):
        return np.full_like(np.asarray(r, dtype=float), 1.0 / (2.0 * self.epsilon))


@dataclass(frozen=True)
class Coulomb3DSplit(PairKernel):
    """1/(4 pi eps r) with the linear inner continuation as W1 below r_c."""

    epsilon: float
    r_c: float

    @property
    def cutoff(self) -> float:
        return self.r_c

    @property
    def prefactor(self) -> float:
        return 1.0 / (4.0 * math.pi * self.epsilon)

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        _reject_origin(r, "Coulomb potential")
        return self.prefactor / r

    def smooth_profile(self, r):
        r = np.asarray(r, dtype=float)
        rc = self.r_c
        inner = -(r - rc) / rc**2 + 1.0 / rc
        safe = np.where(r > rc, r, rc)
        return self.prefactor * np.where(r <= rc, inner, 1.0 / safe)

    def smooth_slope(self, r):
        r = np.asarray(r, dtype=float)
        safe = np.where(r > self.r_c, r, self.r_c)
        return -self.prefactor / safe**2

    def total_slope(self, r):
        r = np.asarray(r, dtype=float)
        _reject_origin(r, "Coulomb potential")
        return -self.prefactor / r**2

    def shell_average(self, r, r_prime):
        return self.prefactor / np.maximum(r, r_prime)


@dataclass(frozen=True)
class Coulomb3DCutoff(PairKernel):
    """Coulomb potential mollified inside r_N; bounded by 3/(8 pi eps r_N)."""

    epsilon: float
    r_n: float

    @property
    def sup_norm_bound(self) -> float:
        return 3.0 / (8.0 * math.pi * self.epsilon * self.r_n)

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        rn = self.r_n
        inner = (3.0 - r**2 / rn**2) / (8.0 * math.pi * self.epsilon * rn)
        safe = np.where(r >= rn, r, rn)
        return np.where(r < rn, inner, 1.0 / (4.0 * math.pi * self.epsilon * safe))

    def smooth_slope(self, r):
        r = np.asarray(r, dtype=float)
        rn = self.r_n
        safe = np.where(r >= rn, r, rn)
        return np.where(
            r < rn,
            -r / (4.0 * math.pi * self.epsilon * rn**3),
            -1.0 / (4.0 * math.pi * self.epsilon * safe**2),
        )


@dataclass(frozen=True)
class LennardJones(PairKernel):
    """4 eps [(sigma/r)^12 - (sigma/r)^6].

    The attractive tail beyond the truncation radius is the smooth part,
    held at its truncation value inside, so both parts are continuous and
    the singular part vanishes at the cutoff.
    """

    epsilon: float
    sigma: float
    truncation: float

    @property
    def cutoff(self) -> float:
        return self.truncation

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        _reject_origin(r, "Lennard-Jones potential")
        s6 = (self.sigma / r) ** 6
        return 4.0 * self.epsilon * (s6 * s6 - s6)

    def smooth_profile(self, r):
        r = np.asarray(r, dtype=float)
        safe = np.where(r > self.truncation, r, self.truncation)
        s6 = (self.sigma / safe) ** 6
        return 4.0 * self.epsilon * (s6 * s6 - s6)

    def smooth_slope(self, r):
        r = np.asarray(r, dtype=float)
        safe = np.where(r > self.truncation, r, self.truncation)
        return np.where(r > self.truncation, self._slope(safe), 0.0)

    def total_slope(self, r):
        r = np.asarray(r, dtype=float)
        _reject_origin(r, "Lennard-Jones potential")
        return self._slope(r)

    def _slope(self, r):
        s6 = (self.sigma / r) ** 6
        return 4.0 * self.epsilon * (-12.0 * s6 * s6 + 6.0 * s6) / r


@dataclass(frozen=True)
class GaussianKernel(PairKernel):
    amplitude: float = 1.0
    width: float = 1.0

    @property
    def sup_norm_bound(self) -> float:
        return abs(self.amplitude)

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        return self.amplitude * np.exp(-(r / self.width) ** 2)

    def smooth_slope(self, r):
        r = np.asarray(r, dtype=float)
        return -2.0 * r / self.width**2 * self.profile(r)


@dataclass(frozen=True)
class ConstantKernel(PairKernel):
    value: float = 0.0

    @property
    def sup_norm_bound(self) -> float:
        return abs(self.value)

    def profile(self, r):
        return np.full_like(np.asarray(r, dtype=float), self.value)

    def smooth_slope(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def shell_average(self, r, r_prime):
        return np.full(np.broadcast(np.asarray(r), np.asarray(r_prime)).shape, self.value)


@dataclass(frozen=True)
class ScaledKernel(PairKernel):
    """factor * base, keeping the base kernel's split and support."""

    base: PairKernel
    factor: float

    @property
    def cutoff(self) -> float | None:
        return self.base.cutoff

    @property
    def sup_norm_bound(self) -> float | None:
        bound = self.base.sup_norm_bound
        return None if bound is None else abs(self.factor) * bound

    def profile(self, r):
        return self.factor * self.base.profile(r)

    def smooth_profile(self, r):
        return self.factor * self.base.smooth_profile(r)

    def smooth_slope(self, r):
        return self.factor * self.base.smooth_slope(r)

    def total_slope(self, r):
        return self.factor * self.base.total_slope(r)

    def shell_average(self, r, r_prime):
        return self.factor * self.base.shell_average(r, r_prime)


def scaled_kernel(kernel: PairKernel, factor: float) -> ScaledKernel:
    if not math.isfinite(factor):
        raise ParameterError(f"kernel factor must be finite, got {factor}")
    return ScaledKernel(kernel, float(factor))


def coulomb_1d(epsilon: float) -> Coulomb1D:
    _require_positive(epsilon=epsilon)
    return Coulomb1D(float(epsilon))


def coulomb_3d_split(epsilon: float, r_c: float) -> Coulomb3DSplit:
    _require_positive(epsilon=epsilon, r_c=r_c)
    return Coulomb3DSplit(float(epsilon), float(r_c))


def coulomb_3d_cutoff(epsilon: float, r_n: float) -> Coulomb3DCutoff:
    _require_positive(epsilon=epsilon, r_n=r_n)
    return Coulomb3DCutoff(float(epsilon), float(r_n))


def lennard_jones(epsilon_lj: float, sigma: float, truncation: float | None = None) -> LennardJones:
    _require_positive(epsilon_lj=epsilon_lj, sigma=sigma)
    truncation = 2.5 * sigma if truncation is None else truncation
    _require_positive(truncation=truncation)
    return LennardJones(float(epsilon_lj), float(sigma), float(truncation))


def gaussian_kernel(amplitude: float = 1.0, width: float = 1.0) -> GaussianKernel:
    _require_positive(width=width)
    return GaussianKernel(float(amplitude), float(width))


def constant_kernel(value: float) -> ConstantKernel:
    return ConstantKernel(float(value))


def zero_kernel() -> ConstantKernel:
    return ConstantKernel(0.0)


def cutoff_radius_for(n_particles: int, dim: int, gamma: float | None = None) -> float:
    """r_N = N^(-gamma); gamma defaults to 1/(2d)."""
    if n_particles < 1:
        raise ParameterError(f"particle count must be positive, got {n_particles}")
    gamma = 1.0 / (2.0 * dim) if gamma is None else gamma
    _require_positive(gamma=gamma)
    return float(n_particles) ** (-gamma)
