"""Random Batch Monte Carlo: batched Langevin proposals, Metropolis on the short-range part."""
import csv
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import EmptyMeasureError, NumericError, ParameterError, SingularityError
from app.gibbs import ParticleConfiguration
from app.jobs import run_jobs
from app.potentials import DomainSpec, PairKernel

logger = logging.getLogger(__name__)

MIRROR_PASSES = 8
LOW_ACCEPTANCE = 0.01


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    beta: float = Field(gt=0, description="inverse temperature")
    batch_size: int = Field(2, ge=2, description="batch size p (partners per force estimate + 1)")
    inner_steps: int = Field(1, ge=1, description="Langevin steps m per outer iteration")
    tau: float = Field(gt=0, description="Langevin step size")
    tau_schedule: Literal["constant", "polynomial"] = Field(
        "constant", description="constant, or tau * (1 + n / tau_decay_scale) ** -tau_decay_rate"
    )
    tau_decay_scale: float = Field(1000.0, gt=0, description="iteration scale of the polynomial decay")
    tau_decay_rate: float = Field(0.5, ge=0, description="exponent of the polynomial decay")
    burn_in: int = Field(0, ge=0, description="burn-in iterations N_b")
    iterations: int = Field(0, ge=0, description="sampling iterations N_s")
    thin: int = Field(1, ge=1, description="record every thin-th sampling iteration")
    seed: int = Field(0, ge=0, description="RNG seed")
    movers_per_iteration: int | Literal["all"] = Field(
        1, description="particles moved per outer iteration, or 'all'"
    )
    sweep: Literal["sequential", "simultaneous"] = Field(
        "sequential",
        description="sequential movers, or all movers from one snapshot (no short-range part only)",
    )
    batch_refresh: Literal["per_step", "per_iteration"] = Field(
        "per_step", description="redraw partner batches each inner step or once per iteration"
    )
    chains: int = Field(1, ge=1, description="independent chains")
    init_box: tuple[float, float] | None = Field(
        None, description="sub-range for the uniform initial placement"
    )

    @model_validator(mode="before")
    @classmethod
    def convert_times(cls, data):
        """Accept burn_in_time / end_time (in units of time) in place of iteration counts."""
        if not isinstance(data, dict):
            return data
        data = dict(data)
        burn_in_time = data.pop("burn_in_time", None)
        end_time = data.pop("end_time", None)
        if burn_in_time is None and end_time is None:
            return data
        tau = data.get("tau")
        if tau is None or tau <= 0:
            raise ValueError("time-based run lengths need a positive tau")
        step = tau * data.get("inner_steps", 1)
        if burn_in_time is not None:
            data["burn_in"] = int(round(burn_in_time / step))
        if end_time is not None:
            start = burn_in_time or 0.0
            if end_time < start:
                raise ValueError("end_time must not precede burn_in_time")
            data["iterations"] = int(round((end_time - start) / step))
        return data

    def movers_for(self, n_particles: int) -> int:
        if self.movers_per_iteration == "all":
            return n_particles
        return self.movers_per_iteration

    def tau_at(self, iteration: int) -> float:
        if self.tau_schedule == "constant":
            return self.tau
        return self.tau * (1.0 + iteration / self.tau_decay_scale) ** (-self.tau_decay_rate)


@dataclass
class ChainState:
    positions: np.ndarray
    rng: np.random.Generator
    iteration: int = 0
    proposed: int = 0
    accepted: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 1.0


@dataclass
class SampleStream:
    """Recorded configurations of one chain plus acceptance statistics."""

    configurations: np.ndarray
    iterations: np.ndarray
    species: np.ndarray
    proposed: int
    accepted: int
    wall_time: float
    chain: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 1.0

    @property
    def n_recorded(self) -> int:
        return self.configurations.shape[0]


# ----------------------------------------------------------------------
# Cell list
# ----------------------------------------------------------------------


class CellList:
    """Uniform cells of edge >= cutoff over a bounding box."""

    def __init__(self, positions: np.ndarray, cutoff: float, low, high):
        if not cutoff > 0:
            raise ParameterError(f"cell list cutoff must be positive, got {cutoff}")
        self.low = np.asarray(low, dtype=float)
        high = np.asarray(high, dtype=float)
        self.dim = self.low.size
        self.n_cells = np.maximum(1, np.floor((high - self.low) / cutoff).astype(int))
        self.edge = (high - self.low) / self.n_cells
        self._offsets = list(itertools.product((-1, 0, 1), repeat=self.dim))
        self.rebuild(positions)

    def rebuild(self, positions: np.ndarray):
        self.cells: dict[tuple, set[int]] = {}
        self.owner: list[tuple] = []
        for i, x in enumerate(np.asarray(positions, dtype=float)):
            key = self.cell_of(x)
            self.cells.setdefault(key, set()).add(i)
            self.owner.append(key)
        logger.debug(f"Cell list rebuilt: {len(self.owner)} particles in {len(self.cells)} cells")

    def cell_of(self, x) -> tuple:
        idx = np.floor((np.asarray(x, dtype=float) - self.low) / self.edge).astype(int)
        return tuple(np.clip(idx, 0, self.n_cells - 1).tolist())

    def move(self, i: int, x):
        key = self.cell_of(x)
        old = self.owner[i]
        if key == old:
            return
        self.cells[old].discard(i)
        if not self.cells[old]:
            del self.cells[old]
        self.cells.setdefault(key, set()).add(i)
        self.owner[i] = key

    def neighbors(self, x) -> set[int]:
        """Indices in the 3^d cells around x: a superset of those within the cutoff."""
        center = self.cell_of(x)
        found: set[int] = set()
        for offset in self._offsets:
            key = tuple(c + o for c, o in zip(center, offset))
            members = self.cells.get(key)
            if members:
                found |= members
        return found


# ----------------------------------------------------------------------
# Elementary moves
# ----------------------------------------------------------------------


def draw_partners(rng: np.random.Generator, i: int, n: int, p: int) -> np.ndarray:
    """p - 1 indices drawn uniformly without replacement from {0..n-1} minus i."""
    if p - 1 > n - 1:
        raise ParameterError(f"batch size p={p} exceeds the particle count N={n}")
    picks = rng.choice(n - 1, size=p - 1, replace=False)
    picks[picks >= i] += 1
    return picks


def cyclic_partners(rng: np.random.Generator, n: int, p: int) -> np.ndarray:
    """(n, p-1) partner table: each particle's p-1 successors on a random cycle."""
    if p - 1 > n - 1:
        raise ParameterError(f"batch size p={p} exceeds the particle count N={n}")
    order = rng.permutation(n)
    position = np.empty(n, dtype=int)
    position[order] = np.arange(n)
    shifts = np.arange(1, p)
    return order[(position[:, None] + shifts[None, :]) % n]


def _mirror_interval(values: np.ndarray, low: float, high: float) -> np.ndarray:
    values = values.copy()
    for _ in range(MIRROR_PASSES):
        below = values < low
        above = values > high
        if not (below.any() or above.any()):
            return values
        values = np.where(below, 2.0 * low - values, values)
        values = np.where(values > high, 2.0 * high - values, values)
    outside = (values < low) | (values > high)
    if outside.any():
        width = high - low
        folded = np.mod(values[outside] - low, 2.0 * width)
        folded = np.where(folded > width, 2.0 * width - folded, folded)
        values[outside] = low + folded
    return values


def reflect(x, domain: DomainSpec) -> np.ndarray:
    """Mirror points back into a reflecting domain; interior points are untouched."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NumericError("cannot reflect a non-finite position")
    if not domain.reflecting:
        return x
    if domain.kind == "box":
        return _mirror_interval(x, domain.low, domain.high)

    r = np.linalg.norm(x, axis=-1)
    inside = (r >= domain.low) & (r <= domain.high)
    if np.all(inside):
        return x
    safe = np.where(r > 0, r, 1.0)
    direction = x / safe[..., None]
    if np.any(r == 0):
        unit = np.zeros(x.shape[-1])
        unit[0] = 1.0
        direction = np.where((r == 0)[..., None], unit, direction)
    new_r = _mirror_interval(r, domain.low, domain.high)
    return np.where(inside[..., None], x, direction * new_r[..., None])


def acceptance_probability(delta: float, beta: float) -> float:
    """min(1, exp(-beta * delta)); an infinite energy change is rejected."""
    if math.isnan(delta):
        raise NumericError("energy change is NaN")
    if delta <= 0:
        return 1.0
    if math.isinf(delta):
        return 0.0
    return math.exp(-beta * delta)


def metropolis_ratio(
    proposal,
    current,
    others,
    kernel: PairKernel,
    beta: float,
    weights=1.0,
) -> float:
    """Acceptance probability from the short-range part over the given neighbors."""
    others = np.atleast_2d(np.asarray(others, dtype=float))
    if others.shape[0] == 0 or not kernel.has_singular_part:
        return 1.0
    w = np.broadcast_to(np.asarray(weights, dtype=float), (others.shape[0],))
    try:
        new = kernel.singular_part(np.asarray(proposal, dtype=float) - others)
    except SingularityError:
        return 0.0
    old = kernel.singular_part(np.asarray(current, dtype=float) - others)
    delta = math.fsum(np.concatenate([w * new, -w * old]).tolist())
    return acceptance_probability(delta, beta)


def langevin_batch_proposal(
    state: ChainState,
    i: int,
    config: SamplerConfig,
    system,
    domain: DomainSpec | None = None,
) -> np.ndarray:
    """m noisy gradient steps for particle i with random-batch pair forces."""
    positions = state.positions
    n, d = positions.shape
    tau = config.tau_at(state.iteration)
    noise = math.sqrt(2.0 * tau / config.beta)
    x = positions[i].copy()
    mover = np.array([i])
    partners = None
    for step in range(config.inner_steps):
        if partners is None or config.batch_refresh == "per_step":
            partners = draw_partners(state.rng, i, n, config.batch_size)
        grad = system.drift(x[None, :], mover, positions, partners[None, :])[0]
        z = state.rng.standard_normal(d)
        x = x - grad * tau + noise * z
        if domain is not None and domain.reflecting:
            x = reflect(x, domain)
    return x


def _simultaneous_sweep(state: ChainState, movers: np.ndarray, config: SamplerConfig, system, domain):
    snapshot = state.positions
    n, d = snapshot.shape
    tau = config.tau_at(state.iteration)
    noise = math.sqrt(2.0 * tau / config.beta)
    x = snapshot[movers].copy()
    table = None
    for step in range(config.inner_steps):
        if table is None or config.batch_refresh == "per_step":
            table = cyclic_partners(state.rng, n, config.batch_size)
        grad = system.drift(x, movers, snapshot, table[movers])
        x = x - grad * tau + noise * state.rng.standard_normal(x.shape)
        if domain.reflecting:
            x = reflect(x, domain)
    state.positions = snapshot.copy()
    state.positions[movers] = x
    state.proposed += movers.size
    state.accepted += movers.size


def _sequential_sweep(state: ChainState, movers: np.ndarray, config: SamplerConfig, system, domain, cells):
    for i in movers:
        proposal = langevin_batch_proposal(state, i, config, system, domain)
        state.proposed += 1
        if cells is not None:
            neighbors = cells.neighbors(proposal) | cells.neighbors(state.positions[i])
            delta = system.short_range_delta(i, proposal, state.positions, neighbors)
            if state.rng.random() >= acceptance_probability(delta, config.beta):
                continue
            cells.move(i, proposal)
        state.positions[i] = proposal
        state.accepted += 1


def _select_movers(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    if m == n:
        return rng.permutation(n)
    if m == 1:
        return np.array([rng.integers(n)])
    return rng.choice(n, size=m, replace=False)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chain,)))


def rbmc_run(
    initial: ParticleConfiguration,
    system,
    config: SamplerConfig,
    chain: int = 0,
    rng: np.random.Generator | None = None,
) -> SampleStream:
    """Burn in for N_b iterations, then record every thin-th of N_s iterations."""
    n = initial.n_particles
    domain = initial.domain
    if n != system.n_particles:
        raise ParameterError(f"configuration has {n} particles, system expects {system.n_particles}")
    if config.batch_size > n:
        raise ParameterError(f"batch size p={config.batch_size} exceeds N={n}")
    n_movers = config.movers_for(n)
    if n_movers > n:
        raise ParameterError(f"cannot move {n_movers} of {n} particles per iteration")
    if config.sweep == "simultaneous" and system.has_short_range:
        raise ParameterError("simultaneous sweeps need a system without short-range part")

    state = ChainState(initial.positions.copy(), rng or chain_rng(config.seed, chain))
    cells = None
    if system.has_short_range:
        low, high = domain.bounding_box()
        cells = CellList(state.positions, system.short_range_cutoff, low, high)

    n_records = config.iterations // config.thin
    records = np.empty((n_records, n, initial.dim))
    record_iterations = np.empty(n_records, dtype=np.int64)
    total = config.burn_in + config.iterations
    started = time.perf_counter()
    recorded = 0

    for t in range(total):
        state.iteration = t
        movers = _select_movers(state.rng, n, n_movers)
        if config.sweep == "simultaneous":
            _simultaneous_sweep(state, movers, config, system, domain)
        else:
            _sequential_sweep(state, movers, config, system, domain, cells)
        if t + 1 == config.burn_in:
            logger.info(f"Chain {chain}: burn-in done after {config.burn_in} iterations")
        sampled = t + 1 - config.burn_in
        if sampled > 0 and sampled % config.thin == 0 and recorded < n_records:
            records[recorded] = state.positions
            record_iterations[recorded] = t + 1
            recorded += 1

    if not np.all(np.isfinite(state.positions)):
        raise NumericError(f"chain {chain} produced non-finite positions")
    wall_time = time.perf_counter() - started
    if state.acceptance_rate < LOW_ACCEPTANCE:
        logger.warning(f"Chain {chain}: acceptance rate {state.acceptance_rate:.4f} is very low")
    logger.info(
        f"Chain {chain}: {total} iterations, {recorded} records, "
        f"acceptance {state.acceptance_rate:.4f}, {wall_time:.1f}s"
    )
    return SampleStream(
        configurations=records,
        iterations=record_iterations,
        species=initial.species.copy(),
        proposed=state.proposed,
        accepted=state.accepted,
        wall_time=wall_time,
        chain=chain,
    )


def empirical_from_samples(samples, species: int | None = None):
    """Equal-weight empirical measure over every particle of every recorded configuration."""
    from app.diagnostics import EmpiricalMeasure

    streams = samples if isinstance(samples, (list, tuple)) else [samples]
    blocks = []
    for stream in streams:
        if isinstance(stream, SampleStream):
            configs, tags = stream.configurations, stream.species
        else:
            configs = np.asarray(stream, dtype=float)
            if configs.ndim == 2:
                configs = configs[:, :, None]
            tags = np.zeros(configs.shape[1], dtype=int)
        if species is not None:
            configs = configs[:, tags == species, :]
        if configs.size:
            blocks.append(configs.reshape(-1, configs.shape[-1]))
    if not blocks:
        raise EmptyMeasureError("no recorded configurations")
    points = np.concatenate(blocks)
    return EmpiricalMeasure.uniform(points, species=species)


def initial_configuration(
    system,
    domain: DomainSpec,
    rng: np.random.Generator,
    init_box: tuple[float, float] | None = None,
) -> ParticleConfiguration:
    positions = domain.sample_uniform(system.n_particles, rng, init_box)
    return ParticleConfiguration(positions, domain, system.species_index())


@dataclass
class ChainJob:
    system: object
    domain: DomainSpec
    config: SamplerConfig
    chain: int
    initial: np.ndarray | None = field(default=None, repr=False)


def run_chain_job(job: ChainJob) -> SampleStream:
    rng = chain_rng(job.config.seed, job.chain)
    if job.initial is None:
        initial = initial_configuration(job.system, job.domain, rng, job.config.init_box)
    else:
        initial = ParticleConfiguration(job.initial, job.domain, job.system.species_index())
    return rbmc_run(initial, job.system, job.config, chain=job.chain, rng=rng)


def run_chains(
    system,
    domain: DomainSpec,
    config: SamplerConfig,
    workers: int | None = None,
    first_chain: int = 0,
) -> list[SampleStream]:
    jobs = [ChainJob(system, domain, config, first_chain + c) for c in range(config.chains)]
    return run_jobs(run_chain_job, jobs, workers)


def write_samples_csv(path: Path, streams: list[SampleStream], dim_labels: list[str] | None = None):
    """Tidy sample stream: chain, iteration, particle, species, x0..x{d-1}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = streams[0].configurations.shape[-1] if streams else 1
    labels = dim_labels or [f"x{k}" for k in range(dim)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["chain", "iteration", "particle", "species", *labels])
        for stream in streams:
            for config, iteration in zip(stream.configurations, stream.iterations):
                for particle, (tag, x) in enumerate(zip(stream.species, config)):
                    writer.writerow([stream.chain, int(iteration), particle, int(tag), *map(repr, x.tolist())])
    logger.info(f"Wrote samples to {path}")
