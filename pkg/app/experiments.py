"""Experiment runners behind ``python -m app run`` and ``POST /api/runs``."""
import asyncio
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from app import __version__
from app.config import ExperimentConfig, OracleConfig, PotentialsConfig
from app.database import finish_run, init_db, insert_run
from app.diagnostics import (
    TEST_FUNCTIONS,
    fit_rate,
    histogram_density,
    mswe,
    tv_histogram,
    weak_error,
)
from app.errors import ParameterError
from app.gibbs import SpeciesSystem, beta_threshold, pb_system
from app.jobs import run_jobs
from app.neural import (
    generate_data,
    predict,
    target_function,
    train_by_sampling,
    train_sgd,
)
from app.oracle import (
    Grid,
    GridDensity,
    boltzmann,
    mean_field_free_energy,
    mean_field_free_energy_species,
    picard_fixed_point,
    picard_two_species,
    stationarity_residual,
    stationarity_residual_species,
)
from app.potentials import (
    DomainSpec,
    ExternalPotential,
    PairKernel,
    constant_kernel,
    coulomb_1d,
    coulomb_3d_cutoff,
    cutoff_radius_for,
    gaussian_kernel,
    quadratic_confinement,
    zero_kernel,
    zero_potential,
)
from app.sampler import (
    ChainJob,
    SamplerConfig,
    SampleStream,
    empirical_from_samples,
    run_chain_job,
    run_chains,
    write_samples_csv,
)

logger = logging.getLogger(__name__)

DEFAULT_EXACTNESS_NODES = 4097
DEFAULT_EXACTNESS_PARTICLES = 64


@dataclass
class RunResult:
    metrics: dict
    outputs: list[str] = field(default_factory=list)
    acceptance_rate: float | None = None


def _write_csv(path: Path, header: list[str], rows) -> str:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.info(f"Wrote {path}")
    return path.name


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def _acceptance(streams: list[SampleStream]) -> float:
    proposed = sum(s.proposed for s in streams)
    accepted = sum(s.accepted for s in streams)
    return accepted / proposed if proposed else 1.0


# ----------------------------------------------------------------------
# Builders
# ----------------------------------------------------------------------


def _domain(config: ExperimentConfig) -> DomainSpec:
    d = config.domain
    return DomainSpec(d.kind, d.dim, d.low, d.high, d.boundary)


def _pb(config: ExperimentConfig, n_plus: int | None = None) -> SpeciesSystem:
    pb = config.pb
    return pb_system(
        config.domain.dim,
        pb.epsilon,
        pb.Q_f,
        pb.Q_plus,
        n_plus or pb.n_plus,
        pb.z_plus,
        pb.z_minus,
        r_c=pb.r_c,
        lj_epsilon=pb.lj_epsilon,
        lj_sigma=pb.lj_sigma,
        interaction=pb.interaction,
    )


def _external(potentials: PotentialsConfig) -> ExternalPotential:
    if potentials.external == "zero":
        return zero_potential()
    return quadratic_confinement(potentials.stiffness)


def _kernel(potentials: PotentialsConfig, n_particles: int, dim: int) -> PairKernel:
    match potentials.kernel:
        case "zero":
            return zero_kernel()
        case "constant":
            return constant_kernel(potentials.value)
        case "gaussian":
            return gaussian_kernel(potentials.amplitude, potentials.width)
        case "coulomb1d":
            return coulomb_1d(potentials.epsilon)
        case "coulomb3d_cutoff":
            r_n = potentials.r_n or cutoff_radius_for(n_particles, dim, potentials.gamma)
            return coulomb_3d_cutoff(potentials.epsilon, r_n)
    raise ParameterError(f"unknown kernel {potentials.kernel!r}")


def _grid(
    oracle: OracleConfig | None,
    domain: DomainSpec,
    geometry: str = "line",
    nodes: int | None = None,
) -> Grid:
    low = oracle.low if oracle and oracle.low is not None else None
    high = oracle.high if oracle and oracle.high is not None else None
    if low is None or high is None:
        if not domain.bounded:
            raise ParameterError("unbounded domains need [oracle] low and high")
        low = domain.low if low is None else low
        high = domain.high if high is None else high
    n = nodes or (oracle.nodes if oracle else DEFAULT_EXACTNESS_NODES)
    return Grid.uniform(low, high, n, geometry)


def _solve_pair(system: SpeciesSystem, beta: float, grid: Grid, oracle: OracleConfig):
    return picard_two_species(
        system, beta, grid, oracle.damping, oracle.tol, oracle.max_iter
    )


def _species_charge(system: SpeciesSystem, k: int) -> float:
    sp = system.species[k]
    return sp.count * system.charge_unit * abs(sp.valence)


# ----------------------------------------------------------------------
# Poisson-Boltzmann
# ----------------------------------------------------------------------


def run_pb1d(config: ExperimentConfig, out: Path) -> RunResult:
    """Sampled cation/anion densities on (a, b) against the two-species oracle."""
    domain = _domain(config)
    if domain.dim != 1 or domain.kind != "box":
        raise ParameterError("pb1d runs on a one-dimensional box")
    system = _pb(config)
    sampler = config.sampler_config()
    diag = config.diagnostics_config()
    grid = _grid(config.oracle, domain)

    rho_plus, rho_minus = _solve_pair(system, sampler.beta, grid, config.oracle)
    streams = run_chains(system, domain, sampler)
    measures = [empirical_from_samples(streams, species=k) for k in (0, 1)]

    centers, sampled_plus = histogram_density(measures[0], grid.low, grid.high, diag.bins)
    _, sampled_minus = histogram_density(measures[1], grid.low, grid.high, diag.bins)
    oracle_plus = np.interp(centers, grid.nodes, rho_plus.values)
    oracle_minus = np.interp(centers, grid.nodes, rho_minus.values)

    outputs = [
        _write_csv(
            out / "density.csv",
            ["x", "rho_plus", "rho_minus", "sampled_plus", "sampled_minus"],
            zip(centers, oracle_plus, oracle_minus, sampled_plus, sampled_minus),
        )
    ]
    write_samples_csv(out / "samples.csv", streams)
    outputs.append("samples.csv")

    f = TEST_FUNCTIONS[diag.test_function]
    metrics = {
        "n_plus": system.species[0].count,
        "n_minus": system.species[1].count,
        "charge_unit": system.charge_unit,
        "err_plus": weak_error(measures[0], rho_plus, f),
        "err_minus": weak_error(measures[1], rho_minus, f),
        "tv_plus": tv_histogram(measures[0], rho_plus, diag.bins),
        "tv_minus": tv_histogram(measures[1], rho_minus, diag.bins),
        "picard_iterations": rho_plus.iterations,
        "picard_residual": rho_plus.residual,
        "stationarity_residual": stationarity_residual_species(
            [rho_plus, rho_minus], system, sampler.beta
        ),
        "free_energy": mean_field_free_energy_species([rho_plus, rho_minus], system, sampler.beta),
        "recorded_configurations": sum(s.n_recorded for s in streams),
    }
    return RunResult(metrics, outputs, _acceptance(streams))


def run_pb3d(config: ExperimentConfig, out: Path) -> RunResult:
    """Radial densities around a charged colloid, scaled to the species charges."""
    domain = _domain(config)
    if domain.dim != 3 or domain.kind != "annulus":
        raise ParameterError("pb3d runs on a three-dimensional annulus")
    system = _pb(config)
    sampler = config.sampler_config()
    diag = config.diagnostics_config()
    q = system.charge_unit

    audit = sum(sp.count * q * sp.valence for sp in system.species) + config.pb.Q_f
    if abs(audit) > q:
        logger.warning(f"Charge audit off by {audit:.3g}, more than one charge unit {q:.3g}")

    grid = _grid(config.oracle, domain, geometry="radial")
    rho_plus, rho_minus = _solve_pair(system, sampler.beta, grid, config.oracle)
    streams = run_chains(system, domain, sampler)
    measures = [empirical_from_samples(streams, species=k) for k in (0, 1)]
    charges = [_species_charge(system, k) for k in (0, 1)]

    centers, sampled_plus = histogram_density(
        measures[0], domain.low, domain.high, diag.bins, radial=True, total=charges[0]
    )
    _, sampled_minus = histogram_density(
        measures[1], domain.low, domain.high, diag.bins, radial=True, total=charges[1]
    )
    oracle_plus = charges[0] * np.interp(centers, grid.nodes, rho_plus.values)
    oracle_minus = charges[1] * np.interp(centers, grid.nodes, rho_minus.values)

    outputs = [
        _write_csv(
            out / "density_radial.csv",
            ["r", "rho_plus", "rho_minus", "oracle_plus", "oracle_minus"],
            zip(centers, sampled_plus, sampled_minus, oracle_plus, oracle_minus),
        )
    ]
    radii = np.concatenate([np.linalg.norm(m.points, axis=1) for m in measures])
    metrics = {
        "n_plus": system.species[0].count,
        "n_minus": system.species[1].count,
        "charge_unit": q,
        "charge_audit": audit,
        "Q_plus": charges[0],
        "Q_minus": charges[1],
        "min_radius": float(radii.min()),
        "max_radius": float(radii.max()),
        "tv_plus": tv_histogram(measures[0], rho_plus, diag.bins),
        "tv_minus": tv_histogram(measures[1], rho_minus, diag.bins),
        "picard_iterations": rho_plus.iterations,
        "recorded_configurations": sum(s.n_recorded for s in streams),
    }
    return RunResult(metrics, outputs, _acceptance(streams))


@dataclass
class ConvergenceJob:
    chain: ChainJob
    n_plus: int
    repetition: int
    rho_plus: GridDensity
    rho_minus: GridDensity
    test_function: str


def run_convergence_job(job: ConvergenceJob) -> dict:
    stream = run_chain_job(job.chain)
    f = TEST_FUNCTIONS[job.test_function]
    mu_plus = empirical_from_samples(stream, species=0)
    mu_minus = empirical_from_samples(stream, species=1)
    return {
        "n_plus": job.n_plus,
        "repetition": job.repetition,
        "err_plus": weak_error(mu_plus, job.rho_plus, f),
        "err_minus": weak_error(mu_minus, job.rho_minus, f),
        "samples": mu_plus.size,
        "proposed": stream.proposed,
        "accepted": stream.accepted,
    }


def run_convergence(config: ExperimentConfig, out: Path) -> RunResult:
    """M independent runs per N_+; MSWE of the relative weak error and its log-log slope."""
    domain = _domain(config)
    sampler = config.sampler_config()
    study = config.study
    diag = config.diagnostics_config()
    n_values = study.n_values or [config.pb.n_plus]
    grid = _grid(config.oracle, domain)

    oracles: dict[tuple, tuple[GridDensity, GridDensity]] = {}
    jobs = []
    for index, n_plus in enumerate(n_values):
        system = _pb(config, n_plus)
        key = tuple(
            round(system.coupling(k, l), 12) for k in range(2) for l in range(2)
        )
        if key not in oracles:
            oracles[key] = _solve_pair(system, sampler.beta, grid, config.oracle)
        rho_plus, rho_minus = oracles[key]
        for rep in range(study.repetitions):
            chain = ChainJob(system, domain, sampler, index * study.repetitions + rep)
            jobs.append(ConvergenceJob(chain, n_plus, rep, rho_plus, rho_minus, diag.test_function))

    logger.info(f"Convergence study: {len(n_values)} particle counts x {study.repetitions} repetitions")
    results = run_jobs(run_convergence_job, jobs)

    by_n: dict[int, list[dict]] = {}
    for r in results:
        by_n.setdefault(r["n_plus"], []).append(r)
    errors = {
        n: mswe([r["err_plus"] for r in rs], [r["err_minus"] for r in rs]) for n, rs in by_n.items()
    }
    slope = intercept = residual = None
    if len(errors) >= 3:
        fit = fit_rate(list(errors), list(errors.values()))
        slope, intercept, residual = fit.slope, fit.intercept, fit.residual
        logger.info(f"MSWE ~ N^{slope:.3f} (rms log residual {residual:.3f})")
    else:
        logger.info(f"Only {len(errors)} particle counts; no rate fit")

    outputs = [
        _write_csv(
            out / "runs.csv",
            ["N", "err_plus", "err_minus", "repetition"],
            ((r["n_plus"], r["err_plus"], r["err_minus"], r["repetition"]) for r in results),
        ),
        _write_csv(
            out / "rates.csv",
            ["N", "mswe", "slope"],
            ((n, e, "" if slope is None else slope) for n, e in errors.items()),
        ),
    ]
    proposed = sum(r["proposed"] for r in results)
    accepted = sum(r["accepted"] for r in results)
    metrics = {
        "slope": slope,
        "intercept": intercept,
        "fit_residual": residual,
        "mswe": {str(n): e for n, e in errors.items()},
        "min_samples_per_run": min(r["samples"] for r in results),
    }
    return RunResult(metrics, outputs, accepted / proposed if proposed else 1.0)


# ----------------------------------------------------------------------
# Property studies
# ----------------------------------------------------------------------


@dataclass
class MarginalJob:
    chain: ChainJob
    label: float
    rho: GridDensity
    bins: int
    test_function: str


def run_marginal_job(job: MarginalJob) -> dict:
    stream = run_chain_job(job.chain)
    mu = empirical_from_samples(stream)
    return {
        "label": job.label,
        "tv": tv_histogram(mu, job.rho, job.bins),
        "weak_error": weak_error(mu, job.rho, TEST_FUNCTIONS[job.test_function]),
        "points": mu.size,
        "proposed": stream.proposed,
        "accepted": stream.accepted,
    }


def _rate(results: list[dict]) -> float:
    proposed = sum(r["proposed"] for r in results)
    return sum(r["accepted"] for r in results) / proposed if proposed else 1.0


def run_fixedpoint(config: ExperimentConfig, out: Path) -> RunResult:
    """Picard oracle, its grid refinement, and sampler TV distance per N."""
    domain = _domain(config)
    sampler = config.sampler_config()
    study = config.study
    diag = config.diagnostics_config()
    oracle = config.oracle
    n_values = study.n_values or [2]
    U = _external(config.potentials)
    W = _kernel(config.potentials, max(n_values), domain.dim)
    beta = sampler.beta

    try:
        threshold = beta_threshold(W)
        if beta >= threshold:
            logger.warning(f"beta={beta} is not below the small-beta threshold {threshold:.4g}")
    except ParameterError:
        threshold = None
        logger.info("Kernel is unbounded; no small-beta threshold")

    grid = _grid(oracle, domain)
    rho = picard_fixed_point(U, W, beta, grid, oracle.damping, oracle.tol, oracle.max_iter, oracle.method)
    outputs = [_write_csv(out / "fixedpoint.csv", ["x", "rho"], zip(grid.nodes, rho.values))]

    refinement_rows = []
    previous = None
    for nodes in study.refinements:
        fine = _grid(oracle, domain, nodes=nodes)
        solved = picard_fixed_point(U, W, beta, fine, oracle.damping, oracle.tol, oracle.max_iter, oracle.method)
        change = "" if previous is None else float(
            np.max(np.abs(np.interp(fine.nodes, previous.grid.nodes, previous.values) - solved.values))
        )
        refinement_rows.append(
            (nodes, fine.spacing, stationarity_residual(solved, U, W, beta), change)
        )
        previous = solved
    observed_order = None
    if len(refinement_rows) >= 2:
        (_, h0, r0, _), (_, h1, r1, _) = refinement_rows[-2], refinement_rows[-1]
        if r0 > 0 and r1 > 0:
            observed_order = math.log(r0 / r1) / math.log(h0 / h1)
        outputs.append(
            _write_csv(out / "refinement.csv", ["nodes", "spacing", "residual", "change"], refinement_rows)
        )

    jobs = []
    for index, n in enumerate(n_values):
        W_n = _kernel(config.potentials, n, domain.dim)
        system = SpeciesSystem.single(U, W_n, n)
        jobs.append(MarginalJob(ChainJob(system, domain, sampler, index), n, rho, diag.bins, diag.test_function))
    results = run_jobs(run_marginal_job, jobs) if domain.dim == 1 else []
    if results:
        outputs.append(
            _write_csv(
                out / "tv.csv",
                ["N", "tv", "weak_error", "points"],
                ((int(r["label"]), r["tv"], r["weak_error"], r["points"]) for r in results),
            )
        )

    metrics = {
        "beta_threshold": threshold,
        "picard_iterations": rho.iterations,
        "picard_residual": rho.residual,
        "stationarity_residual": stationarity_residual(rho, U, W, beta),
        "free_energy": mean_field_free_energy(rho, U, W, beta),
        "observed_order": observed_order,
        "tv": {str(int(r["label"])): r["tv"] for r in results},
    }
    return RunResult(metrics, outputs, _rate(results) if results else None)


def run_exactness(config: ExperimentConfig, out: Path) -> RunResult:
    """W == 0: sampler marginal against the analytic Normalize(exp(-beta U)) per step size."""
    if config.potentials.kernel != "zero":
        raise ParameterError("exactness runs need kernel = 'zero'")
    domain = _domain(config)
    sampler = config.sampler_config()
    study = config.study
    diag = config.diagnostics_config()
    U = _external(config.potentials)
    beta = sampler.beta

    if config.oracle is None and not domain.bounded:
        half = 8.0 / math.sqrt(beta * max(config.potentials.stiffness, 1e-12))
        grid = Grid.uniform(-half, half, DEFAULT_EXACTNESS_NODES)
    else:
        grid = _grid(config.oracle, domain)
    rho = GridDensity(grid, boltzmann(np.asarray(U.evaluate(grid.points()), dtype=float), beta, grid))

    n = study.n_values[0] if study.n_values else DEFAULT_EXACTNESS_PARTICLES
    system = SpeciesSystem.single(U, zero_kernel(), n)
    taus = study.taus or [sampler.tau]
    jobs = []
    for index, tau in enumerate(taus):
        factor = sampler.tau / tau
        scaled = sampler.model_copy(
            update={
                "tau": tau,
                "burn_in": int(round(sampler.burn_in * factor)),
                "iterations": int(round(sampler.iterations * factor)),
                "thin": max(1, int(round(sampler.thin * factor))),
            }
        )
        jobs.append(MarginalJob(ChainJob(system, domain, scaled, index), tau, rho, diag.bins, diag.test_function))
    results = run_jobs(run_marginal_job, jobs)

    outputs = [
        _write_csv(
            out / "tv.csv",
            ["tau", "tv", "weak_error", "points"],
            ((r["label"], r["tv"], r["weak_error"], r["points"]) for r in results),
        )
    ]
    metrics = {
        "n_particles": n,
        "tv": {repr(r["label"]): r["tv"] for r in results},
        "weak_error": {repr(r["label"]): r["weak_error"] for r in results},
    }
    return RunResult(metrics, outputs, _rate(results))


# ----------------------------------------------------------------------
# Two-layer network
# ----------------------------------------------------------------------


def run_nn(config: ExperimentConfig, out: Path) -> RunResult:
    """Noisy SGD against sampling on the neuron Gibbs measure."""
    nn = config.nn
    data_seed, test_seed, sgd_seed = np.random.SeedSequence(config.seed).generate_state(3)
    train = generate_data(nn.train_size, int(data_seed), nn.noise_std)
    test = generate_data(nn.test_size, int(test_seed), nn.noise_std)

    sgd = train_sgd(train, test, nn, np.random.default_rng(int(sgd_seed)))
    sampler = SamplerConfig(
        beta=nn.beta,
        batch_size=min(nn.batch_size, nn.n_neurons),
        tau=nn.sampler_step_size,
        burn_in=nn.burn_in,
        iterations=nn.iterations,
        movers_per_iteration=min(nn.movers, nn.n_neurons),
        seed=config.seed,
    )
    started = time.perf_counter()
    measure, predictor = train_by_sampling(
        train,
        nn.n_neurons,
        nn.beta,
        nn.lam,
        sampler,
        nn.interaction_scale,
        init_std=nn.init_std,
    )
    sampling_time = time.perf_counter() - started

    losses = [
        ("sgd", "train", sgd.train_loss),
        ("sgd", "test", sgd.test_loss),
        ("sampling", "train", predictor.loss(train)),
        ("sampling", "test", predictor.loss(test)),
    ]
    x = np.linspace(0.0, 1.0, nn.prediction_points)
    grid = x[:, None]
    outputs = [
        _write_csv(out / "losses.csv", ["method", "split", "value"], losses),
        _write_csv(
            out / "predictions.csv",
            ["x", "y_true", "y_sgd", "y_sampled"],
            zip(x, target_function(x), predict(grid, sgd.ensemble), predictor(grid)),
        ),
    ]
    metrics = {f"{method}_{split}_loss": value for method, split, value in losses}
    metrics.update(
        {
            "sgd_final_train_loss": sgd.final_train_loss,
            "sgd_final_test_loss": sgd.final_test_loss,
            "sampled_neurons": measure.size,
            "sampling_seconds": sampling_time,
        }
    )
    return RunResult(metrics, outputs, 1.0)


RUNNERS = {
    "pb1d": run_pb1d,
    "pb3d": run_pb3d,
    "convergence": run_convergence,
    "nn": run_nn,
    "fixedpoint": run_fixedpoint,
    "exactness": run_exactness,
}


# ----------------------------------------------------------------------
# Manifest
# ----------------------------------------------------------------------


def config_document(config: ExperimentConfig) -> dict:
    return config.model_dump(mode="json", exclude_none=True)


def artifact_version(config: ExperimentConfig) -> str:
    canonical = json.dumps(config_document(config), sort_keys=True, separators=(",", ":"))
    digest = hashlib.sha1(canonical.encode("utf-8")).hexdigest()
    return f"rbmc-{__version__}-g{digest[:7]}"


def execute(config: ExperimentConfig, out: Path | None = None) -> dict:
    """Run one experiment and write its manifest.json; returns the manifest."""
    out = Path(out) if out is not None else config.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    started_at = datetime.now(timezone.utc).isoformat()
    started = time.perf_counter()
    logger.info(f"Running {config.kind} experiment into {out}")

    result = RUNNERS[config.kind](config, out)

    manifest = {
        "kind": config.kind,
        "preset": config.preset,
        "seed": config.seed,
        "version": artifact_version(config),
        "config": config_document(config),
        "started_at": started_at,
        "wall_time_seconds": time.perf_counter() - started,
        "acceptance_rate": result.acceptance_rate,
        "metrics": result.metrics,
        "outputs": [*result.outputs, "manifest.json"],
    }
    with (out / "manifest.json").open("w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    logger.info(f"{config.kind} finished in {manifest['wall_time_seconds']:.1f}s")
    return manifest


async def run_recorded(config: ExperimentConfig, out: Path | None = None) -> tuple[int, dict]:
    """execute() off the event loop, bracketed by ledger entries."""
    out = Path(out) if out is not None else config.resolved_output_dir()
    await init_db()
    run_id = await insert_run(config.kind, config.preset, config.seed, str(out))
    loop = asyncio.get_running_loop()
    try:
        manifest = await loop.run_in_executor(None, execute, config, out)
    except Exception as e:
        await finish_run(run_id, error=f"{type(e).__name__}: {e}")
        raise
    await finish_run(run_id, manifest)
    return run_id, manifest
