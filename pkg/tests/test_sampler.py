import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.diagnostics import tv_histogram
from app.errors import EmptyMeasureError, NumericError, ParameterError
from app.gibbs import ParticleConfiguration, SpeciesSystem, pb_system
from app.oracle import Grid, GridDensity, boltzmann
from app.potentials import (
    DomainSpec,
    coulomb_3d_split,
    gaussian_kernel,
    quadratic_confinement,
    zero_kernel,
    zero_potential,
)
from app.sampler import (
    CellList,
    ChainJob,
    ChainState,
    SamplerConfig,
    acceptance_probability,
    cyclic_partners,
    draw_partners,
    empirical_from_samples,
    langevin_batch_proposal,
    metropolis_ratio,
    rbmc_run,
    reflect,
    run_chain_job,
    write_samples_csv,
)

LINE = DomainSpec("all_space", 1, boundary="none")


def gaussian_reference(low=-6.0, high=6.0, nodes=2001):
    grid = Grid.uniform(low, high, nodes)
    return GridDensity(grid, boltzmann(0.5 * grid.nodes**2, 1.0, grid))


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------


class TestSamplerConfig:
    def test_time_based_run_lengths(self):
        cfg = SamplerConfig(beta=1.0, tau=0.005, burn_in_time=500, end_time=2000)
        assert cfg.burn_in == 100_000
        assert cfg.iterations == 300_000

    def test_time_counts_inner_steps(self):
        cfg = SamplerConfig(beta=1.0, tau=0.01, inner_steps=9, end_time=9.0)
        assert cfg.burn_in == 0
        assert cfg.iterations == 100

    def test_end_before_burn_in_rejected(self):
        with pytest.raises(ValueError):
            SamplerConfig(beta=1.0, tau=0.01, burn_in_time=5.0, end_time=1.0)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            SamplerConfig(beta=1.0, tau=0.01, temperature=2.0)

    def test_polynomial_schedule(self):
        cfg = SamplerConfig(
            beta=1.0, tau=0.1, tau_schedule="polynomial", tau_decay_scale=10.0, tau_decay_rate=1.0
        )
        assert cfg.tau_at(0) == pytest.approx(0.1)
        assert cfg.tau_at(10) == pytest.approx(0.05)

    def test_movers(self):
        assert SamplerConfig(beta=1.0, tau=0.1, movers_per_iteration="all").movers_for(7) == 7
        assert SamplerConfig(beta=1.0, tau=0.1).movers_for(7) == 1


# ----------------------------------------------------------------------
# Elementary moves
# ----------------------------------------------------------------------


class TestReflect:
    @pytest.mark.parametrize("x, expected", [(-0.1, 0.1), (7.0, 7.0), (15.2, 14.8)])
    def test_box_0_15(self, x, expected):
        box = DomainSpec("box", 1, 0.0, 15.0)
        assert reflect(np.array([x]), box)[0] == pytest.approx(expected)

    def test_iterated_mirror(self):
        box = DomainSpec("box", 1, 0.0, 1.0)
        assert reflect(np.array([2.3]), box)[0] == pytest.approx(0.3)

    def test_far_excursions_fold(self):
        box = DomainSpec("box", 1, 0.0, 1.0)
        assert reflect(np.array([57.3]), box)[0] == pytest.approx(0.7)
        assert reflect(np.array([-40.25]), box)[0] == pytest.approx(0.25)

    def test_annulus_mirrors_the_radius(self):
        shell = DomainSpec("annulus", 3, 1.0, 10.0)
        x = np.array([[0.0, 0.9, 0.0], [0.0, 0.0, 10.5], [3.0, 4.0, 0.0]])
        assert_allclose(reflect(x, shell), [[0.0, 1.1, 0.0], [0.0, 0.0, 9.5], [3.0, 4.0, 0.0]])

    def test_unbounded_domain_passes_through(self):
        assert reflect(np.array([123.0]), LINE)[0] == 123.0

    def test_non_finite(self):
        with pytest.raises(NumericError):
            reflect(np.array([math.inf]), DomainSpec("box", 1, 0.0, 1.0))


class TestPartners:
    def test_draw_excludes_self(self, rng):
        for _ in range(200):
            picks = draw_partners(rng, 3, 10, 5)
            assert 3 not in picks
            assert len(set(picks.tolist())) == 4

    def test_draw_is_uniform(self, rng):
        counts = np.zeros(5)
        for _ in range(40_000):
            counts[draw_partners(rng, 2, 5, 2)] += 1
        assert counts[2] == 0
        assert_allclose(counts[[0, 1, 3, 4]] / 40_000, 0.25, atol=0.015)

    def test_batch_larger_than_system(self, rng):
        with pytest.raises(ParameterError):
            draw_partners(rng, 0, 3, 5)

    def test_cyclic_table(self, rng):
        table = cyclic_partners(rng, 9, 3)
        assert table.shape == (9, 2)
        assert not np.any(table == np.arange(9)[:, None])
        # every particle is somebody's first successor exactly once
        assert sorted(table[:, 0].tolist()) == list(range(9))


class TestMetropolis:
    def test_no_singular_part_always_accepts(self):
        assert metropolis_ratio([0.0], [1.0], [[0.5]], gaussian_kernel(), 1.0) == 1.0

    def test_acceptance_half(self):
        kernel = coulomb_3d_split(1.0, 0.5)
        other = np.array([[0.0, 0.0, 0.0]])
        current, proposal = np.array([0.4, 0.0, 0.0]), np.array([0.2, 0.0, 0.0])
        delta = float(kernel.singular_part(proposal - other[0]) - kernel.singular_part(current - other[0]))
        beta = math.log(2.0) / delta
        assert metropolis_ratio(proposal, current, other, kernel, beta) == pytest.approx(0.5)

    def test_landing_on_a_particle_is_rejected(self):
        kernel = coulomb_3d_split(1.0, 0.5)
        other = np.array([[0.1, 0.1, 0.1]])
        assert metropolis_ratio(other[0], [0.4, 0.1, 0.1], other, kernel, 1.0) == 0.0

    def test_probability_edge_cases(self):
        assert acceptance_probability(-3.0, 1.0) == 1.0
        assert acceptance_probability(math.inf, 1.0) == 0.0
        assert acceptance_probability(1.0, 2.0) == pytest.approx(math.exp(-2.0))
        with pytest.raises(NumericError):
            acceptance_probability(math.nan, 1.0)

    def test_cell_list_matches_all_pairs(self):
        kernel = coulomb_3d_split(1.0, 0.5)
        system = SpeciesSystem.single(zero_potential(), kernel, 3)
        positions = np.array([[0.5, 0.5, 0.5], [0.8, 0.6, 0.5], [1.7, 1.7, 1.7]])
        proposal = np.array([0.55, 0.75, 0.45])
        cells = CellList(positions, 0.5, np.zeros(3), np.full(3, 2.0))
        neighbors = cells.neighbors(proposal) | cells.neighbors(positions[0])
        fast = system.short_range_delta(0, proposal, positions, neighbors)
        brute = sum(
            0.5 * (kernel.singular_part(proposal - positions[j]) - kernel.singular_part(positions[0] - positions[j]))
            for j in (1, 2)
        )
        assert fast == pytest.approx(float(brute), abs=1e-12)

    def test_cell_list_tracks_moves(self):
        positions = np.array([[0.1, 0.1], [1.9, 1.9]])
        cells = CellList(positions, 0.5, np.zeros(2), np.full(2, 2.0))
        assert 1 not in cells.neighbors(positions[0])
        cells.move(1, np.array([0.3, 0.3]))
        assert cells.neighbors(positions[0]) == {0, 1}


class TestLangevinProposal:
    def test_pure_diffusion(self):
        system = SpeciesSystem.single(zero_potential(), zero_kernel(), 2)
        cfg = SamplerConfig(beta=2.0, tau=0.01)
        state = ChainState(np.array([[0.3], [1.0]]), np.random.default_rng(5))
        proposal = langevin_batch_proposal(state, 0, cfg, system)

        replay = np.random.default_rng(5)
        replay.choice(1, size=1, replace=False)
        z = replay.standard_normal(1)
        assert_allclose(proposal, 0.3 + math.sqrt(2 * 0.01 / 2.0) * z, rtol=1e-14)

    def test_gradient_flow_without_noise(self, rng):
        system = SpeciesSystem.single(quadratic_confinement(1.0), zero_kernel(), 2)
        cfg = SamplerConfig(beta=1e12, tau=1e-3)
        state = ChainState(np.array([[2.0], [-1.0]]), rng)
        proposal = langevin_batch_proposal(state, 0, cfg, system)
        assert proposal[0] == pytest.approx(2.0 * (1 - 1e-3), rel=1e-6)

    def test_batch_drift_by_hand(self):
        W = gaussian_kernel(1.0, 1.0)
        system = SpeciesSystem.single(quadratic_confinement(1.0), W, 3)
        positions = np.array([[0.0], [0.5], [-0.7]])
        drift = system.drift(positions[[0]], np.array([0]), positions, np.array([[2]]))
        # (N-1)/(p-1) = 2 cancels the 1/(N-1) pair weight
        expected = positions[0] + W.gradient_smooth(positions[0] - positions[2])
        assert_allclose(drift[0], expected, rtol=1e-12)


# ----------------------------------------------------------------------
# Chains
# ----------------------------------------------------------------------


def ou_job(seed=3, chain=0, **overrides):
    system = SpeciesSystem.single(quadratic_confinement(1.0), zero_kernel(), 16)
    settings = dict(
        beta=1.0,
        tau=0.05,
        burn_in=200,
        iterations=2000,
        thin=5,
        seed=seed,
        movers_per_iteration="all",
        sweep="simultaneous",
        init_box=(-1.0, 1.0),
    )
    settings.update(overrides)
    return ChainJob(system, LINE, SamplerConfig(**settings), chain)


class TestRBMCRun:
    def test_record_count_and_acceptance(self):
        stream = run_chain_job(ou_job())
        assert stream.n_recorded == 400
        assert stream.configurations.shape == (400, 16, 1)
        assert stream.iterations[0] == 205
        assert stream.acceptance_rate == 1.0

    def test_seed_determinism(self):
        first = run_chain_job(ou_job(seed=11))
        second = run_chain_job(ou_job(seed=11))
        assert_array_equal(first.configurations, second.configurations)
        other = run_chain_job(ou_job(seed=11, chain=1))
        assert not np.array_equal(first.configurations, other.configurations)

    def test_gaussian_moments(self):
        stream = run_chain_job(ou_job(iterations=20_000, thin=10))
        mu = empirical_from_samples(stream)
        assert mu.expectation(lambda x: x) == pytest.approx(0.0, abs=0.05)
        assert mu.expectation(lambda x: x * x) == pytest.approx(1.0, abs=0.08)

    def test_sequential_sweep_matches_moments(self):
        stream = run_chain_job(
            ou_job(iterations=4000, thin=4, sweep="sequential", movers_per_iteration=4)
        )
        mu = empirical_from_samples(stream)
        assert mu.expectation(lambda x: x * x) == pytest.approx(1.0, abs=0.15)

    def test_rejects_inconsistent_inputs(self, rng):
        system = SpeciesSystem.single(zero_potential(), zero_kernel(), 4)
        initial = ParticleConfiguration(rng.normal(size=(3, 1)), LINE)
        with pytest.raises(ParameterError):
            rbmc_run(initial, system, SamplerConfig(beta=1.0, tau=0.1))
        initial = ParticleConfiguration(rng.normal(size=(4, 1)), LINE)
        with pytest.raises(ParameterError):
            rbmc_run(initial, system, SamplerConfig(beta=1.0, tau=0.1, batch_size=5))

    def test_simultaneous_sweep_needs_smooth_system(self):
        system = pb_system(3, 0.01, 0.1, 10.0, 100, r_c=0.1)
        shell = DomainSpec("annulus", 3, 1.0, 10.0)
        cfg = SamplerConfig(beta=1.0, tau=0.01, iterations=1, sweep="simultaneous")
        with pytest.raises(ParameterError):
            run_chain_job(ChainJob(system, shell, cfg, 0))

    def test_annulus_containment_with_metropolis(self):
        system = pb_system(3, 0.01, 0.1, 10.0, 100, r_c=0.1, lj_epsilon=0.01, lj_sigma=0.1)
        shell = DomainSpec("annulus", 3, 1.0, 10.0)
        cfg = SamplerConfig(beta=1.0, tau=0.01, batch_size=2, inner_steps=3, burn_in=100, iterations=400, thin=20)
        stream = run_chain_job(ChainJob(system, shell, cfg, 0))
        r = np.linalg.norm(stream.configurations, axis=-1)
        assert r.min() >= 1.0 and r.max() <= 10.0
        assert stream.proposed == 500
        assert 0.0 < stream.acceptance_rate <= 1.0


@pytest.mark.slow
def test_long_run_matches_exact_gaussian():
    stream = run_chain_job(ou_job(tau=0.01, burn_in=2000, iterations=400_000, thin=20))
    mu = empirical_from_samples(stream)
    assert tv_histogram(mu, gaussian_reference(), bins=50) <= 0.02


# ----------------------------------------------------------------------
# Empirical measures
# ----------------------------------------------------------------------


class TestEmpiricalFromSamples:
    def test_single_configuration(self):
        mu = empirical_from_samples(np.array([[[0.0], [1.0], [2.0], [3.0]]]))
        assert_allclose(mu.weights, 0.25)

    def test_weights_over_records(self):
        configs = np.zeros((5, 4, 1))
        mu = empirical_from_samples(configs)
        assert mu.size == 20
        assert_allclose(mu.weights, 1 / 20)

    def test_mean_of_two_records(self):
        mu = empirical_from_samples(np.array([[[0.0]], [[2.0]]]))
        assert mu.expectation(lambda x: x) == pytest.approx(1.0)

    def test_species_filter(self):
        stream = run_chain_job(
            ChainJob(
                pb_system(1, 1.0, 0.5, 2.0, 4),
                DomainSpec("box", 1, 1.0, 15.0),
                SamplerConfig(beta=1.0, tau=0.01, iterations=10, movers_per_iteration="all"),
                0,
            )
        )
        assert empirical_from_samples(stream, species=0).size == 10 * 4
        assert empirical_from_samples(stream, species=1).size == 10 * 5

    def test_empty(self):
        with pytest.raises(EmptyMeasureError):
            empirical_from_samples([])


def test_write_samples_csv(tmp_path):
    stream = run_chain_job(ou_job(iterations=10, thin=5))
    path = tmp_path / "samples.csv"
    write_samples_csv(path, [stream])
    lines = path.read_text().splitlines()
    assert lines[0] == "chain,iteration,particle,species,x0"
    assert len(lines) == 1 + 2 * 16
