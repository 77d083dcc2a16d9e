import numpy as np
import pytest

from fkpm.application import particle_engine as engine
from fkpm.application.errors import EpsilonTooLarge, InvalidModel, MissingStates, StationarityViolated
from fkpm.application.fk_core import (
    FeynmanKacModel,
    Kernel,
    exact_flow,
    log_normalizing_constant,
    path_measure_exact,
)
from fkpm.application.model_zoo import build
from fkpm.application.rng import RngStream

from conftest import within_4_sigma


def test_effective_sample_size():
    assert engine.effective_sample_size(np.ones(4)) == pytest.approx(4.0)
    assert engine.effective_sample_size(np.array([1.0, 0.0, 0.0, 0.0])) == pytest.approx(1.0)
    assert engine.effective_sample_size(np.zeros(3)) == 0.0


def test_run_is_deterministic_per_seed(three_state_model):
    a = engine.run(three_state_model, 50, seed=7)
    b = engine.run(three_state_model, 50, seed=7)
    c = engine.run(three_state_model, 50, seed=8)
    np.testing.assert_array_equal(a.population.states, b.population.states)
    assert [r.eta_hat for r in a.records] == [r.eta_hat for r in b.records]
    assert a.population.log_free_energy == b.population.log_free_energy
    assert not np.array_equal(a.population.states, c.population.states)


def test_run_records_every_step(three_state_model):
    result = engine.run(three_state_model, 20, seed=1, functionals=["scaled_index"])
    assert [r.step for r in result.records] == list(range(three_state_model.horizon + 1))
    assert result.records[0].log_z_hat == 0.0
    assert set(result.records[-1].eta_hat) == {"scaled_index"}


def test_run_rejects_unknown_functional(three_state_model):
    with pytest.raises(InvalidModel):
        engine.run(three_state_model, 10, seed=0, functionals=["nope"])


def test_single_particle_runs(two_state_model):
    result = engine.run(two_state_model, 1, seed=3)
    assert result.population.N == 1


def test_epsilon_too_large(two_state_model):
    with pytest.raises(EpsilonTooLarge):
        engine.run(two_state_model, 10, seed=0, epsilon=3.0)


def test_all_dead_poisons_free_energy():
    model = FeynmanKacModel.finite(
        [1.0, 0.0], np.eye(2), [[0.0, 1.0], [1.0, 1.0]], horizon=1, hard=True
    )
    result = engine.run(model, 8, seed=0)
    assert result.population.log_free_energy == -np.inf
    _, gamma = engine.free_energy_estimate(result.population)
    assert gamma(lambda x: np.ones(len(x))) == 0.0


def test_ancestor_probabilities_two_particles():
    # G = (1, 1/2): particle 1 keeps itself w.p. 1/2 + 1/2 * 1/3
    model = FeynmanKacModel.finite([0.5, 0.5], np.eye(2), [1.0, 0.5], horizon=1)
    pop = engine.ParticlePopulation(time=0, states=np.array([0, 1]))
    kept = []
    for seed in range(4000):
        _, ancestors = engine.selection_step(model, pop, RngStream(seed))
        assert ancestors[0] == 0
        kept.append(ancestors[1] == 1)
    kept = np.array(kept, dtype=float)
    assert abs(kept.mean() - 2.0 / 3.0) <= 4.0 * np.sqrt(2.0 / 9.0 / len(kept))


def test_zero_epsilon_always_resamples():
    model = FeynmanKacModel.finite([0.5, 0.5], np.eye(2), [1.0, 1e-9], horizon=1)
    pop = engine.ParticlePopulation(time=0, states=np.array([0, 1, 1, 1]))
    selected, _ = engine.selection_step(model, pop, RngStream(0), epsilon=0.0)
    np.testing.assert_array_equal(selected.states, [0, 0, 0, 0])


def test_genealogy_shapes_and_lines(three_state_model):
    result = engine.run(three_state_model, 12, seed=5, retain_genealogy=True)
    pop = result.population
    n = three_state_model.horizon
    assert len(pop.genealogy.ancestors) == n
    assert len(pop.genealogy.retained_states) == n + 1
    assert len(pop.genealogy.potentials) == n
    lines = engine.ancestral_lines(pop)
    assert lines.support.shape == (12, n + 1)
    np.testing.assert_array_equal(lines.support[:, -1], pop.states)


def test_ancestral_lines_need_genealogy(three_state_model):
    pop = engine.run(three_state_model, 5, seed=0).population
    with pytest.raises(MissingStates):
        engine.ancestral_lines(pop)


def test_free_energy_is_unbiased():
    model = build("hmm4").model
    n = model.horizon
    z_exact = np.exp(log_normalizing_constant(model, n))
    estimates = [np.exp(engine.run(model, 64, seed=s, functionals=[]).population.log_free_energy) for s in range(500)]
    assert within_4_sigma(estimates, z_exact)


def test_marginal_estimate_tracks_exact_flow(three_state_model):
    f = three_state_model.functionals["scaled_index"]
    exact = exact_flow(three_state_model)[-1].integrate(f)
    estimates = [
        engine.run(three_state_model, 200, seed=s, functionals=["scaled_index"]).records[-1].eta_hat["scaled_index"]
        for s in range(200)
    ]
    assert abs(np.mean(estimates) - exact) < 0.02


def test_historical_lift_flow_is_path_measure(two_state_model):
    lift = engine.historical_lift(two_state_model)
    n = two_state_model.horizon
    np.testing.assert_allclose(
        exact_flow(lift, n)[-1].weights, path_measure_exact(two_state_model, n).weights, atol=1e-12
    )
    assert log_normalizing_constant(lift, n) == pytest.approx(log_normalizing_constant(two_state_model, n))
    paths = engine.unravel_paths(np.arange(2 ** (n + 1)), 2, n + 1)
    np.testing.assert_array_equal(paths, path_measure_exact(two_state_model, n).support)


def test_mcmc_mutation_requires_invariance(three_state_model):
    pop = engine.init(three_state_model, 10, seed=0)
    pop, _ = engine.selection_step(three_state_model, pop, RngStream(0))
    uniform_jump = Kernel(matrix=np.full((3, 3), 1.0 / 3.0))
    with pytest.raises(StationarityViolated):
        engine.mcmc_regularized_mutation(three_state_model, pop, uniform_jump, RngStream(0))
    moved = engine.mcmc_regularized_mutation(three_state_model, pop, Kernel.identity(3), RngStream(0))
    plain = engine.mutation_step(three_state_model, pop, RngStream(0))
    np.testing.assert_array_equal(moved.states, plain.states)
    assert moved.time == 1


def test_mcmc_mutation_with_invariant_kernel(three_state_model):
    eta1 = exact_flow(three_state_model, 1)[-1].weights
    K = Kernel(matrix=np.tile(eta1, (3, 1)))
    pop = engine.init(three_state_model, 10, seed=0)
    moved = engine.mcmc_regularized_mutation(three_state_model, pop, K, RngStream(2))
    assert moved.states.shape == (10,)


def test_ancestors_recorded_without_retained_states(two_state_model):
    pop = engine.run(two_state_model, 20, seed=0, retain_genealogy=False).population
    genealogy = pop.genealogy
    assert len(genealogy.ancestors) == two_state_model.horizon
    assert len(genealogy.potentials) == two_state_model.horizon
    assert genealogy.retained_states == ()
    assert all(a.shape == (20,) for a in genealogy.ancestors)


def test_all_dead_generation_keeps_identity_ancestors():
    model = FeynmanKacModel.finite([1.0, 0.0], np.eye(2), [[0.0, 1.0], [1.0, 1.0]], horizon=1, hard=True)
    pop = engine.run(model, 6, seed=0).population
    (ancestors,) = pop.genealogy.ancestors
    np.testing.assert_array_equal(ancestors, np.arange(6))


def test_mutation_pushes_forward_kernel_rows(three_state_model):
    k = 20000
    pop = engine.ParticlePopulation(time=0, states=np.repeat([0, 2], k))
    moved = engine.mutation_step(three_state_model, pop, RngStream(11))
    M = three_state_model.M(1).matrix
    for block, x in enumerate([0, 2]):
        counts = np.bincount(moved.states[block * k:(block + 1) * k], minlength=3) / k
        tolerance = 4.0 * np.sqrt(M[x] * (1.0 - M[x]) / k) + 1e-12
        assert np.all(np.abs(counts - M[x]) <= tolerance)


def test_genealogical_tree_estimates_path_measure(three_state_model):
    # gamma_n^N(F) over ancestral lines is unbiased for Z_n Q_n(F)
    n = three_state_model.horizon

    def F(paths):
        return paths.mean(axis=1) / 2.0

    target = np.exp(log_normalizing_constant(three_state_model, n)) * path_measure_exact(
        three_state_model, n
    ).integrate(F)
    estimates = []
    for seed in range(300):
        pop = engine.run(three_state_model, 50, seed=seed, retain_genealogy=True, functionals=[]).population
        estimates.append(np.exp(pop.log_free_energy) * engine.ancestral_lines(pop).integrate(F))
    assert within_4_sigma(estimates, target)
