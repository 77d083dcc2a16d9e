import numpy as np
import pytest

from fkpm.application import particle_engine as engine
from fkpm.application.backward_smoother import (
    AdditiveFunctional,
    TrajectoryStore,
    backward_matrix,
    backward_row,
    enumerate_backward_measure,
    marginal_consistency,
    sample_backward_path,
    sample_backward_paths,
    sensitivity_gradient,
    smoothed_additive,
    smoothed_pair_additive,
)
from fkpm.application.errors import (
    EnumerationCap,
    MissingDensity,
    MissingGradient,
    MissingStates,
    ZeroRow,
)
from fkpm.application.fk_core import (
    FeynmanKacModel,
    InitialLaw,
    Kernel,
    Potential,
    SampledSpace,
    log_normalizing_constant,
)
from fkpm.application.rng import RngStream

from conftest import within_4_sigma


def _store(model, N, seed):
    pop = engine.run(model, N, seed, retain_genealogy=True).population
    return TrajectoryStore.from_population(model, pop)


@pytest.fixture
def uniform_two_state():
    return FeynmanKacModel.finite([0.5, 0.5], np.full((2, 2), 0.5), [0.25, 1.0], horizon=1)


def test_backward_row_example(uniform_two_state):
    store = TrajectoryStore(
        model=uniform_two_state,
        states=[np.array([0, 1]), np.array([0, 1])],
        potentials=[np.array([0.25, 1.0])],
    )
    B = backward_matrix(store, 1)
    np.testing.assert_allclose(B, [[0.2, 0.8], [0.2, 0.8]])
    np.testing.assert_allclose(backward_row(store, 1, 0), [0.2, 0.8])


def test_zero_row(uniform_two_state):
    store = TrajectoryStore(
        model=uniform_two_state,
        states=[np.array([0, 1]), np.array([0, 1])],
        potentials=[np.zeros(2)],
    )
    with pytest.raises(ZeroRow):
        backward_matrix(store, 1)


def test_missing_density():
    model = FeynmanKacModel(
        horizon=1,
        spaces=(SampledSpace(), SampledSpace()),
        kernels=(Kernel(sampler=lambda x, gen: x + gen.standard_normal(len(x))),),
        potentials=(Potential.constant(), Potential.constant()),
        eta0=InitialLaw(sampler=lambda n, gen: gen.standard_normal(n)),
    )
    store = TrajectoryStore(model=model, states=[np.zeros(3), np.zeros(3)], potentials=[np.ones(3)])
    with pytest.raises(MissingDensity):
        backward_matrix(store, 1)


def test_store_needs_genealogy(three_state_model):
    pop = engine.run(three_state_model, 4, seed=0).population
    with pytest.raises(MissingStates):
        TrajectoryStore.from_population(three_state_model, pop)


def test_backward_matrices_are_stochastic(three_state_model):
    store = _store(three_state_model, 6, seed=1)
    for p in range(1, store.horizon + 1):
        np.testing.assert_allclose(backward_matrix(store, p).sum(axis=1), 1.0)


def test_smoothed_additive_matches_enumeration(two_state_model):
    store = _store(two_state_model, 3, seed=11)
    f = two_state_model.functionals["scaled_index"]
    n = store.horizon
    assert n == 3
    paths = enumerate_backward_measure(store)
    values = np.mean([f(store.states[p][paths.support[:, p]]) for p in range(n + 1)], axis=0)
    brute = float(paths.weights @ values)
    assert smoothed_additive(store, AdditiveFunctional.stationary(f, n)) == pytest.approx(brute, abs=1e-12)


def test_unnormalized_additive_sums_components(two_state_model):
    store = _store(two_state_model, 4, seed=2)
    f = two_state_model.functionals["scaled_index"]
    n = store.horizon
    normalized = smoothed_additive(store, AdditiveFunctional.stationary(f, n))
    total = smoothed_additive(store, AdditiveFunctional.stationary(f, n, normalized=False))
    assert total == pytest.approx((n + 1) * normalized)


def test_backward_terminal_marginal_is_occupation_measure(three_state_model):
    store = _store(three_state_model, 3, seed=4)
    paths = enumerate_backward_measure(store)
    terminal = np.bincount(paths.support[:, -1], weights=paths.weights, minlength=store.N)
    np.testing.assert_allclose(terminal, np.full(store.N, 1.0 / store.N), atol=1e-12)
    np.testing.assert_array_equal(marginal_consistency(store).support, store.states[-1])
    np.testing.assert_allclose(marginal_consistency(store).weights, terminal, atol=1e-12)


@pytest.mark.parametrize("N", [1, 20])
def test_marginal_consistency_matches_occupation_measure(three_state_model, N):
    store = _store(three_state_model, N, seed=12)
    marginal = marginal_consistency(store)
    occupation = engine.occupation_measure(engine.run(three_state_model, N, 12).population)
    np.testing.assert_array_equal(np.sort(marginal.support), np.sort(occupation.support))
    np.testing.assert_allclose(marginal.weights, occupation.weights, atol=1e-12)


def test_enumeration_cap(three_state_model):
    store = _store(three_state_model, 10, seed=0)
    with pytest.raises(EnumerationCap):
        enumerate_backward_measure(store, cap=1000)


def test_sampled_paths_agree_with_smoothing(three_state_model):
    store = _store(three_state_model, 8, seed=9)
    f = three_state_model.functionals["scaled_index"]
    n = store.horizon
    idx = sample_backward_paths(store, RngStream(123), size=20000)
    assert idx.shape == (20000, n + 1)
    samples = np.mean([f(store.states[p][idx[:, p]]) for p in range(n + 1)], axis=0)
    assert within_4_sigma(samples, smoothed_additive(store, AdditiveFunctional.stationary(f, n)))


def test_single_backward_path(three_state_model):
    store = _store(three_state_model, 5, seed=3)
    path = sample_backward_path(store, RngStream(0))
    assert len(path) == store.horizon + 1


def test_save_and_load(tmp_path, three_state_model):
    store = _store(three_state_model, 6, seed=5)
    store.save(tmp_path / "trajectory.npz")
    loaded = TrajectoryStore.load(tmp_path / "trajectory.npz", three_state_model)
    assert loaded.horizon == store.horizon
    assert loaded.log_free_energy == store.log_free_energy
    for p in range(1, store.horizon + 1):
        np.testing.assert_array_equal(backward_matrix(loaded, p), backward_matrix(store, p))


def test_pair_additive_with_unit_pairs(two_state_model):
    store = _store(two_state_model, 5, seed=6)
    ones = lambda p, a, b: np.ones((a.shape[0], b.shape[1]))
    np.testing.assert_allclose(smoothed_pair_additive(store, ones), [store.horizon])
    gradient = sensitivity_gradient(store, ones)
    np.testing.assert_allclose(gradient, np.exp(store.log_free_energy) * store.horizon)


def test_sensitivity_needs_gradient(two_state_model):
    store = _store(two_state_model, 3, seed=0)
    with pytest.raises(MissingGradient):
        sensitivity_gradient(store, None)


def test_continuous_smoothing_with_density():
    from fkpm.application.model_zoo import build

    model = build("linear_gaussian_1d").model.truncated(4)
    store = _store(model, 30, seed=1)
    f = model.functionals["x0"]
    value = smoothed_additive(store, AdditiveFunctional.stationary(f, 4))
    assert np.isfinite(value)
    for p in range(1, 5):
        np.testing.assert_allclose(backward_matrix(store, p).sum(axis=1), 1.0)


def test_sensitivity_vanishes_without_parameter_dependence(three_state_model):
    store = _store(three_state_model, 10, seed=2)
    zeros = lambda p, a, b: np.zeros((a.shape[0], b.shape[1]))
    np.testing.assert_array_equal(sensitivity_gradient(store, zeros), [0.0])


def _tilted_model(theta):
    # G_theta(x) = exp(-theta x / 2), so d/dtheta log G_theta(x) = -x / 2
    M = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.25, 0.25, 0.5]])
    G = np.exp(-theta * np.arange(3) / 2.0)
    return FeynmanKacModel.finite([0.2, 0.5, 0.3], M, G, horizon=3)


@pytest.mark.slow
def test_sensitivity_matches_finite_difference():
    theta, h = 0.5, 1e-5
    exact = (
        np.exp(log_normalizing_constant(_tilted_model(theta + h), 3))
        - np.exp(log_normalizing_constant(_tilted_model(theta - h), 3))
    ) / (2.0 * h)
    score = lambda p, a, b: np.broadcast_to(-a / 2.0, (a.shape[0], b.shape[1]))
    model = _tilted_model(theta)
    estimates = [sensitivity_gradient(_store(model, 2000, seed), score)[0] for seed in range(20)]
    assert np.mean(estimates) == pytest.approx(exact, rel=0.02)
