import json
import math

import numpy as np
import pytest
from scipy import stats

from fkpm.application import particle_engine as engine
from fkpm.application.errors import InvalidModel, UnsupportedSpace
from fkpm.application.fk_core import exact_flow, load_model, log_normalizing_constant
from fkpm.application.model_zoo import (
    ZOO,
    absorption_doob,
    annealing_schedule_tuner,
    boltzmann,
    build,
    count_self_avoiding_walks,
    doeblin_minorization,
    doob_free_energy,
    emit,
    finite_hmm,
    geometric_clock_discretization,
    kalman_predictor,
    linear_gaussian,
    list_models,
    self_avoiding_walk,
    simulated_annealing,
    subset_restriction,
    yaglom_decay,
)
from fkpm.application.semigroup_analysis import certify_H0

from conftest import within_4_sigma

TWO_WELL = np.array([0.0, 1.0, 2.0, 1.5, 0.3, 1.2])
RING = 0.5 * np.eye(6) + 0.25 * (np.roll(np.eye(6), 1, axis=1) + np.roll(np.eye(6), -1, axis=1))
REFLECTING = np.array(
    [
        [0.75, 0.25, 0.0, 0.0, 0.0],
        [0.25, 0.5, 0.25, 0.0, 0.0],
        [0.0, 0.25, 0.5, 0.25, 0.0],
        [0.0, 0.0, 0.25, 0.5, 0.25],
        [0.0, 0.0, 0.0, 0.25, 0.75],
    ]
)


@pytest.mark.parametrize("n, count", [(0, 1), (1, 4), (2, 12), (3, 36), (4, 100), (5, 284)])
def test_self_avoiding_walk_counts(n, count):
    assert count_self_avoiding_walks(n) == count


def test_saw_probability_reference():
    probs = build("saw_2d").references["saw_probability"].value
    assert probs[0] == 1.0
    assert probs[1] == 1.0
    assert probs[2] == pytest.approx(0.75)


def test_saw_particle_free_energy():
    zoo = self_avoiding_walk(5)
    target = zoo.references["saw_probability"].value[4]
    estimates = [np.exp(engine.run(zoo.model, 2000, seed=s, functionals=[]).population.log_free_energy) for s in range(20)]
    assert within_4_sigma(estimates, target)


def test_soft_saw_has_positive_potentials():
    zoo = self_avoiding_walk(3, repulsion=1.0)
    paths = np.array([[[0, 0], [1, 0], [0, 0]]])
    assert zoo.model.G(2)(paths)[0] == pytest.approx(math.exp(-1.0))
    assert "saw_probability" not in zoo.references


def test_hmm_uninformative_emissions():
    M = np.array([[0.9, 0.1], [0.3, 0.7]])
    zoo = finite_hmm(M, np.full((2, 2), 0.5), [0, 1, 0], eta0=[1.0, 0.0])
    assert zoo.references["log_evidence"].value == pytest.approx(3 * math.log(0.5))
    for n, eta in enumerate(zoo.references["eta"].value):
        np.testing.assert_allclose(eta, np.array([1.0, 0.0]) @ np.linalg.matrix_power(M, n))


def test_hmm_single_state():
    zoo = finite_hmm(np.array([[1.0]]), np.array([[0.3, 0.7]]), [0, 1])
    assert zoo.references["log_evidence"].value == pytest.approx(math.log(0.21))


def test_hmm_matches_forward_algorithm():
    zoo = build("hmm4")
    M = zoo.model.M(1).matrix
    emission = np.array([[0.8, 0.2], [0.6, 0.4], [0.3, 0.7], [0.1, 0.9]])
    observations = [0, 0, 1, 0, 1, 1, 1, 0, 1, 0, 0]
    alpha = np.full(4, 0.25) * emission[:, observations[0]]
    for y in observations[1:]:
        alpha = (alpha @ M) * emission[:, y]
    assert zoo.references["log_evidence"].value == pytest.approx(math.log(alpha.sum()))
    np.testing.assert_allclose(zoo.references["filter"].value, alpha / alpha.sum(), atol=1e-12)


def test_hmm_needs_observations():
    with pytest.raises(InvalidModel):
        finite_hmm(np.eye(2), np.full((2, 2), 0.5), [])


def test_linear_gaussian_rejects_singular_noise():
    with pytest.raises(InvalidModel):
        linear_gaussian(1.0, 1.0, 1.0, 0.0, [0.0, 1.0])


def test_static_conjugate_kalman():
    y = np.array([0.3, -1.2, 2.0, 0.5])
    result = kalman_predictor(
        np.eye(1), np.eye(1), np.zeros((1, 1)), np.eye(1), y.reshape(-1, 1), np.zeros(1), np.eye(1)
    )
    assert result.filtered_means[-1][0] == pytest.approx(y.sum() / (len(y) + 1))
    assert result.filtered_covs[-1][0, 0] == pytest.approx(1.0 / (len(y) + 1))
    marginal = stats.multivariate_normal(np.zeros(len(y)), np.eye(len(y)) + np.ones((len(y), len(y))))
    assert result.log_likelihood == pytest.approx(marginal.logpdf(y))


def test_static_model_has_no_density():
    zoo = linear_gaussian(1.0, 1.0, 0.0, 1.0, [0.1, 0.2])
    assert zoo.model.M(1).density is None


@pytest.mark.slow
def test_particle_predictor_tracks_kalman():
    zoo = build("linear_gaussian_1d")
    n = 4
    model = zoo.model.truncated(n)
    record = engine.run(model, 50_000, seed=3, functionals=["x0", "x0_sq"]).records[-1]
    mean = zoo.references["predicted_means"].value[n][0]
    var = zoo.references["predicted_covs"].value[n][0, 0]
    assert abs(record.eta_hat["x0"] - mean) <= 0.05 * math.sqrt(var)
    assert record.eta_hat["x0_sq"] - record.eta_hat["x0"] ** 2 == pytest.approx(var, rel=0.05)


def test_hard_subset_normalizing_constants():
    zoo = build("subset_hard")
    np.testing.assert_allclose(zoo.references["Z"].value, [1.0, 0.75, 0.5, 0.375])
    for n, z in enumerate(zoo.references["Z"].value):
        assert log_normalizing_constant(zoo.model, n) == pytest.approx(math.log(z))
    for eta, k in zip(zoo.references["eta"].value, (8, 6, 4, 3)):
        np.testing.assert_allclose(eta, np.where(np.arange(8) < k, 1.0 / k, 0.0), atol=1e-12)


def test_subset_halving():
    d = 4
    zoo = subset_restriction(np.full(d, 0.25), np.full((d, d), 0.25), [[True] * 4, [True, True, False, False]])
    assert np.exp(log_normalizing_constant(zoo.model, 1)) == pytest.approx(0.5)


def test_subset_rejects_non_reversible_proposal():
    K = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    with pytest.raises(InvalidModel):
        subset_restriction(np.full(3, 1.0 / 3.0), K, [[True] * 3, [True, True, False]])


def test_subset_rejects_growing_sets():
    with pytest.raises(InvalidModel):
        subset_restriction(np.full(3, 1.0 / 3.0), np.full((3, 3), 1.0 / 3.0), [[True, False, False], [True, True, False]])


def test_soft_subset_has_no_closed_form_z():
    zoo = build("subset_soft")
    assert "Z" not in zoo.references
    assert zoo.model.G(0).values.min() == pytest.approx(0.05)


def test_annealing_constant_temperature():
    zoo = simulated_annealing(TWO_WELL, [1.0, 1.0, 1.0], RING)
    for n in range(3):
        np.testing.assert_array_equal(zoo.model.G(n).values, np.ones(6))
    assert log_normalizing_constant(zoo.model, 2) == pytest.approx(0.0, abs=1e-12)


def test_annealing_flow_is_boltzmann():
    zoo = build("annealing_two_well")
    for eta, mu in zip(zoo.references["eta"].value, zoo.references["boltzmann"].value):
        np.testing.assert_allclose(eta, mu, atol=1e-10)
    exact = zoo.references["log_Z"].recompute()
    for n, value in enumerate(exact):
        assert log_normalizing_constant(zoo.model, n) == pytest.approx(value, abs=1e-10)


def test_large_beta_concentrates_on_minimum():
    mu = boltzmann(TWO_WELL, 50.0, np.full(6, 1.0 / 6.0))
    assert mu[0] > 0.99


def test_annealing_rejects_cooling_backwards():
    with pytest.raises(InvalidModel):
        simulated_annealing(TWO_WELL, [1.0, 0.5], RING)
    with pytest.raises(InvalidModel):
        simulated_annealing(TWO_WELL, [0.0, 0.5, 1.0], RING, iterates=[1])


def test_schedule_tuner_flat_landscape():
    assert annealing_schedule_tuner(0.5, 1, 0.0, 0.2, [0.0, 0.0, 0.0]) == [3, 3]
    assert annealing_schedule_tuner(0.5, 1, 0.0, 1.0 - 1e-9, [0.0, 0.0]) == [1]
    with pytest.raises(InvalidModel):
        annealing_schedule_tuner(0.5, 1, 0.0, 1.0, [0.0, 1.0])


def test_tuned_schedule_satisfies_h0():
    k, rho_prime = 3, 0.5
    betas = np.linspace(0.0, 1.0, 5)
    eps = doeblin_minorization(RING, k)
    assert eps > 0
    v = float(TWO_WELL.max() - TWO_WELL.min())
    counts = annealing_schedule_tuner(eps, k, v, rho_prime, betas)
    assert len(counts) == len(betas) - 1
    zoo = simulated_annealing(TWO_WELL, betas, RING, iterates=[k * l for l in counts])
    assert certify_H0(zoo.model).rho <= rho_prime + 1e-9


def test_doob_constant_potential():
    analysis = absorption_doob(np.full(5, 0.8), REFLECTING, horizon=10)
    assert analysis.lam == pytest.approx(0.8)
    np.testing.assert_allclose(analysis.h, 1.0)


def test_doob_ground_state():
    G = np.array([0.95, 0.9, 0.85, 0.9, 0.6])
    analysis = absorption_doob(G, REFLECTING, horizon=30)
    Q = G[:, None] * REFLECTING
    np.testing.assert_allclose(Q @ analysis.h, analysis.lam * analysis.h, atol=1e-9)
    np.testing.assert_allclose(analysis.doob_kernel.sum(axis=1), 1.0, atol=1e-10)
    for n in (0, 1, 5, 12):
        assert doob_free_energy(analysis, n) == pytest.approx(
            np.exp(log_normalizing_constant(analysis.zoo.model, n)), rel=1e-8
        )
    delta, c3 = yaglom_decay(analysis)
    assert delta > 0
    assert c3 > 0


def test_doob_requires_reversible_kernel():
    M = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    with pytest.raises(InvalidModel):
        absorption_doob([0.9, 0.8, 0.7], M)


def test_geometric_clock_certificate_dominates():
    V = [0.0, 0.5, 1.0, 0.2]
    K = np.full((4, 4), 0.25)
    zoo, cert = geometric_clock_discretization(V, K, 1.0, 0.5)
    exact = certify_H0(zoo.model)
    assert cert.rho >= exact.rho - 1e-12
    assert cert.g == pytest.approx(exact.g)


def test_geometric_clock_without_potential():
    K = np.full((3, 3), 1.0 / 3.0)
    _, cert = geometric_clock_discretization([0.0, 0.0, 0.0], K, 2.0, 0.25, horizon=4)
    assert cert.g == 1.0
    assert cert.valid


def test_geometric_clock_rejects_bad_parameters():
    K = np.full((2, 2), 0.5)
    with pytest.raises(InvalidModel):
        geometric_clock_discretization([-1.0, 0.0], K, 1.0, 0.5)
    with pytest.raises(InvalidModel):
        geometric_clock_discretization([0.0, 1.0], K, 3.0, 0.5)


def test_registry_listing():
    entries = list_models()
    assert [e.name for e in entries] == list(ZOO)
    assert {e.name for e in entries if not e.finite} == {"linear_gaussian_1d", "saw_2d"}


def test_build_unknown_model():
    with pytest.raises(InvalidModel):
        build("nope")


def test_emit_round_trip(tmp_path):
    out, sidecar = emit("hmm4", tmp_path / "hmm4.json")
    assert sidecar.name == "hmm4.oracle.json"
    payload = json.loads(sidecar.read_text())
    assert payload["oracle"] == "exact-flow"
    model = load_model(out)
    log_z = payload["references"]["log_Z"]["value"]
    for n in range(model.horizon + 1):
        assert log_normalizing_constant(model, n) == pytest.approx(log_z[n])
    np.testing.assert_allclose(exact_flow(model)[-1].weights, payload["references"]["eta"]["value"][-1])


def test_emit_refuses_sampled_models(tmp_path):
    with pytest.raises(UnsupportedSpace):
        emit("saw_2d", tmp_path / "saw.json")
