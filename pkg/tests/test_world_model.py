import numpy as np
import pytest

from conftest import numeric_gradient, relative_error
from errors import ContractViolation, PreconditionError
from nn_core import init_mlp
from world_model import (
    EnsembleDynamicsModel,
    ModelConfig,
    Normalizer,
    ensemble_uncertainty,
    gaussian_nll,
    pairwise_disagreement,
    soft_clamp,
)

SMALL = ModelConfig(ensemble_size=3, hidden=(32,), batch_size=32, epochs=30)


def _linear_data(count: int = 640, seed: int = 0):
    rng = np.random.default_rng(seed)
    states = rng.uniform(-1.0, 1.0, size=(count, 2))
    actions = rng.uniform(-1.0, 1.0, size=(count, 1))
    next_states = states + 0.1 * np.concatenate([actions, states[:, :1]], axis=1)
    return states, actions, next_states


def test_gaussian_nll_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    member = init_mlp([3, 6, 4], rng, hidden_activation="tanh")
    inputs = rng.normal(size=(8, 3))
    targets = rng.normal(size=(8, 2))

    def loss() -> float:
        return gaussian_nll(member, inputs, targets, -10.0, 1.0)[0]

    _, grads = gaussian_nll(member, inputs, targets, -10.0, 1.0)
    for param, analytic in zip(member.parameters(), grads.arrays()):
        assert relative_error(analytic, numeric_gradient(loss, param)) <= 1e-4


def test_soft_clamp_stays_inside_bounds_with_exact_derivative():
    raw = np.linspace(-40.0, 40.0, 81)
    clamped, derivative = soft_clamp(raw, -10.0, 1.0)
    assert np.all(clamped > -10.0) and np.all(clamped < 1.0 + 1e-4)
    numeric = numeric_gradient(lambda: float(np.sum(soft_clamp(raw, -10.0, 1.0)[0])), raw)
    np.testing.assert_allclose(derivative, numeric, atol=1e-6)


def test_fit_learns_linear_dynamics():
    states, actions, next_states = _linear_data()
    model = EnsembleDynamicsModel(2, 1, SMALL, seed=0)
    baseline = float(np.mean((next_states - states) ** 2))
    report = model.fit(states, actions, next_states, epochs=80, seed=1)
    assert model.fitted
    assert report.holdout_nll.shape == (3,)
    assert report.mean_mse < 0.5 * baseline


def test_fit_needs_two_batches_of_data():
    states, actions, next_states = _linear_data(count=40)
    with pytest.raises(PreconditionError):
        EnsembleDynamicsModel(2, 1, SMALL).fit(states, actions, next_states)


def test_fit_is_deterministic_in_seed():
    states, actions, next_states = _linear_data()
    first = EnsembleDynamicsModel(2, 1, SMALL, seed=3)
    second = EnsembleDynamicsModel(2, 1, SMALL, seed=3)
    first.fit(states, actions, next_states, epochs=2, seed=4)
    second.fit(states, actions, next_states, epochs=2, seed=4)
    np.testing.assert_array_equal(first.predict(states[:5], actions[:5])[0], second.predict(states[:5], actions[:5])[0])


def test_predict_shapes_and_finiteness_check():
    model = EnsembleDynamicsModel(2, 1, SMALL)
    means, variances = model.predict(np.zeros(2), np.zeros(1))
    assert means.shape == variances.shape == (3, 2)
    means, variances = model.predict(np.zeros((4, 2)), np.zeros((4, 1)))
    assert means.shape == variances.shape == (3, 4, 2)
    assert np.all(variances > 0.0)
    with pytest.raises(ContractViolation):
        model.predict(np.array([np.nan, 0.0]), np.zeros(1))


def test_agreeing_members_have_zero_uncertainty():
    model = EnsembleDynamicsModel(2, 1, SMALL, seed=0)
    states = np.random.default_rng(0).normal(size=(10, 2))
    actions = np.zeros((10, 1))
    assert np.all(model.uncertainty(states, actions) > 0.0)
    for member in model.members[1:]:
        member.set_parameters(model.members[0].parameters())
    np.testing.assert_array_equal(model.uncertainty(states, actions), np.zeros(10))
    assert model.uncertainty(states[0], actions[0]) == 0.0


def test_pairwise_disagreement_is_the_largest_member_gap():
    means = np.array([[[0.0, 0.0]], [[3.0, 4.0]], [[1.0, 0.0]]])
    np.testing.assert_allclose(pairwise_disagreement(means), [5.0])
    variances = np.array([[[1.0, 0.0]], [[4.0, 5.0]], [[0.0, 0.0]]])
    np.testing.assert_allclose(ensemble_uncertainty(means, variances, "std"), [3.0])


def test_synthetic_step_is_seeded():
    model = EnsembleDynamicsModel(2, 1, SMALL)
    first = model.synthetic_step(np.ones(2), np.zeros(1), 7)
    second = model.synthetic_step(np.ones(2), np.zeros(1), 7)
    assert first.shape == (2,)
    np.testing.assert_array_equal(first, second)


def test_checkpoint_round_trip_preserves_predictions(tmp_path):
    states, actions, next_states = _linear_data()
    model = EnsembleDynamicsModel(2, 1, SMALL, seed=0)
    model.fit(states, actions, next_states, epochs=2)
    path = str(tmp_path / "model.bin")
    model.save(path)
    restored = EnsembleDynamicsModel(2, 1, SMALL, seed=99)
    restored.load(path)
    assert restored.fitted
    np.testing.assert_allclose(
        restored.predict(states[:20], actions[:20])[0], model.predict(states[:20], actions[:20])[0], rtol=1e-4, atol=1e-5
    )


def test_featurized_inputs_change_the_network_width(pendulum):
    model = EnsembleDynamicsModel(2, 1, SMALL, featurize=pendulum.featurize, feature_dim=pendulum.feature_dim)
    assert model.members[0].in_dim == 4
    assert model.predict(np.zeros((2, 2)), np.zeros((2, 1)))[0].shape == (3, 2, 2)


def test_invalid_config_is_rejected():
    with pytest.raises(ContractViolation):
        ModelConfig(ensemble_size=1)
    with pytest.raises(ContractViolation):
        ModelConfig(uncertainty="entropy")


def test_normalizer_round_trip():
    rng = np.random.default_rng(3)
    data = np.column_stack([rng.normal(50.0, 20.0, 200), rng.normal(0.0, 1e-3, 200), np.full(200, 7.0)])
    normalizer = Normalizer.fit(data)
    assert normalizer.std[2] == 1.0
    np.testing.assert_allclose(normalizer.denormalize(normalizer.normalize(data)), data, rtol=0, atol=1e-6)
    fresh = rng.normal(size=(10, 3))
    np.testing.assert_allclose(normalizer.denormalize(normalizer.normalize(fresh)), fresh, rtol=0, atol=1e-6)


def test_more_on_distribution_data_does_not_hurt_held_out_error():
    held_states, held_actions, held_next = _linear_data(count=400, seed=100)
    small, large = [], []
    for seed in range(5):
        states, actions, next_states = _linear_data(count=1280, seed=seed)
        for count, scores in ((320, small), (1280, large)):
            model = EnsembleDynamicsModel(2, 1, SMALL, seed=seed)
            model.fit(states[:count], actions[:count], next_states[:count], epochs=20, seed=seed)
            scores.append(model.evaluate(held_states, held_actions, held_next).mean_mse)
    assert np.median(large) <= 1.05 * np.median(small)


def test_checkpoint_with_other_dimensions_is_rejected(tmp_path):
    path = str(tmp_path / "model.bin")
    EnsembleDynamicsModel(2, 1, SMALL, seed=0).save(path)
    with pytest.raises(ContractViolation):
        EnsembleDynamicsModel(3, 1, SMALL).load(path)
    with pytest.raises(ContractViolation):
        EnsembleDynamicsModel(2, 2, SMALL).load(path)
