import math

import numpy as np
import pytest

from envs import Env, StepCounter, make_task_pair, pendulum_energy, wrap_angle
from errors import ContractViolation, EnvironmentFault


def test_frictionless_pendulum_conserves_energy():
    pair = make_task_pair("pendulum", dt=0.01, horizon=1000, friction=0.0)
    state = np.array([math.pi - 0.5, 0.0])
    start = pendulum_energy(pair.spec, state)
    for _ in range(1000):
        state = pair.dynamics(state, np.zeros(1))
    assert abs(pendulum_energy(pair.spec, state) - start) <= 1e-5 * abs(start)


def test_source_and_target_share_dynamics(pendulum):
    state = np.array([0.3, -1.2])
    action = np.array([0.4])
    source = pendulum.step(state, action, "source")
    target = pendulum.step(state, action, "target")
    np.testing.assert_array_equal(source.next_state, target.next_state)
    assert source.reward != target.reward


def test_step_is_deterministic(point_mass):
    state = np.array([0.1, -0.2, 0.3, 0.0])
    first = point_mass.step(state, np.array([0.5, -0.5]), "source")
    second = point_mass.step(state, np.array([0.5, -0.5]), "source")
    np.testing.assert_array_equal(first.next_state, second.next_state)
    assert first.reward == second.reward


def test_actions_are_clipped(pendulum):
    state = np.array([1.0, 0.5])
    clipped = pendulum.step(state, np.array([7.0]), "source")
    saturated = pendulum.step(state, np.array([1.0]), "source")
    np.testing.assert_array_equal(clipped.next_state, saturated.next_state)
    assert clipped.reward == saturated.reward


def test_done_flag_marks_the_horizon(pendulum):
    state = np.zeros(2)
    assert not pendulum.step(state, np.zeros(1), "source", t=pendulum.spec.horizon - 2).done
    assert pendulum.step(state, np.zeros(1), "source", t=pendulum.spec.horizon - 1).done


def test_non_finite_state_is_an_environment_fault(pendulum):
    with pytest.raises(EnvironmentFault):
        pendulum.step(np.array([np.nan, 0.0]), np.zeros(1), "source")


def test_reset_is_seeded_and_task_specific(pendulum):
    np.testing.assert_array_equal(pendulum.reset("target", 5), pendulum.reset("target", 5))
    source = np.array([pendulum.reset("source", s) for s in range(200)])
    target = np.array([pendulum.reset("target", s) for s in range(200)])
    assert np.ptp(source[:, 0]) <= 0.6
    assert np.ptp(target[:, 0]) > 0.6


def test_rewards_respect_the_reported_bound(point_mass, pendulum):
    rng = np.random.default_rng(0)
    for pair in (pendulum, point_mass):
        for task in ("source", "target"):
            bound = pair.reward_bound(task)
            state = pair.reset(task, 0)
            for _ in range(300):
                result = pair.step(state, rng.uniform(-1.0, 1.0, pair.spec.action_dim), task)
                assert abs(result.reward) <= bound
                state = result.next_state


def test_point_mass_velocity_is_clipped(point_mass):
    state = np.array([0.0, 0.0, 0.0, 0.0])
    for _ in range(200):
        state = point_mass.dynamics(state, np.array([1.0, 1.0]))
    assert np.all(np.abs(state[2:]) <= point_mass.spec.max_speed)
    assert np.all(np.abs(state[:2]) <= point_mass.spec.arena)


def test_pendulum_features_encode_the_angle(pendulum):
    features = pendulum.featurize(np.array([[math.pi / 2, 3.0]]))
    np.testing.assert_allclose(features, [[0.0, 1.0, 3.0]], atol=1e-12)
    assert pendulum.feature_dim == 3


def test_wrap_angle_range():
    wrapped = wrap_angle(np.array([3 * math.pi, -math.pi, 0.5, -7.0]))
    assert np.all(wrapped > -math.pi) and np.all(wrapped <= math.pi + 1e-12)
    np.testing.assert_allclose(wrapped[2:], [0.5, -7.0 + 2 * math.pi])


def test_env_charges_the_shared_counter(pendulum):
    counter = StepCounter()
    env = Env(pendulum, "target", counter)
    env.reset(0)
    for _ in range(7):
        env.step(np.zeros(1))
    Env(pendulum, "source", counter).step(np.zeros(1))
    assert counter.counts == {"source": 1, "target": 7}
    assert counter.total == 8


def test_unknown_names_are_rejected(pendulum):
    with pytest.raises(ContractViolation):
        make_task_pair("cartpole")
    with pytest.raises(ContractViolation):
        pendulum.reset("elsewhere", 0)
