import dataclasses

import numpy as np
import pytest

from envs import StepCounter, make_task_pair
from errors import ContractViolation, PlannerFailure
from planner import (
    PlannerConfig,
    Trajectory,
    discounted_return,
    evaluate_sequence,
    evaluate_sequences,
    mpc_rollout,
    plan,
    shift_plan,
)
from utils import as_generator
from world_model import ensemble_uncertainty


class LinearEnsemble:
    """Members agree on s + 0.1 a up to a per-member offset proportional to the action."""

    uncertainty_mode = "pairwise"

    def __init__(self, state_dim: int = 1, offsets=(-0.5, 0.5), action_dim=None) -> None:
        self.state_dim = state_dim
        self.action_dim = state_dim if action_dim is None else action_dim
        self.offsets = np.asarray(offsets, dtype=np.float64)

    def predict(self, states, actions):
        states, actions = np.atleast_2d(states), np.atleast_2d(actions)
        base = states + 0.1 * actions
        means = base[None] + self.offsets[:, None, None] * actions[None]
        return means, np.full_like(means, 1e-4)

    def synthetic_step(self, states, actions, seed):
        return states + 0.1 * actions


class TrueModel:
    """Two identical members wrapping the real dynamics of a task pair."""

    uncertainty_mode = "pairwise"

    def __init__(self, pair) -> None:
        self.pair = pair
        self.state_dim = pair.spec.state_dim
        self.action_dim = pair.spec.action_dim

    def predict(self, states, actions):
        nxt = self.pair.dynamics(np.atleast_2d(states), np.atleast_2d(actions))
        means = np.stack([nxt, nxt])
        return means, np.full_like(means, 1e-6)


class CliffEnsemble:
    """Two members on s + 0.5 a that disagree only once the predicted state passes 1."""

    uncertainty_mode = "pairwise"
    state_dim = 1
    action_dim = 1

    def predict(self, states, actions):
        base = np.atleast_2d(states) + 0.5 * np.atleast_2d(actions)
        means = np.stack([base, base + 5.0 * np.maximum(base - 1.0, 0.0)])
        return means, np.full_like(means, 1e-6)


class BrokenModel(LinearEnsemble):
    def predict(self, states, actions):
        means, variances = super().predict(states, actions)
        return means * np.nan, variances


def _distance_reward(states, actions):
    return -np.sum((states - 1.0) ** 2, axis=-1)


def test_evaluate_sequence_matches_hand_rollout():
    model = LinearEnsemble()
    actions = np.array([[0.5], [-0.2], [1.0]])
    state, expected = 0.3, 0.0
    for k, (a,) in enumerate(actions):
        expected += 0.9**k * (-((state - 1.0) ** 2) - 2.0 * abs(a))
        state = state + 0.1 * a
    assert evaluate_sequence(model, _distance_reward, np.array([0.3]), actions, 2.0, 0.9) == pytest.approx(
        expected, abs=1e-12
    )


def test_evaluate_sequence_rejects_out_of_range_actions():
    with pytest.raises(ContractViolation):
        evaluate_sequence(LinearEnsemble(), _distance_reward, np.zeros(1), np.array([[1.5]]), 0.0, 1.0)


def test_penalty_makes_plans_more_cautious():
    config = PlannerConfig(horizon=5, population=64, iterations=4, gamma=1.0, penalty=0.0)
    bold = plan(LinearEnsemble(), _distance_reward, np.zeros(1), config, 0)
    cautious = plan(LinearEnsemble(), _distance_reward, np.zeros(1), dataclasses.replace(config, penalty=100.0), 0)
    assert np.mean(np.abs(cautious.actions)) < np.mean(np.abs(bold.actions))
    assert cautious.uncertainties.shape == (5,)
    assert cautious.states.shape == (6, 1)


def test_plan_is_deterministic_in_seed():
    config = PlannerConfig(horizon=4, population=32, iterations=3)
    first = plan(LinearEnsemble(), _distance_reward, np.zeros(1), config, 11)
    second = plan(LinearEnsemble(), _distance_reward, np.zeros(1), config, 11)
    np.testing.assert_array_equal(first.actions, second.actions)
    assert first.value == second.value


def test_ties_resolve_to_the_first_candidate():
    config = PlannerConfig(horizon=3, population=20, iterations=3, penalty=0.0)
    flat = lambda s, a: np.zeros(len(s))  # noqa: E731
    result = plan(LinearEnsemble(), flat, np.zeros(1), config, 5)
    noise = as_generator(5).standard_normal((20, 3, 1))
    np.testing.assert_array_equal(result.actions, np.clip(config.init_std * noise[0], -1.0, 1.0))
    assert result.value == 0.0


def test_planner_fails_when_every_rollout_diverges():
    with pytest.raises(PlannerFailure):
        plan(BrokenModel(), _distance_reward, np.zeros(1), PlannerConfig(horizon=2, population=20, iterations=2), 0)


def test_shift_plan_pads_with_zeros():
    shifted = shift_plan(np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_array_equal(shifted, [[2.0], [3.0], [0.0]])


def test_real_mpc_rollout_charges_every_step(pendulum):
    counter = StepCounter()
    trajectory = mpc_rollout(
        pendulum, TrueModel(pendulum), PlannerConfig(horizon=3, population=16, iterations=2), 6, 0, counter=counter
    )
    assert len(trajectory) == 6
    assert counter.counts["source"] == 6
    assert not trajectory.dones.any()
    np.testing.assert_array_equal(trajectory.uncertainties, np.zeros(6))
    for t in range(6):
        np.testing.assert_array_equal(
            pendulum.dynamics(trajectory.states[t], trajectory.actions[t]), trajectory.next_states[t]
        )


def test_synthetic_rollout_never_touches_the_environment(pendulum):
    counter = StepCounter()
    trajectory = mpc_rollout(
        pendulum,
        LinearEnsemble(state_dim=2, offsets=(0.0, 0.1), action_dim=1),
        PlannerConfig(horizon=2, population=20, iterations=1),
        4,
        1,
        mode="synthetic",
        counter=counter,
    )
    assert len(trajectory) == 4
    assert counter.total == 0


def test_planner_failure_falls_back_to_zero_actions(pendulum):
    model = BrokenModel(state_dim=2, offsets=(0.0, 0.0), action_dim=1)
    trajectory = mpc_rollout(pendulum, model, PlannerConfig(horizon=2, population=20, iterations=1), 3, 0)
    np.testing.assert_array_equal(trajectory.actions, np.zeros((3, 1)))


def test_mpc_with_true_dynamics_beats_random_actions(point_mass):
    config = PlannerConfig(horizon=8, population=64, iterations=3, gamma=1.0)
    planned = mpc_rollout(point_mass, TrueModel(point_mass), config, point_mass.spec.horizon, 0)
    rng = np.random.default_rng(0)
    state, random_total = point_mass.reset("source", 0), 0.0
    for t in range(point_mass.spec.horizon):
        result = point_mass.step(state, rng.uniform(-1.0, 1.0, 2), "source", t)
        random_total += result.reward
        state = result.next_state
    assert float(np.sum(planned.source_rewards)) > random_total


def test_zero_length_episode_is_empty(pendulum):
    trajectory = mpc_rollout(pendulum, TrueModel(pendulum), PlannerConfig(horizon=2, population=20), 0, 0)
    assert len(trajectory) == 0
    assert trajectory.source_return == 0.0


def test_trajectory_caches_discounted_source_return():
    rewards = np.array([1.0, 2.0, 3.0])
    trajectory = Trajectory(
        states=np.zeros((3, 1)),
        actions=np.zeros((3, 1)),
        rewards=rewards,
        source_rewards=rewards,
        next_states=np.zeros((3, 1)),
        dones=np.array([False, False, True]),
        uncertainties=np.array([0.1, 0.2, 0.6]),
        gamma=0.5,
    )
    assert trajectory.source_return == pytest.approx(1.0 + 1.0 + 0.75)
    assert trajectory.mean_uncertainty == pytest.approx(0.3)
    assert discounted_return(rewards, 1.0) == 6.0


def test_penalized_return_never_increases_with_the_penalty():
    sequences = np.random.default_rng(2).uniform(-1.0, 1.0, size=(64, 5, 1))
    previous = None
    for penalty in (0.0, 0.1, 1.0, 10.0, 1e3):
        totals, _, _ = evaluate_sequences(LinearEnsemble(), _distance_reward, np.array([0.2]), sequences, penalty, 0.95)
        if previous is not None:
            assert np.all(totals <= previous)
        previous = totals


def test_one_step_plan_finds_the_analytic_optimum():
    exact = LinearEnsemble(offsets=(0.0, 0.0))
    reward = lambda s, a: -np.sum((s + a) ** 2, axis=-1)  # noqa: E731
    config = PlannerConfig(horizon=1, penalty=0.0)
    for s0 in (-0.6, 0.0, 0.4):
        result = plan(exact, reward, np.array([s0]), config, 3)
        assert result.actions[0, 0] == pytest.approx(-s0, abs=0.05)


def test_penalized_plan_stays_out_of_the_uncertain_region():
    upward = lambda s, a: a[:, 0]  # noqa: E731
    config = PlannerConfig(horizon=5, penalty=0.0)
    bold = plan(CliffEnsemble(), upward, np.zeros(1), config, 0)
    cautious = plan(CliffEnsemble(), upward, np.zeros(1), dataclasses.replace(config, penalty=100.0), 0)
    assert bold.states.max() > 1.2
    assert cautious.states.max() <= 1.05


def test_cached_uncertainty_matches_a_recomputation(pendulum):
    model = LinearEnsemble(state_dim=2, offsets=(0.0, 0.3), action_dim=1)
    trajectory = mpc_rollout(pendulum, model, PlannerConfig(horizon=2, population=20, iterations=2), 8, 4)
    means, variances = model.predict(trajectory.states, trajectory.actions)
    recomputed = ensemble_uncertainty(means, variances, model.uncertainty_mode)
    np.testing.assert_allclose(trajectory.uncertainties, recomputed, rtol=0, atol=1e-12)
    assert trajectory.mean_uncertainty == pytest.approx(float(np.mean(recomputed)), abs=1e-12)
    assert trajectory.mean_uncertainty > 0.0


def test_real_rollout_stops_at_the_task_horizon():
    short = make_task_pair("pendulum", dt=0.05, horizon=4, friction=0.1)
    counter = StepCounter()
    trajectory = mpc_rollout(
        short, TrueModel(short), PlannerConfig(horizon=2, population=20, iterations=1), 10, 0, counter=counter
    )
    assert len(trajectory) == 4
    assert counter.counts["source"] == 4
    assert trajectory.dones.tolist() == [False, False, False, True]
