import math

import numpy as np
import pytest

from datagen import OfflineDataset
from errors import ContractViolation, PreconditionError
from planner import Trajectory
from transfer import (
    ControllerConfig,
    MixController,
    ReplayBuffer,
    Transition,
    offline_count,
    sample_mixed,
)


def _transition(value: float) -> Transition:
    return Transition(np.full(2, value), np.full(1, value), value, np.full(2, value + 1.0), False)


def _buffer(count: int = 10, capacity: int = 100) -> ReplayBuffer:
    buffer = ReplayBuffer(capacity, 2, 1)
    for i in range(count):
        buffer.push(_transition(float(i)))
    return buffer


def _offline(rows: int = 20) -> OfflineDataset:
    trajectory = Trajectory(
        states=np.full((rows, 2), -1.0),
        actions=np.zeros((rows, 1)),
        rewards=np.full(rows, 7.0),
        source_rewards=np.full(rows, -3.0),
        next_states=np.zeros((rows, 2)),
        dones=np.zeros(rows, dtype=bool),
        uncertainties=np.full(rows, 0.25),
    )
    return OfflineDataset.from_trajectories([trajectory], 2, 1)


def test_replay_buffer_evicts_oldest_first():
    buffer = _buffer(count=5, capacity=3)
    assert len(buffer) == 3
    assert buffer.inserted == 5
    np.testing.assert_array_equal(buffer.contents().rewards, [2.0, 3.0, 4.0])


def test_empty_buffer_cannot_be_sampled():
    with pytest.raises(PreconditionError):
        ReplayBuffer(4, 2, 1).sample(1, 0)


def test_offline_count_rounds_halves_up():
    assert offline_count(0.5, 3) == 2
    assert offline_count(0.0, 256) == 0
    assert offline_count(1.0, 256) == 256


def test_batch_composition_follows_alpha():
    offline, online = _offline(), _buffer()
    rng = np.random.default_rng(0)
    for alpha in np.round(np.arange(0.0, 1.0001, 0.01), 2):
        batch = sample_mixed(offline, online, float(alpha), 256, rng)
        expected = math.floor(alpha * 256 + 0.5)
        assert batch.size == 256
        assert int(np.sum(batch.source_flags)) == expected
        assert np.all(batch.source_flags[:expected]) and not np.any(batch.source_flags[expected:])


def test_offline_rows_carry_target_rewards_and_uncertainty():
    batch = sample_mixed(_offline(), _buffer(), 1.0, 16, 0)
    np.testing.assert_array_equal(batch.rewards, np.full(16, 7.0))
    np.testing.assert_array_equal(batch.uncertainties, np.full(16, 0.25))
    online = sample_mixed(_offline(), _buffer(), 0.0, 16, 0)
    np.testing.assert_array_equal(online.uncertainties, np.zeros(16))


def test_an_empty_pool_yields_to_the_other():
    assert np.all(sample_mixed(_offline(), ReplayBuffer(5, 2, 1), 0.1, 32, 0).source_flags)
    assert not np.any(sample_mixed(None, _buffer(), 0.9, 32, 0).source_flags)
    assert not np.any(sample_mixed(OfflineDataset.empty(2, 1), _buffer(), 0.9, 32, 0).source_flags)
    with pytest.raises(PreconditionError):
        sample_mixed(OfflineDataset.empty(2, 1), ReplayBuffer(5, 2, 1), 0.5, 32, 0)


def test_mixing_rejects_bad_arguments():
    with pytest.raises(ContractViolation):
        sample_mixed(_offline(), _buffer(), 1.5, 32, 0)
    with pytest.raises(ContractViolation):
        sample_mixed(_offline(), _buffer(), 0.5, 0, 0)


def test_alpha_stays_within_bounds_for_any_stream():
    config = ControllerConfig(gain=3.0, alpha_min=0.2, alpha_max=0.7, beta_ema=0.3)
    controller = MixController(config)
    rng = np.random.default_rng(0)
    stream = list(rng.exponential(size=200)) + [1e12, 0.0, 1e-300, math.nan, math.inf, -1.0, 5.0]
    for delta in stream:
        alpha = controller.update_alpha(delta)
        assert config.alpha_min <= alpha <= config.alpha_max
    assert len(controller.trace) == 204


def test_ema_matches_closed_form():
    beta = 0.1
    controller = MixController(ControllerConfig(beta_ema=beta, gain=1.0))
    deltas = np.random.default_rng(1).uniform(0.0, 2.0, size=50)
    for delta in deltas:
        controller.update_alpha(float(delta))
    k = len(deltas)
    expected = (1.0 - beta) ** (k - 1) * deltas[0] + sum(
        beta * (1.0 - beta) ** (k - 1 - j) * deltas[j] for j in range(1, k)
    )
    assert controller.delta_bar == pytest.approx(expected, abs=1e-6)
    assert controller.last() == (pytest.approx(deltas[-1]), pytest.approx(expected, abs=1e-6))


def test_auto_gain_maps_the_first_error_to_the_target_alpha():
    controller = MixController(ControllerConfig(auto_alpha=0.8, alpha_max=0.9))
    assert controller.update_alpha(0.0) == 0.9
    assert controller.gain is None
    assert controller.update_alpha(2.0) == pytest.approx(0.8)
    assert controller.gain == pytest.approx(0.8 / (0.95 * 0.0 + 0.05 * 2.0))


def test_rejected_observations_leave_the_controller_untouched():
    controller = MixController(ControllerConfig(gain=1.0))
    controller.update_alpha(0.5)
    before = (controller.delta_bar, controller.alpha, len(controller.trace))
    for bad in (math.nan, -0.1, math.inf):
        controller.update_alpha(bad)
    assert (controller.delta_bar, controller.alpha, len(controller.trace)) == before


def test_fixed_alpha_and_bootstrap():
    fixed = MixController(ControllerConfig(fixed_alpha=0.3, bootstrap_steps=100))
    fixed.update_alpha(10.0)
    assert fixed.current_alpha(0) == 0.3
    assert fixed.current_alpha(10_000) == 0.3

    adaptive = MixController(ControllerConfig(gain=0.1, bootstrap_steps=100))
    adaptive.update_alpha(2.0)
    assert adaptive.current_alpha(99) == adaptive.config.alpha_max
    assert adaptive.current_alpha(100) == pytest.approx(0.2)


def test_measurement_cadence():
    controller = MixController(ControllerConfig(measure_every=25))
    assert [step for step in range(101) if controller.should_measure(step)] == [25, 50, 75, 100]
    assert math.isnan(controller.last()[0])


def test_controller_config_validation():
    with pytest.raises(ContractViolation):
        ControllerConfig(alpha_min=0.9, alpha_max=0.1)
    with pytest.raises(ContractViolation):
        ControllerConfig(beta_ema=0.0)
    with pytest.raises(ContractViolation):
        ControllerConfig(fixed_alpha=2.0)


def test_pre_clip_alpha_grows_with_the_smoothed_error():
    history = np.random.default_rng(3).uniform(0.0, 1.0, size=10)
    previous = -math.inf
    for delta in np.linspace(0.0, 5.0, 26):
        controller = MixController(ControllerConfig(gain=0.4, beta_ema=0.2))
        for past in history:
            controller.update_alpha(float(past))
        controller.update_alpha(float(delta))
        assert controller.pre_clip >= previous
        previous = controller.pre_clip


def test_constant_stream_converges_geometrically():
    beta, start, constant = 0.2, 3.0, 0.5
    controller = MixController(ControllerConfig(beta_ema=beta, gain=1.0))
    controller.update_alpha(start)
    for k in range(1, 40):
        controller.update_alpha(constant)
        expected = (1.0 - beta) ** k * abs(start - constant)
        assert abs(controller.delta_bar - constant) == pytest.approx(expected, rel=1e-9, abs=1e-15)
