"""
Shared fixtures: small task pairs, tiny experiment configs and a finite-difference helper.
"""

import dataclasses
from typing import Callable

import numpy as np
import pytest

from config_utils import ExperimentConfig, EnvConfig
from datagen import FilterConfig
from agent import AgentConfig
from envs import TaskPair, make_task_pair
from planner import PlannerConfig
from transfer import ControllerConfig
from world_model import ModelConfig


def numeric_gradient(loss: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of `loss()` w.r.t. every entry of `array` (perturbed in place)."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + eps
        plus = loss()
        array[index] = original - eps
        minus = loss()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute difference relative to the largest magnitude involved."""
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


@pytest.fixture
def pendulum() -> TaskPair:
    return make_task_pair("pendulum", dt=0.05, horizon=50, friction=0.1)


@pytest.fixture
def point_mass() -> TaskPair:
    return make_task_pair("point-mass", dt=0.1, horizon=30, friction=0.5)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """A config small enough to run the whole pipeline in seconds."""
    return ExperimentConfig(
        task_pair="pendulum",
        seeds=(0,),
        budget=60,
        refine_every=40,
        refresh_episodes=2,
        seed_transitions=200,
        dataset_episodes=3,
        eval_every=30,
        eval_episodes=2,
        replay_capacity=1000,
        env=EnvConfig(horizon=20),
        model=ModelConfig(ensemble_size=3, hidden=(16,), batch_size=32, epochs=2),
        planner=PlannerConfig(horizon=4, population=16, iterations=2),
        filter=FilterConfig(),
        agent=AgentConfig(hidden=(16,), batch_size=16),
        controller=ControllerConfig(bootstrap_steps=20, measure_every=10, td_batch=16),
    )


@pytest.fixture
def tiny_offline_config(tiny_config: ExperimentConfig) -> ExperimentConfig:
    return dataclasses.replace(tiny_config, agent=dataclasses.replace(tiny_config.agent, pretrain_steps=10))
