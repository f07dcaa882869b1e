"""
This module provides the native source/target task pairs.

A task pair shares one deterministic transition function (RK4 integration of simple
rigid-body physics) between a source and a target task that differ only in their reward
function and initial-state distribution. Two pairs are available: pendulum swing-up and
2D point-mass navigation.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from errors import ContractViolation, EnvironmentFault

logger: logging.Logger = logging.getLogger("Wombet")

TASKS: Tuple[str, ...] = ("source", "target")
TASK_PAIRS: Tuple[str, ...] = ("pendulum", "point-mass")

RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def wrap_angle(angle: np.ndarray) -> np.ndarray:
    """Wrap angles into (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(angle, dtype=np.float64), 2.0 * math.pi)


@dataclass(frozen=True)
class EnvSpec:
    """Shared physical description of a task pair."""

    name: str
    state_dim: int
    action_dim: int
    horizon: int
    dt: float
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 9.81
    friction: float = 0.0
    force: float = 2.0
    max_speed: float = 8.0
    arena: float = 2.0

    def __post_init__(self) -> None:
        if self.name not in TASK_PAIRS:
            raise ContractViolation(f"unknown environment '{self.name}'")
        if self.horizon < 1:
            raise ContractViolation("horizon must be at least 1")
        if not self.dt > 0.0:
            raise ContractViolation("timestep must be positive")
        if not all(math.isfinite(v) for v in (self.force, self.max_speed, self.arena)):
            raise ContractViolation("actuation and state bounds must be finite")


@dataclass(frozen=True)
class QuadraticReward:
    """r(s, a) = -(sum_i w_i * d_i^2 + action_weight * |a|^2), d = s - setpoint (angles wrapped)."""

    setpoint: Tuple[float, ...]
    weights: Tuple[float, ...]
    action_weight: float
    angle_dims: Tuple[int, ...] = ()

    def __call__(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        offset = np.asarray(states, dtype=np.float64) - np.asarray(self.setpoint)
        if self.angle_dims:
            offset = offset.copy()
            dims = list(self.angle_dims)
            offset[..., dims] = wrap_angle(offset[..., dims])
        actions = np.asarray(actions, dtype=np.float64)
        return -(
            np.sum(np.asarray(self.weights) * offset**2, axis=-1)
            + self.action_weight * np.sum(actions**2, axis=-1)
        )


@dataclass(frozen=True)
class UniformBox:
    """Uniform initial-state distribution on center ± half_width."""

    center: Tuple[float, ...]
    half_width: Tuple[float, ...]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        center = np.asarray(self.center, dtype=np.float64)
        width = np.asarray(self.half_width, dtype=np.float64)
        return rng.uniform(center - width, center + width)


@dataclass(frozen=True)
class StepResult:
    """Outcome of one environment transition."""

    next_state: np.ndarray
    reward: float
    done: bool


def _pendulum_derivative(spec: EnvSpec, state: np.ndarray, action: np.ndarray) -> np.ndarray:
    # theta is measured from upright, so theta = 0 is the (unstable) equilibrium
    theta, theta_dot = state[..., 0], state[..., 1]
    inertia: float = spec.mass * spec.length**2
    theta_ddot = (
        spec.gravity / spec.length * np.sin(theta)
        - spec.friction * theta_dot / inertia
        + spec.force * action[..., 0] / inertia
    )
    return np.stack([theta_dot, theta_ddot], axis=-1)


def _point_mass_derivative(spec: EnvSpec, state: np.ndarray, action: np.ndarray) -> np.ndarray:
    velocity = state[..., 2:4]
    acceleration = (spec.force * action - spec.friction * velocity) / spec.mass
    return np.concatenate([velocity, acceleration], axis=-1)


_DERIVATIVES: Dict[str, Callable[[EnvSpec, np.ndarray, np.ndarray], np.ndarray]] = {
    "pendulum": _pendulum_derivative,
    "point-mass": _point_mass_derivative,
}


def rk4_step(spec: EnvSpec, state: np.ndarray, action: np.ndarray) -> np.ndarray:
    """One classical Runge-Kutta step of the EnvSpec dynamics, zero-order hold on the action."""
    derivative = _DERIVATIVES[spec.name]
    dt: float = spec.dt
    k1 = derivative(spec, state, action)
    k2 = derivative(spec, state + 0.5 * dt * k1, action)
    k3 = derivative(spec, state + 0.5 * dt * k2, action)
    k4 = derivative(spec, state + dt * k3, action)
    return state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def pendulum_energy(spec: EnvSpec, state: np.ndarray) -> np.ndarray:
    """Total mechanical energy of a pendulum state (potential zero at the pivot height)."""
    state = np.asarray(state, dtype=np.float64)
    kinetic = 0.5 * spec.mass * spec.length**2 * state[..., 1] ** 2
    potential = spec.mass * spec.gravity * spec.length * np.cos(state[..., 0])
    return kinetic + potential


@dataclass(frozen=True)
class TaskPair:
    """Source and target tasks over one shared dynamics spec."""

    spec: EnvSpec
    source_reward: QuadraticReward
    target_reward: QuadraticReward
    source_init: UniformBox
    target_init: UniformBox
    gamma: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation("discount must lie in [0, 1)")

    @property
    def feature_dim(self) -> int:
        """Width of `featurize` output."""
        return self.spec.state_dim + 1 if self.spec.name == "pendulum" else self.spec.state_dim

    def featurize(self, states: np.ndarray) -> np.ndarray:
        """Network input features; the pendulum angle becomes (cos, sin)."""
        states = np.asarray(states, dtype=np.float64)
        if self.spec.name != "pendulum":
            return states
        theta = states[..., 0:1]
        return np.concatenate([np.cos(theta), np.sin(theta), states[..., 1:]], axis=-1)

    def _task_reward(self, task: str) -> QuadraticReward:
        if task == "source":
            return self.source_reward
        if task == "target":
            return self.target_reward
        raise ContractViolation(f"unknown task '{task}'")

    def reward_fn(self, task: str) -> RewardFn:
        """The vectorized reward function of one task."""
        return self._task_reward(task)

    def reward(self, state: np.ndarray, action: np.ndarray, task: str) -> np.ndarray:
        """Reward of `task` at (state, action); works on single rows and batches."""
        return self._task_reward(task)(state, np.clip(action, -1.0, 1.0))

    def dynamics(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        """Shared deterministic transition; accepts single rows and batches."""
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        nxt = rk4_step(self.spec, np.asarray(state, dtype=np.float64), action)
        if self.spec.name == "pendulum":
            nxt[..., 1] = np.clip(nxt[..., 1], -self.spec.max_speed, self.spec.max_speed)
        else:
            nxt[..., 0:2] = np.clip(nxt[..., 0:2], -self.spec.arena, self.spec.arena)
            nxt[..., 2:4] = np.clip(nxt[..., 2:4], -self.spec.max_speed, self.spec.max_speed)
        return nxt

    def reset(self, task: str, seed: int) -> np.ndarray:
        """Sample an initial state from the task's distribution, deterministically in `seed`."""
        box: UniformBox
        if task == "source":
            box = self.source_init
        elif task == "target":
            box = self.target_init
        else:
            raise ContractViolation(f"unknown task '{task}'")
        return box.sample(np.random.default_rng(seed))

    def step(self, state: np.ndarray, action: np.ndarray, task: str, t: int = 0) -> StepResult:
        """
        Advance one step of `task` from `state`.

        Args:
            state (np.ndarray): Current state.
            action (np.ndarray): Action, clipped to [-1, 1].
            task (str): "source" or "target".
            t (int, optional): Index of this step within the episode. Defaults to 0.

        Returns:
            StepResult: Next state, task reward and whether the horizon was reached.
        """
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        nxt = self.dynamics(state, action)
        if not np.all(np.isfinite(nxt)):
            raise EnvironmentFault(f"non-finite state {nxt} after step {t} of {self.spec.name}")
        reward = float(self.reward(state, action, task))
        return StepResult(nxt, reward, t + 1 >= self.spec.horizon)

    def reward_bound(self, task: str) -> float:
        """r_max: the largest |r(s, a)| reachable under the state and action clipping."""
        reward = self._task_reward(task)
        spec = self.spec
        bound: float = reward.action_weight * spec.action_dim
        for dim, (weight, setpoint) in enumerate(zip(reward.weights, reward.setpoint)):
            if dim in reward.angle_dims:
                reach = math.pi
            elif spec.name == "pendulum" or dim >= 2:
                reach = spec.max_speed + abs(setpoint)
            else:
                reach = spec.arena + abs(setpoint)
            bound += weight * reach**2
        return bound


def make_task_pair(
    name: str,
    dt: Optional[float] = None,
    horizon: Optional[int] = None,
    friction: Optional[float] = None,
    gamma: float = 0.99,
    target_velocity_weight: float = 0.5,
    target_setpoint: float = 0.0,
) -> TaskPair:
    """
    Build one of the desk-scale task pairs.

    Args:
        name (str): "pendulum" or "point-mass".
        dt (Optional[float], optional): Integration timestep override.
        horizon (Optional[int], optional): Episode length override.
        friction (Optional[float], optional): Friction override.
        gamma (float, optional): Discount of both tasks. Defaults to 0.99.
        target_velocity_weight (float, optional): Pendulum target velocity cost. Defaults to 0.5.
        target_setpoint (float, optional): Pendulum target angle setpoint, or the x offset
            of the point-mass target goal from the source goal. Defaults to 0.0.

    Returns:
        TaskPair: The configured pair.
    """
    if name == "pendulum":
        spec = EnvSpec(
            "pendulum",
            state_dim=2,
            action_dim=1,
            horizon=horizon or 200,
            dt=dt or 0.05,
            friction=0.0 if friction is None else friction,
        )
        return TaskPair(
            spec,
            source_reward=QuadraticReward((0.0, 0.0), (1.0, 0.1), 0.001, angle_dims=(0,)),
            target_reward=QuadraticReward(
                (target_setpoint, 0.0), (1.0, target_velocity_weight), 0.001, angle_dims=(0,)
            ),
            source_init=UniformBox((math.pi, 0.0), (0.3, 0.05)),
            target_init=UniformBox((math.pi, 0.0), (1.0, 0.5)),
            gamma=gamma,
        )
    if name == "point-mass":
        spec = EnvSpec(
            "point-mass",
            state_dim=4,
            action_dim=2,
            horizon=horizon or 100,
            dt=dt or 0.1,
            friction=0.5 if friction is None else friction,
            force=1.0,
            max_speed=2.0,
        )
        goal_x: float = 1.0 + target_setpoint
        return TaskPair(
            spec,
            source_reward=QuadraticReward((1.0, 1.0, 0.0, 0.0), (1.0, 1.0, 0.1, 0.1), 0.01),
            target_reward=QuadraticReward((goal_x, -1.0, 0.0, 0.0), (1.0, 1.0, 0.1, 0.1), 0.01),
            source_init=UniformBox((0.0, 0.0, 0.0, 0.0), (0.1, 0.1, 0.0, 0.0)),
            target_init=UniformBox((0.0, 0.0, 0.0, 0.0), (0.5, 0.5, 0.1, 0.1)),
            gamma=gamma,
        )
    raise ContractViolation(f"unknown task pair '{name}'")


@dataclass
class StepCounter:
    """Tally of real environment interaction, per task."""

    counts: Dict[str, int] = field(default_factory=lambda: {task: 0 for task in TASKS})

    def charge(self, task: str, steps: int = 1) -> None:
        self.counts[task] += steps

    @property
    def total(self) -> int:
        return sum(self.counts.values())


class Env:
    """
    A stateful episode runner over one task of a pair.

    Every real step is charged to the optional shared `StepCounter`, which is how the
    harness accounts interaction budgets.
    """

    def __init__(self, pair: TaskPair, task: str, counter: Optional[StepCounter] = None) -> None:
        if task not in TASKS:
            raise ContractViolation(f"unknown task '{task}'")
        self.pair: TaskPair = pair
        self.task: str = task
        self.counter: Optional[StepCounter] = counter
        self.state: np.ndarray = np.zeros(pair.spec.state_dim)
        self.t: int = 0

    def reset(self, seed: int) -> np.ndarray:
        self.state = self.pair.reset(self.task, seed)
        self.t = 0
        return self.state.copy()

    def step(self, action: np.ndarray) -> StepResult:
        result = self.pair.step(self.state, action, self.task, self.t)
        if self.counter is not None:
            self.counter.charge(self.task)
        self.state = result.next_state
        self.t += 1
        return result
