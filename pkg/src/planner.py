"""
This module provides the receding-horizon planner.

Action sequences are scored under the ensemble model by their uncertainty-penalized
discounted return sum_k gamma^k [r(s_k, a_k) - lambda * u(s_k, a_k)] and optimized with
the cross-entropy method. `mpc_rollout` replans every step and executes only the first
action, either in the real environment or under the model itself.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Tuple

import numpy as np

from envs import RewardFn, StepCounter, TaskPair
from errors import ContractViolation, EnvironmentFault, PlannerFailure
from utils import SeedLike, as_generator, spawn_seeds
from world_model import ensemble_uncertainty

logger: logging.Logger = logging.getLogger("Wombet")

PROPAGATIONS: Tuple[str, ...] = ("mean", "particles")
ROLLOUT_MODES: Tuple[str, ...] = ("real-mpc", "synthetic")


class EnsemblePredictor(Protocol):
    """What the planner needs from a dynamics ensemble."""

    state_dim: int
    action_dim: int

    @property
    def uncertainty_mode(self) -> str: ...

    def predict(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...


@dataclass(frozen=True)
class PlannerConfig:
    """Cross-entropy-method settings and the penalty weight lambda."""

    horizon: int = 15
    penalty: float = 1.0
    population: int = 256
    elite_fraction: float = 0.1
    iterations: int = 5
    init_std: float = 0.5
    std_floor: float = 0.05
    gamma: float = 0.99
    propagation: str = "mean"

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ContractViolation("planner horizon must be at least 1")
        if self.penalty < 0.0:
            raise ContractViolation("penalty weight must be non-negative")
        if self.elite_count < 2 or self.population < self.elite_count:
            raise ContractViolation("need at least two elites and a population no smaller")
        if self.iterations < 1:
            raise ContractViolation("CEM needs at least one iteration")
        if self.propagation not in PROPAGATIONS:
            raise ContractViolation(f"unknown propagation '{self.propagation}'")

    @property
    def elite_count(self) -> int:
        return int(round(self.population * self.elite_fraction))


@dataclass
class PlanResult:
    """Outcome of one planning call."""

    actions: np.ndarray
    value: float
    uncertainties: np.ndarray
    states: np.ndarray
    mean: np.ndarray


@dataclass
class Trajectory:
    """
    One episode of transitions with its cached filter statistics.

    `rewards` is the reward column currently attached (source rewards until relabeled);
    `source_rewards` always keeps r_S, from which the return J is computed.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    source_rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    uncertainties: np.ndarray
    episode: int = 0
    fault: bool = False
    gamma: float = 1.0
    source_return: float = field(init=False)
    mean_uncertainty: float = field(init=False)

    def __post_init__(self) -> None:
        count = len(self.states)
        if not (
            len(self.actions) == len(self.rewards) == len(self.source_rewards) == count
            and len(self.next_states) == len(self.dones) == len(self.uncertainties) == count
        ):
            raise ContractViolation("trajectory columns differ in length")
        self.source_return = discounted_return(self.source_rewards, self.gamma)
        self.mean_uncertainty = float(np.mean(self.uncertainties)) if count else 0.0

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def empty(cls, state_dim: int, action_dim: int, episode: int = 0, gamma: float = 1.0) -> "Trajectory":
        return cls(
            states=np.zeros((0, state_dim)),
            actions=np.zeros((0, action_dim)),
            rewards=np.zeros(0),
            source_rewards=np.zeros(0),
            next_states=np.zeros((0, state_dim)),
            dones=np.zeros(0, dtype=bool),
            uncertainties=np.zeros(0),
            episode=episode,
            gamma=gamma,
        )


def discounted_return(rewards: np.ndarray, gamma: float) -> float:
    """sum_t gamma^t r_t."""
    if len(rewards) == 0:
        return 0.0
    return float(np.sum(np.asarray(rewards) * gamma ** np.arange(len(rewards))))


def evaluate_sequences(
    model: EnsemblePredictor,
    reward_fn: RewardFn,
    s0: np.ndarray,
    action_sequences: np.ndarray,
    penalty: float,
    gamma: float,
    propagation: str = "mean",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Penalized model returns of a population of action sequences.

    Args:
        model (EnsemblePredictor): Dynamics ensemble.
        reward_fn (RewardFn): Known reward r(s, a), vectorized over rows.
        s0 (np.ndarray): Start state.
        action_sequences (np.ndarray): (P, H, action_dim) candidates.
        penalty (float): lambda.
        gamma (float): Discount inside the horizon.
        propagation (str, optional): "mean" follows the mean of member means; "particles"
            follows a random member per step with Gaussian noise. Defaults to "mean".
        rng (Optional[np.random.Generator], optional): Required for "particles".

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: Returns (P,), with -inf for rollouts that
            went non-finite; visited states (P, H + 1, n); step uncertainties (P, H).
    """
    count, horizon, _ = action_sequences.shape
    states = np.empty((count, horizon + 1, len(s0)))
    states[:, 0] = s0
    uncertainties = np.zeros((count, horizon))
    totals = np.zeros(count)
    alive = np.ones(count, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(horizon):
            current = np.where(alive[:, None], states[:, k], 0.0)
            actions = action_sequences[:, k]
            means, variances = model.predict(current, actions)
            u = ensemble_uncertainty(means, variances, model.uncertainty_mode)
            uncertainties[:, k] = u
            totals += gamma**k * (reward_fn(current, actions) - penalty * u)
            if propagation == "particles":
                if rng is None:
                    raise ContractViolation("particle propagation needs a generator")
                rows = np.arange(count)
                picks = rng.integers(0, means.shape[0], size=count)
                noise = rng.standard_normal(means.shape[1:])
                nxt = means[picks, rows] + np.sqrt(variances[picks, rows]) * noise
            else:
                nxt = means.mean(axis=0)
            alive &= np.all(np.isfinite(nxt), axis=1) & np.isfinite(totals)
            states[:, k + 1] = nxt
    totals[~alive] = -np.inf
    return totals, states, uncertainties


def evaluate_sequence(
    model: EnsemblePredictor,
    reward_fn: RewardFn,
    s0: np.ndarray,
    actions: np.ndarray,
    penalty: float,
    gamma: float,
) -> float:
    """
    Penalized return of one action sequence under ensemble-mean propagation.

    Args:
        model (EnsemblePredictor): Dynamics ensemble.
        reward_fn (RewardFn): Known reward function.
        s0 (np.ndarray): Start state.
        actions (np.ndarray): (H, action_dim) sequence within [-1, 1].
        penalty (float): lambda.
        gamma (float): Discount.

    Returns:
        float: sum_k gamma^k [r - lambda * u], or -inf if the rollout went non-finite.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if np.any(np.abs(actions) > 1.0):
        raise ContractViolation("actions must lie within [-1, 1]")
    totals, _, _ = evaluate_sequences(model, reward_fn, np.asarray(s0, dtype=np.float64), actions[None], penalty, gamma)
    return float(totals[0])


def plan(
    model: EnsemblePredictor,
    reward_fn: RewardFn,
    s0: np.ndarray,
    config: PlannerConfig,
    seed: SeedLike,
    init_mean: Optional[np.ndarray] = None,
) -> PlanResult:
    """
    Optimize a horizon-H action sequence with the cross-entropy method.

    Candidates are ranked by a stable sort on their penalized return, so equal scores
    resolve to the lower candidate index.

    Args:
        model (EnsemblePredictor): Dynamics ensemble.
        reward_fn (RewardFn): Known reward function.
        s0 (np.ndarray): Current state.
        config (PlannerConfig): CEM settings.
        seed (SeedLike): Seed or generator for candidate sampling.
        init_mean (Optional[np.ndarray], optional): Warm-start mean, (H, action_dim).

    Returns:
        PlanResult: The best sequence found and the elite-mean rollout statistics.
    """
    rng = as_generator(seed)
    s0 = np.asarray(s0, dtype=np.float64)
    shape = (config.horizon, model.action_dim)
    mean = np.zeros(shape) if init_mean is None else np.clip(np.asarray(init_mean, dtype=np.float64), -1.0, 1.0)
    std = np.full(shape, config.init_std)
    best_value: float = -np.inf
    best_actions: Optional[np.ndarray] = None

    for _ in range(config.iterations):
        noise = rng.standard_normal((config.population, *shape))
        candidates = np.clip(mean + std * noise, -1.0, 1.0)
        values, _, _ = evaluate_sequences(
            model, reward_fn, s0, candidates, config.penalty, config.gamma, config.propagation, rng
        )
        order = np.argsort(-values, kind="stable")
        elite_rows = [i for i in order[: config.elite_count] if np.isfinite(values[i])]
        if not elite_rows:
            continue
        if values[elite_rows[0]] > best_value:
            best_value = float(values[elite_rows[0]])
            best_actions = candidates[elite_rows[0]].copy()
        elites = candidates[elite_rows]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), config.std_floor)

    if best_actions is None:
        raise PlannerFailure("every candidate action sequence produced a non-finite rollout")
    _, states, uncertainties = evaluate_sequences(model, reward_fn, s0, mean[None], config.penalty, config.gamma)
    return PlanResult(best_actions, best_value, uncertainties[0], states[0], mean)


def shift_plan(actions: np.ndarray) -> np.ndarray:
    """Time-shift a plan by one step for warm-starting, padding with zeros."""
    return np.concatenate([actions[1:], np.zeros_like(actions[:1])], axis=0)


def mpc_rollout(
    pair: TaskPair,
    model: EnsemblePredictor,
    config: PlannerConfig,
    episode_len: int,
    seed: int,
    mode: str = "real-mpc",
    task: str = "source",
    counter: Optional[StepCounter] = None,
    reward_fn: Optional[RewardFn] = None,
    episode: int = 0,
) -> Trajectory:
    """
    Run one receding-horizon episode.

    In "real-mpc" mode the first planned action is executed in the real task and the
    step is charged to `counter`; in "synthetic" mode the model's `synthetic_step`
    produces the successor and the task reward is evaluated on model states.

    Args:
        pair (TaskPair): Task pair providing rewards, resets and real dynamics.
        model (EnsemblePredictor): Dynamics ensemble (needs `synthetic_step` in synthetic mode).
        config (PlannerConfig): Planner settings.
        episode_len (int): Maximum number of steps; the episode also ends at the task horizon.
        seed (int): Seed of the reset, the planner and synthetic sampling.
        mode (str, optional): "real-mpc" or "synthetic". Defaults to "real-mpc".
        task (str, optional): Task whose reward is planned for. Defaults to "source".
        counter (Optional[StepCounter], optional): Real-interaction tally.
        reward_fn (Optional[RewardFn], optional): Override of the planning reward.
        episode (int, optional): Episode index stored in the trajectory.

    Returns:
        Trajectory: The realized transitions, truncated with `fault` set on an environment fault.
    """
    if mode not in ROLLOUT_MODES:
        raise ContractViolation(f"unknown rollout mode '{mode}'")
    spec = pair.spec
    if episode_len <= 0:
        return Trajectory.empty(spec.state_dim, spec.action_dim, episode, pair.gamma)
    reset_seed, plan_seed, sample_seed = spawn_seeds(seed, 3)
    plan_rng = np.random.default_rng(plan_seed)
    sample_rng = np.random.default_rng(sample_seed)
    planning_reward: RewardFn = reward_fn or pair.reward_fn(task)

    state = pair.reset(task, reset_seed)
    warm: Optional[np.ndarray] = None
    fault: bool = False
    rows: List[Tuple[np.ndarray, np.ndarray, float, np.ndarray, float, bool]] = []
    for t in range(episode_len):
        try:
            result = plan(model, planning_reward, state, config, plan_rng, init_mean=warm)
            action = result.actions[0]
            warm = shift_plan(result.mean)
        except PlannerFailure as e:
            logger.warning("Planner failed at step %d of episode %d (%s); using a zero action", t, episode, e)
            action = np.zeros(spec.action_dim)
            warm = None
        means, variances = model.predict(state[None], action[None])
        u = float(ensemble_uncertainty(means, variances, model.uncertainty_mode)[0])
        if mode == "real-mpc":
            try:
                step = pair.step(state, action, task, t)
            except EnvironmentFault as e:
                logger.warning("Episode %d truncated at step %d: %s", episode, t, e)
                fault = True
                break
            if counter is not None:
                counter.charge(task)
            nxt, reward, done = step.next_state, step.reward, step.done
        else:
            nxt = model.synthetic_step(state, action, sample_rng)  # type: ignore[attr-defined]
            reward = float(pair.reward(state, action, task))
            if not np.all(np.isfinite(nxt)):
                logger.warning("Synthetic episode %d went non-finite at step %d", episode, t)
                fault = True
                break
            done = t + 1 >= spec.horizon
        rows.append((state, action, reward, nxt, u, done))
        state = nxt
        if done:
            break

    if not rows:
        empty = Trajectory.empty(spec.state_dim, spec.action_dim, episode, pair.gamma)
        empty.fault = fault
        return empty
    states, actions, rewards, next_states, uncertainties, dones = (np.asarray(col) for col in zip(*rows))
    return Trajectory(
        states=states,
        actions=actions,
        rewards=rewards.astype(np.float64),
        source_rewards=rewards.astype(np.float64).copy(),
        next_states=next_states,
        dones=dones,
        uncertainties=uncertainties.astype(np.float64),
        episode=episode,
        fault=fault,
        gamma=pair.gamma,
    )
