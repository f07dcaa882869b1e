"""
This module provides the soft actor-critic learner used for target-task fine-tuning.

The critic is an ensemble of N layer-normalized networks. Bellman targets use the
minimum over the target critics, subtract lambda_q * u(s, a) from samples that came
from the offline source dataset, and (optionally) carry the entropy bonus of a learned
temperature.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from errors import ContractViolation, DivergenceError
from nn_core import (
    AdamState,
    Gradients,
    Mlp,
    SquashedSample,
    Tape,
    adam_step,
    adam_update,
    backward,
    forward,
    init_mlp,
    load_parameters,
    save_parameters,
    tanh_gaussian_backward,
    tanh_gaussian_sample,
)
from utils import SeedLike, as_generator

logger: logging.Logger = logging.getLogger("Wombet")

Featurizer = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AgentConfig:
    """Hyperparameters of the actor-critic."""

    hidden: Tuple[int, ...] = (64, 64)
    n_critics: int = 2
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    temperature_lr: float = 3e-4
    gamma: float = 0.99
    polyak: float = 0.005
    batch_size: int = 256
    penalty: float = 1.0
    entropy: bool = True
    initial_temperature: float = 0.1
    target_entropy: Optional[float] = None
    critic_layer_norm: bool = True
    pretrain_steps: int = 0
    start_steps: int = 0

    def __post_init__(self) -> None:
        if not 2 <= self.n_critics <= 10:
            raise ContractViolation("the critic ensemble needs between 2 and 10 members")
        if not 0.0 <= self.polyak <= 1.0:
            raise ContractViolation("polyak coefficient must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation("discount must lie in [0, 1)")
        if not self.initial_temperature > 0.0:
            raise ContractViolation("temperature must be positive")
        if self.penalty < 0.0:
            raise ContractViolation("critic penalty weight must be non-negative")
        if self.batch_size < 1:
            raise ContractViolation("batch size must be positive")


@dataclass
class Batch:
    """A minibatch of transitions with provenance flags and cached uncertainty."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    source_flags: np.ndarray
    uncertainties: np.ndarray

    def __post_init__(self) -> None:
        size = len(self.states)
        if not all(
            len(column) == size
            for column in (self.actions, self.rewards, self.next_states, self.dones, self.source_flags, self.uncertainties)
        ):
            raise ContractViolation("batch columns differ in length")

    @property
    def size(self) -> int:
        return len(self.states)


@dataclass
class AgentState:
    """Actor, critic ensemble, target critics, temperature and their optimizers."""

    config: AgentConfig
    action_dim: int
    actor: Mlp
    critics: List[Mlp]
    target_critics: List[Mlp]
    log_temperature: np.ndarray
    actor_opt: AdamState
    critic_opts: List[AdamState]
    temperature_opt: AdamState
    featurize: Featurizer = field(default=lambda s: s)
    updates: int = 0

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature[0]))

    @property
    def target_entropy(self) -> float:
        if self.config.target_entropy is not None:
            return self.config.target_entropy
        return -float(self.action_dim)


def make_agent(
    feature_dim: int,
    action_dim: int,
    config: Optional[AgentConfig] = None,
    seed: int = 0,
    featurize: Optional[Featurizer] = None,
) -> AgentState:
    """
    Build a freshly initialized agent.

    Args:
        feature_dim (int): Width of featurized states.
        action_dim (int): Action width.
        config (Optional[AgentConfig], optional): Hyperparameters.
        seed (int, optional): Initialization seed. Defaults to 0.
        featurize (Optional[Featurizer], optional): Raw state to network features.

    Returns:
        AgentState: The agent; target critics start as exact copies of the critics.
    """
    config = config or AgentConfig()
    rng = np.random.default_rng(seed)
    actor = init_mlp([feature_dim, *config.hidden, 2 * action_dim], rng)
    critics = [
        init_mlp([feature_dim + action_dim, *config.hidden, 1], rng, layer_norm=config.critic_layer_norm)
        for _ in range(config.n_critics)
    ]
    log_temperature = np.array([math.log(config.initial_temperature)])
    return AgentState(
        config=config,
        action_dim=action_dim,
        actor=actor,
        critics=critics,
        target_critics=[c.copy() for c in critics],
        log_temperature=log_temperature,
        actor_opt=AdamState.for_mlp(actor, lr=config.actor_lr),
        critic_opts=[AdamState.for_mlp(c, lr=config.critic_lr) for c in critics],
        temperature_opt=AdamState.for_arrays([log_temperature], lr=config.temperature_lr),
        featurize=featurize or (lambda s: s),
    )


def critic_values(critic: Mlp, features: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Q(s, a) for a batch, shape (B,)."""
    out, _ = forward(critic, np.concatenate([features, actions], axis=1))
    return out[:, 0]


def policy_sample(agent: AgentState, features: np.ndarray, noise: np.ndarray) -> Tuple[SquashedSample, np.ndarray, Tape]:
    """Reparameterized actor draw; also returns the raw head output and its tape."""
    out, tape = forward(agent.actor, features)
    m = agent.action_dim
    return tanh_gaussian_sample(out[:, :m], out[:, m:], noise), out, tape


def next_q_values(agent: AgentState, batch: Batch, rng: SeedLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Target-critic values at (s', a') with a' drawn once from the current actor.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Per-member values (N, B) and log pi(a'|s') (B,).
    """
    generator = as_generator(rng)
    features = agent.featurize(np.asarray(batch.next_states, dtype=np.float64))
    noise = generator.standard_normal((batch.size, agent.action_dim))
    sample, _, _ = policy_sample(agent, features, noise)
    values = np.stack([critic_values(t, features, sample.action) for t in agent.target_critics])
    return values, sample.log_prob


def bellman_target(
    agent: AgentState,
    batch: Batch,
    rng: SeedLike,
    include_entropy: Optional[bool] = None,
    include_penalty: bool = True,
) -> np.ndarray:
    """
    Pessimistic soft Bellman target.

    y = r - 1[source] * lambda_q * u + (1 - done) * gamma * (min_i Qbar_i(s', a') - T * log pi(a'|s'))

    Args:
        agent (AgentState): The agent.
        batch (Batch): Transitions.
        rng (SeedLike): Seed or generator of the a' draw.
        include_entropy (Optional[bool], optional): Override of the config's entropy switch.
        include_penalty (bool, optional): Apply the source-sample penalty. Defaults to True.

    Returns:
        np.ndarray: Targets, (B,). Nothing flows back into parameters.
    """
    values, log_prob = next_q_values(agent, batch, rng)
    soft = values.min(axis=0)
    entropy = agent.config.entropy if include_entropy is None else include_entropy
    if entropy:
        soft = soft - agent.temperature * log_prob
    rewards = np.asarray(batch.rewards, dtype=np.float64)
    if include_penalty:
        flags = np.asarray(batch.source_flags, dtype=np.float64)
        rewards = rewards - flags * agent.config.penalty * np.asarray(batch.uncertainties, dtype=np.float64)
    not_done = 1.0 - np.asarray(batch.dones, dtype=np.float64)
    return rewards + not_done * agent.config.gamma * soft


def critic_loss_and_grads(
    critic: Mlp, features: np.ndarray, actions: np.ndarray, targets: np.ndarray
) -> Tuple[float, Gradients]:
    """
    Mean squared TD loss of one critic and its parameter gradients.

    Args:
        critic (Mlp): Critic network.
        features (np.ndarray): Featurized states, (B, feature_dim).
        actions (np.ndarray): Actions, (B, action_dim).
        targets (np.ndarray): Fixed regression targets, (B,).

    Returns:
        Tuple[float, Gradients]: Loss and gradients.
    """
    out, tape = forward(critic, np.concatenate([features, actions], axis=1))
    error = out[:, 0] - targets
    loss = float(np.mean(error**2))
    grads = backward(critic, tape, (2.0 * error / len(error))[:, None])
    return loss, grads


def critic_update(
    agent: AgentState,
    batch: Batch,
    rng: SeedLike,
    batch_id: Optional[int] = None,
    targets: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    One Adam step of every critic toward the shared target.

    Args:
        agent (AgentState): Agent updated in place (critics and their optimizers only).
        batch (Batch): Transitions.
        rng (SeedLike): Seed or generator of the target's a' draw.
        batch_id (Optional[int], optional): Reported in divergence errors.
        targets (Optional[np.ndarray], optional): Precomputed targets to regress to.

    Returns:
        np.ndarray: Per-member loss, (N,).
    """
    if targets is None:
        targets = bellman_target(agent, batch, rng)
    features = agent.featurize(np.asarray(batch.states, dtype=np.float64))
    actions = np.asarray(batch.actions, dtype=np.float64)
    results = [critic_loss_and_grads(c, features, actions, targets) for c in agent.critics]
    losses = np.array([loss for loss, _ in results])
    if not np.all(np.isfinite(losses)):
        raise DivergenceError("critic loss became non-finite", batch_id)
    for critic, opt, (_, grads) in zip(agent.critics, agent.critic_opts, results):
        adam_step(critic, grads, opt)
    return losses


def min_critic_with_action_grad(
    critics: List[Mlp], features: np.ndarray, actions: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """
    min_i Q_i(s, a) and its gradient w.r.t. the action.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Values (B,) and d(min Q)/da, (B, action_dim).
    """
    inputs = np.concatenate([features, actions], axis=1)
    passes = [forward(c, inputs) for c in critics]
    values = np.stack([out[:, 0] for out, _ in passes])
    winner = np.argmin(values, axis=0)
    grad = np.zeros_like(actions)
    for index, (critic, (_, tape)) in enumerate(zip(critics, passes)):
        mask = (winner == index).astype(np.float64)[:, None]
        if mask.any():
            grad += backward(critic, tape, mask).inputs[:, features.shape[1] :]
    return values[winner, np.arange(len(winner))], grad


def actor_loss_and_grads(
    agent: AgentState, features: np.ndarray, noise: np.ndarray
) -> Tuple[float, Gradients, np.ndarray]:
    """
    Actor loss mean(T * log pi(a|s) - min_i Q_i(s, a)) with reparameterized actions.

    The temperature term is dropped when entropy is switched off.

    Args:
        agent (AgentState): The agent; critics are read, never changed.
        features (np.ndarray): Featurized states, (B, feature_dim).
        noise (np.ndarray): Standard normal draws, (B, action_dim).

    Returns:
        Tuple[float, Gradients, np.ndarray]: Loss, actor gradients and log pi per row.
    """
    sample, _, tape = policy_sample(agent, features, noise)
    q_min, dq_da = min_critic_with_action_grad(agent.critics, features, sample.action)
    batch = len(q_min)
    temperature = agent.temperature if agent.config.entropy else 0.0
    loss = float(np.mean(temperature * sample.log_prob - q_min))
    grad_mean, grad_log_std = tanh_gaussian_backward(
        sample, -dq_da / batch, np.full(batch, temperature / batch)
    )
    grads = backward(agent.actor, tape, np.concatenate([grad_mean, grad_log_std], axis=1))
    return loss, grads, sample.log_prob


def actor_update(agent: AgentState, batch: Batch, rng: SeedLike, batch_id: Optional[int] = None) -> float:
    """
    One Adam step of the actor, followed by a temperature step when entropy is on.

    Args:
        agent (AgentState): Agent updated in place.
        batch (Batch): Transitions (only states are used).
        rng (SeedLike): Seed or generator of the reparameterization noise.
        batch_id (Optional[int], optional): Reported in divergence errors.

    Returns:
        float: The actor loss before the step.
    """
    generator = as_generator(rng)
    features = agent.featurize(np.asarray(batch.states, dtype=np.float64))
    noise = generator.standard_normal((batch.size, agent.action_dim))
    loss, grads, log_prob = actor_loss_and_grads(agent, features, noise)
    if not math.isfinite(loss):
        raise DivergenceError("actor loss became non-finite", batch_id)
    adam_step(agent.actor, grads, agent.actor_opt)
    if agent.config.entropy:
        temperature_update(agent, log_prob)
    agent.updates += 1
    return loss


def temperature_update(agent: AgentState, log_prob: np.ndarray) -> float:
    """
    Step log T on the loss -log T * mean(log pi + target_entropy).

    Returns:
        float: The new temperature.
    """
    grad = -float(np.mean(log_prob + agent.target_entropy))
    adam_update([agent.log_temperature], [np.array([grad])], agent.temperature_opt)
    return agent.temperature


def polyak_update(agent: AgentState, tau: Optional[float] = None) -> None:
    """Move every target-critic parameter toward its critic: theta_bar <- (1 - tau) theta_bar + tau theta."""
    rate: float = agent.config.polyak if tau is None else tau
    for critic, target in zip(agent.critics, agent.target_critics):
        for source, dest in zip(critic.parameters(), target.parameters()):
            dest[...] = (1.0 - rate) * dest + rate * source


def td_error(agent: AgentState, batch: Batch, rng: SeedLike) -> float:
    """
    Mean |Q_0(s, a) - y| against the ensemble-min target without entropy or penalty.

    Args:
        agent (AgentState): The agent; nothing is modified.
        batch (Batch): Online transitions.
        rng (SeedLike): Seed or generator of the a' draw.

    Returns:
        float: The TD error, >= 0.
    """
    targets = bellman_target(agent, batch, rng, include_entropy=False, include_penalty=False)
    features = agent.featurize(np.asarray(batch.states, dtype=np.float64))
    predictions = critic_values(agent.critics[0], features, np.asarray(batch.actions, dtype=np.float64))
    return float(np.mean(np.abs(predictions - targets)))


def act(agent: AgentState, state: np.ndarray, rng: Optional[SeedLike] = None, deterministic: bool = False) -> np.ndarray:
    """
    Choose an action for one raw state.

    Args:
        agent (AgentState): The agent.
        state (np.ndarray): Raw state.
        rng (Optional[SeedLike], optional): Needed unless `deterministic`.
        deterministic (bool, optional): Use tanh of the mean. Defaults to False.

    Returns:
        np.ndarray: Action in (-1, 1).
    """
    features = agent.featurize(np.asarray(state, dtype=np.float64)[None])
    if deterministic:
        out, _ = forward(agent.actor, features)
        m = agent.action_dim
        return tanh_gaussian_sample(out[:, :m], out[:, m:], np.zeros((1, m))).action[0]
    if rng is None:
        raise ContractViolation("stochastic action selection needs a generator")
    noise = as_generator(rng).standard_normal((1, agent.action_dim))
    sample, _, _ = policy_sample(agent, features, noise)
    return sample.action[0]


def save_agent(agent: AgentState, path: str) -> None:
    """Checkpoint actor, critics, target critics and the temperature."""
    nets = {"actor": agent.actor}
    nets.update({f"critic{i}": c for i, c in enumerate(agent.critics)})
    nets.update({f"target{i}": t for i, t in enumerate(agent.target_critics)})
    save_parameters(path, nets, {"log_temperature": float(agent.log_temperature[0]), "updates": agent.updates})


def load_agent(agent: AgentState, path: str) -> AgentState:
    """Load a `save_agent` checkpoint into a congruent agent, resetting its optimizers."""
    nets, metadata = load_parameters(path)
    n = len(agent.critics)
    agent.actor.set_parameters(nets["actor"].parameters())
    for i in range(n):
        agent.critics[i].set_parameters(nets[f"critic{i}"].parameters())
        agent.target_critics[i].set_parameters(nets[f"target{i}"].parameters())
    agent.log_temperature[0] = metadata["log_temperature"]
    agent.updates = int(metadata.get("updates", 0))
    agent.actor_opt = AdamState.for_mlp(agent.actor, lr=agent.config.actor_lr)
    agent.critic_opts = [AdamState.for_mlp(c, lr=agent.config.critic_lr) for c in agent.critics]
    agent.temperature_opt = AdamState.for_arrays([agent.log_temperature], lr=agent.config.temperature_lr)
    return agent
