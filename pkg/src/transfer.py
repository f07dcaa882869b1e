"""
This module provides the offline/online mixing machinery: the online replay buffer,
mixed minibatch sampling at ratio alpha and the TD-error driven alpha controller.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from agent import Batch
from datagen import OfflineDataset
from errors import ContractViolation, PreconditionError
from utils import SeedLike, as_generator

logger: logging.Logger = logging.getLogger("Wombet")


@dataclass(frozen=True)
class Transition:
    """One (s, a, r, s', done) tuple with provenance and cached uncertainty."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    source_flag: bool = False
    uncertainty: float = 0.0


class ReplayBuffer:
    """
    Fixed-capacity FIFO store of transitions backed by preallocated arrays.
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int) -> None:
        if capacity < 1:
            raise ContractViolation("replay capacity must be positive")
        self.capacity: int = capacity
        self.states: np.ndarray = np.zeros((capacity, state_dim))
        self.actions: np.ndarray = np.zeros((capacity, action_dim))
        self.rewards: np.ndarray = np.zeros(capacity)
        self.next_states: np.ndarray = np.zeros((capacity, state_dim))
        self.dones: np.ndarray = np.zeros(capacity, dtype=bool)
        self.source_flags: np.ndarray = np.zeros(capacity, dtype=bool)
        self.uncertainties: np.ndarray = np.zeros(capacity)
        self.inserted: int = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def push(self, transition: Transition) -> None:
        """Append a transition, evicting the oldest one when full."""
        slot = self.inserted % self.capacity
        self.states[slot] = transition.state
        self.actions[slot] = transition.action
        self.rewards[slot] = transition.reward
        self.next_states[slot] = transition.next_state
        self.dones[slot] = transition.done
        self.source_flags[slot] = transition.source_flag
        self.uncertainties[slot] = transition.uncertainty
        self.inserted += 1

    def _ordered_rows(self) -> np.ndarray:
        if self.inserted <= self.capacity:
            return np.arange(self.inserted)
        start = self.inserted % self.capacity
        return np.concatenate([np.arange(start, self.capacity), np.arange(start)])

    def rows(self, rows: np.ndarray) -> Batch:
        """Gather storage slots into a batch."""
        return Batch(
            states=self.states[rows],
            actions=self.actions[rows],
            rewards=self.rewards[rows],
            next_states=self.next_states[rows],
            dones=self.dones[rows],
            source_flags=self.source_flags[rows],
            uncertainties=self.uncertainties[rows],
        )

    def contents(self) -> Batch:
        """Everything currently stored, oldest first."""
        return self.rows(self._ordered_rows())

    def sample(self, count: int, rng: SeedLike) -> Batch:
        """Uniform sample with replacement."""
        if len(self) == 0:
            raise PreconditionError("cannot sample from an empty replay buffer")
        return self.rows(as_generator(rng).integers(0, len(self), size=count))


def offline_count(alpha: float, batch_size: int) -> int:
    """round(alpha * B), halves rounded up."""
    return int(math.floor(alpha * batch_size + 0.5))


def _offline_rows(dataset: OfflineDataset, rows: np.ndarray) -> Batch:
    return Batch(
        states=dataset.states[rows].astype(np.float64),
        actions=dataset.actions[rows].astype(np.float64),
        rewards=dataset.target_rewards[rows].astype(np.float64),
        next_states=dataset.next_states[rows].astype(np.float64),
        dones=dataset.dones[rows].copy(),
        source_flags=np.ones(len(rows), dtype=bool),
        uncertainties=dataset.uncertainties[rows].astype(np.float64),
    )


def concat_batches(first: Batch, second: Batch) -> Batch:
    return Batch(
        *(
            np.concatenate([getattr(first, name), getattr(second, name)])
            for name in ("states", "actions", "rewards", "next_states", "dones", "source_flags", "uncertainties")
        )
    )


def sample_mixed(
    offline: Optional[OfflineDataset], online: ReplayBuffer, alpha: float, batch_size: int, rng: SeedLike
) -> Batch:
    """
    Draw round(alpha * B) offline and B - round(alpha * B) online samples.

    Both pools are sampled uniformly with replacement. When one pool is empty every
    sample comes from the other one, whatever alpha says.

    Args:
        offline (Optional[OfflineDataset]): Relabeled source dataset.
        online (ReplayBuffer): Target-task replay buffer.
        alpha (float): Offline fraction in [0, 1].
        batch_size (int): B >= 1.
        rng (SeedLike): Seed or generator.

    Returns:
        Batch: Offline rows first, then online rows.
    """
    if batch_size < 1:
        raise ContractViolation("batch size must be positive")
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"mixing ratio {alpha} outside [0, 1]")
    generator = as_generator(rng)
    offline_size: int = 0 if offline is None else len(offline)
    if offline_size == 0 and len(online) == 0:
        raise PreconditionError("both the offline dataset and the online buffer are empty")
    if len(online) == 0:
        n_offline = batch_size
    elif offline_size == 0:
        n_offline = 0
    else:
        n_offline = offline_count(alpha, batch_size)
    offline_part = _offline_rows(offline, generator.integers(0, offline_size, size=n_offline)) if n_offline else None
    online_part = online.sample(batch_size - n_offline, generator) if n_offline < batch_size else None
    if offline_part is None:
        return online_part  # type: ignore[return-value]
    if online_part is None:
        return offline_part
    return concat_batches(offline_part, online_part)


@dataclass(frozen=True)
class ControllerConfig:
    """Settings of the alpha controller."""

    beta_ema: float = 0.05
    gain: Optional[float] = None
    auto_alpha: float = 0.8
    alpha_min: float = 0.1
    alpha_max: float = 0.9
    fixed_alpha: Optional[float] = None
    bootstrap_steps: int = 1000
    measure_every: int = 50
    td_batch: int = 256

    def __post_init__(self) -> None:
        if not 0.0 < self.beta_ema <= 1.0:
            raise ContractViolation("EMA rate must lie in (0, 1]")
        if not 0.0 <= self.alpha_min < self.alpha_max <= 1.0:
            raise ContractViolation("alpha bounds must satisfy 0 <= min < max <= 1")
        if self.gain is not None and not self.gain > 0.0:
            raise ContractViolation("controller gain must be positive")
        if self.fixed_alpha is not None and not 0.0 <= self.fixed_alpha <= 1.0:
            raise ContractViolation("fixed alpha must lie in [0, 1]")
        if self.measure_every < 1 or self.td_batch < 1:
            raise ContractViolation("measurement cadence and batch must be positive")


@dataclass(frozen=True)
class ControllerTrace:
    """One controller observation."""

    k: int
    delta: float
    delta_bar: float
    alpha: float


class MixController:
    """
    Sets the offline fraction from an exponentially smoothed online TD error.

    alpha_k = clip(gain * delta_bar_k, alpha_min, alpha_max). With no configured gain,
    the first positive smoothed error calibrates it so that this error maps to
    `auto_alpha`.
    """

    def __init__(self, config: Optional[ControllerConfig] = None) -> None:
        self.config: ControllerConfig = config or ControllerConfig()
        self.delta_bar: Optional[float] = None
        self.gain: Optional[float] = self.config.gain
        self.alpha: float = (
            self.config.fixed_alpha if self.config.fixed_alpha is not None else self.config.alpha_max
        )
        self.k: int = 0
        self.trace: List[ControllerTrace] = []

    @property
    def pre_clip(self) -> float:
        """gain * delta_bar before clipping."""
        if self.delta_bar is None or self.gain is None:
            return self.config.alpha_max
        return self.gain * self.delta_bar

    def update_alpha(self, delta: float) -> float:
        """
        Fold one TD-error observation into the EMA and recompute alpha.

        Args:
            delta (float): Measured online TD error, finite and >= 0.

        Returns:
            float: The new alpha (unchanged if the observation was rejected).
        """
        if not math.isfinite(delta) or delta < 0.0:
            logger.warning("Rejected TD-error observation %r; controller unchanged", delta)
            return self.alpha
        if self.delta_bar is None:
            self.delta_bar = float(delta)
        else:
            beta = self.config.beta_ema
            self.delta_bar = (1.0 - beta) * self.delta_bar + beta * float(delta)
        if self.gain is None and self.delta_bar > 0.0:
            self.gain = self.config.auto_alpha / self.delta_bar
            logger.debug("Controller gain calibrated to %.4g", self.gain)
        self.k += 1
        if self.config.fixed_alpha is not None:
            self.alpha = self.config.fixed_alpha
        else:
            self.alpha = float(np.clip(self.pre_clip, self.config.alpha_min, self.config.alpha_max))
        self.trace.append(ControllerTrace(self.k, float(delta), self.delta_bar, self.alpha))
        return self.alpha

    def current_alpha(self, env_steps: int) -> float:
        """Alpha to sample with after `env_steps` target steps (alpha_max while bootstrapping)."""
        if self.config.fixed_alpha is not None:
            return self.config.fixed_alpha
        if env_steps < self.config.bootstrap_steps:
            return self.config.alpha_max
        return self.alpha

    def should_measure(self, gradient_steps: int) -> bool:
        return gradient_steps > 0 and gradient_steps % self.config.measure_every == 0

    def last(self) -> Tuple[float, float]:
        """Most recent (delta, delta_bar), NaN before the first observation."""
        if not self.trace:
            return math.nan, math.nan
        return self.trace[-1].delta, self.trace[-1].delta_bar
