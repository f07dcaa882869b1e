"""
This module provides the probabilistic ensemble dynamics model.

Each member maps (features(s), a) to the mean and log-variance of the normalized state
delta and is trained by Gaussian negative log-likelihood on its own bootstrap resample.
Member disagreement gives the epistemic uncertainty u(s, a) used by planning, filtering
and the critic penalty.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from errors import ContractViolation, PreconditionError
from nn_core import (
    AdamState,
    Gradients,
    Mlp,
    adam_step,
    backward,
    forward,
    init_mlp,
    load_parameters,
    save_parameters,
)
from utils import SeedLike, as_generator

logger: logging.Logger = logging.getLogger("Wombet")

UNCERTAINTY_MODES: Tuple[str, ...] = ("pairwise", "std")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the ensemble and its training."""

    ensemble_size: int = 5
    hidden: Tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    min_log_var: float = -10.0
    max_log_var: float = 1.0
    holdout_fraction: float = 0.1
    uncertainty: str = "pairwise"

    def __post_init__(self) -> None:
        if self.ensemble_size < 2:
            raise ContractViolation("an ensemble needs at least two members")
        if not self.min_log_var < self.max_log_var:
            raise ContractViolation("log-variance bounds are inverted")
        if self.uncertainty not in UNCERTAINTY_MODES:
            raise ContractViolation(f"unknown uncertainty mode '{self.uncertainty}'")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ContractViolation("holdout fraction must lie in (0, 1)")


@dataclass
class Normalizer:
    """Per-dimension affine standardization."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, data: np.ndarray) -> "Normalizer":
        std = data.std(axis=0)
        return cls(data.mean(axis=0), np.where(std < 1e-8, 1.0, std))

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


@dataclass
class ModelTrainReport:
    """Held-out quality of every member after a fit."""

    holdout_nll: np.ndarray
    holdout_mse: np.ndarray
    epochs: int = 0

    @property
    def mean_nll(self) -> float:
        return float(np.mean(self.holdout_nll))

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.holdout_mse))


def _sigmoid(values: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * values))


def soft_clamp(raw: np.ndarray, low: float, high: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Smoothly squeeze `raw` into (low, high).

    Returns:
        Tuple[np.ndarray, np.ndarray]: The clamped values and their derivative w.r.t. `raw`.
    """
    upper = high - np.logaddexp(0.0, high - raw)
    clamped = low + np.logaddexp(0.0, upper - low)
    return clamped, _sigmoid(high - raw) * _sigmoid(upper - low)


def gaussian_nll(
    member: Mlp, inputs: np.ndarray, targets: np.ndarray, low: float, high: float
) -> Tuple[float, Gradients]:
    """
    Gaussian negative log-likelihood of normalized targets and its parameter gradients.

    The loss is 0.5 * sum_d[(mu - y)^2 exp(-lv) + lv], averaged over the batch (the
    constant 0.5 * log(2 pi) is dropped).

    Args:
        member (Mlp): Network emitting [mean, raw log-variance].
        inputs (np.ndarray): Normalized inputs, (batch, in_dim).
        targets (np.ndarray): Normalized targets, (batch, out_dim).
        low (float): Lower log-variance bound.
        high (float): Upper log-variance bound.

    Returns:
        Tuple[float, Gradients]: Loss value and gradients.
    """
    out, tape = forward(member, inputs)
    dim: int = targets.shape[1]
    batch: int = targets.shape[0]
    log_var, dlog_var = soft_clamp(out[:, dim:], low, high)
    inv_var = np.exp(-log_var)
    error = out[:, :dim] - targets
    loss = 0.5 * float(np.sum(error**2 * inv_var + log_var)) / batch
    grad_mean = error * inv_var / batch
    grad_log_var = 0.5 * (1.0 - error**2 * inv_var) / batch
    grads = backward(member, tape, np.concatenate([grad_mean, grad_log_var * dlog_var], axis=1))
    return loss, grads


class EnsembleDynamicsModel:
    """
    An ensemble of probabilistic networks predicting next-state deltas.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        config: Optional[ModelConfig] = None,
        seed: int = 0,
        featurize: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        feature_dim: Optional[int] = None,
    ) -> None:
        """
        Initialize the ensemble.

        Args:
            state_dim (int): Dimension of raw states.
            action_dim (int): Dimension of actions.
            config (Optional[ModelConfig], optional): Hyperparameters. Defaults to ModelConfig().
            seed (int, optional): Seed of the member initializations. Defaults to 0.
            featurize (Optional[Callable], optional): Maps raw states to network features.
            feature_dim (Optional[int], optional): Width of the features; required with `featurize`.
        """
        self.config: ModelConfig = config or ModelConfig()
        self.state_dim: int = state_dim
        self.action_dim: int = action_dim
        self.featurize: Callable[[np.ndarray], np.ndarray] = featurize or (lambda s: s)
        self.feature_dim: int = feature_dim if featurize is not None and feature_dim else state_dim
        in_dim: int = self.feature_dim + action_dim
        rng = np.random.default_rng(seed)
        sizes = [in_dim, *self.config.hidden, 2 * state_dim]
        self.members: List[Mlp] = [init_mlp(sizes, rng) for _ in range(self.config.ensemble_size)]
        self.optimizers: List[AdamState] = [
            AdamState.for_mlp(member, lr=self.config.lr) for member in self.members
        ]
        self.input_norm: Normalizer = Normalizer.identity(in_dim)
        self.output_norm: Normalizer = Normalizer.identity(state_dim)
        self.fitted: bool = False

    @property
    def ensemble_size(self) -> int:
        return len(self.members)

    @property
    def uncertainty_mode(self) -> str:
        return self.config.uncertainty

    def _inputs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.concatenate([self.featurize(states), actions], axis=-1)

    def _check_finite(self, states: np.ndarray, actions: np.ndarray) -> None:
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise ContractViolation("non-finite state or action passed to the world model")

    def fit(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        next_states: np.ndarray,
        epochs: Optional[int] = None,
        seed: int = 0,
    ) -> ModelTrainReport:
        """
        Train every member on its own bootstrap resample of the dataset.

        Normalization statistics are recomputed from the full dataset, 10% (by default)
        is held out for the report, and members continue from their current weights.

        Args:
            states (np.ndarray): (N, state_dim) states.
            actions (np.ndarray): (N, action_dim) actions.
            next_states (np.ndarray): (N, state_dim) successor states.
            epochs (Optional[int], optional): Epoch count; defaults to the config's.
            seed (int, optional): Seed of the split, resamples and shuffles. Defaults to 0.

        Returns:
            ModelTrainReport: Held-out NLL and one-step MSE per member.
        """
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        next_states = np.asarray(next_states, dtype=np.float64)
        count: int = len(states)
        batch_size: int = self.config.batch_size
        if count == 0 or count < 2 * batch_size:
            raise PreconditionError(
                f"world model fit needs at least {2 * batch_size} transitions, got {count}"
            )
        self._check_finite(states, actions)
        epochs = self.config.epochs if epochs is None else epochs
        rng = np.random.default_rng(seed)

        inputs = self._inputs(states, actions)
        deltas = next_states - states
        self.input_norm = Normalizer.fit(inputs)
        self.output_norm = Normalizer.fit(deltas)
        norm_inputs = self.input_norm.normalize(inputs)
        norm_targets = self.output_norm.normalize(deltas)

        order = rng.permutation(count)
        held: int = max(1, int(round(self.config.holdout_fraction * count)))
        holdout, train = order[:held], order[held:]
        for member, optimizer in zip(self.members, self.optimizers):
            boot = train[rng.integers(0, len(train), size=len(train))]
            for _ in range(epochs):
                shuffled = boot[rng.permutation(len(boot))]
                for start in range(0, len(shuffled) - batch_size + 1, batch_size):
                    rows = shuffled[start : start + batch_size]
                    _, grads = gaussian_nll(
                        member,
                        norm_inputs[rows],
                        norm_targets[rows],
                        self.config.min_log_var,
                        self.config.max_log_var,
                    )
                    adam_step(member, grads, optimizer)
        self.fitted = True
        report = self.evaluate(states[holdout], actions[holdout], next_states[holdout])
        report.epochs = epochs
        logger.debug(
            "World model fit on %d transitions: held-out NLL %.4f, MSE %.3e",
            count,
            report.mean_nll,
            report.mean_mse,
        )
        return report

    def evaluate(self, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray) -> ModelTrainReport:
        """
        Per-member NLL (normalized space) and one-step MSE (raw space) on a dataset.

        Args:
            states (np.ndarray): (N, state_dim) states.
            actions (np.ndarray): (N, action_dim) actions.
            next_states (np.ndarray): (N, state_dim) successor states.

        Returns:
            ModelTrainReport: The scores, with `epochs` left at 0.
        """
        norm_inputs = self.input_norm.normalize(self._inputs(states, actions))
        norm_targets = self.output_norm.normalize(next_states - states)
        nll: List[float] = []
        for member in self.members:
            loss, _ = gaussian_nll(
                member, norm_inputs, norm_targets, self.config.min_log_var, self.config.max_log_var
            )
            nll.append(loss)
        means, _ = self.predict(states, actions)
        mse = np.mean((means - next_states[None]) ** 2, axis=(1, 2))
        return ModelTrainReport(np.asarray(nll), mse)

    def _member_outputs(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        norm_inputs = self.input_norm.normalize(self._inputs(states, actions))
        means, log_vars = [], []
        for member in self.members:
            out, _ = forward(member, norm_inputs)
            means.append(out[:, : self.state_dim])
            log_vars.append(soft_clamp(out[:, self.state_dim :], self.config.min_log_var, self.config.max_log_var)[0])
        return np.stack(means), np.stack(log_vars)

    def predict(self, states: np.ndarray, actions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Per-member Gaussian predictions of the next state.

        Args:
            states (np.ndarray): One state or a (B, state_dim) batch.
            actions (np.ndarray): One action or a (B, action_dim) batch.

        Returns:
            Tuple[np.ndarray, np.ndarray]: Means s + delta and variances, each (E, B, state_dim),
                or (E, state_dim) for single-row inputs.
        """
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        self._check_finite(states, actions)
        single: bool = states.ndim == 1
        s2, a2 = np.atleast_2d(states), np.atleast_2d(actions)
        norm_means, log_vars = self._member_outputs(s2, a2)
        means = s2[None] + self.output_norm.denormalize(norm_means)
        variances = np.exp(log_vars) * self.output_norm.std**2
        if single:
            return means[:, 0], variances[:, 0]
        return means, variances

    def member_means(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Member next-state means, (E, B, state_dim)."""
        return self.predict(np.atleast_2d(states), np.atleast_2d(actions))[0]

    def uncertainty(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """
        Epistemic uncertainty u(s, a) >= 0.

        In "pairwise" mode this is the largest Euclidean distance between two member
        means; in "std" mode the largest member standard-deviation norm.

        Args:
            states (np.ndarray): One state or a batch.
            actions (np.ndarray): One action or a batch.

        Returns:
            np.ndarray: Scalar for single rows, (B,) for batches.
        """
        single: bool = np.ndim(states) == 1
        means, variances = self.predict(np.atleast_2d(states), np.atleast_2d(actions))
        value = ensemble_uncertainty(means, variances, self.uncertainty_mode)
        return value[0] if single else value

    def synthetic_step(self, states: np.ndarray, actions: np.ndarray, seed: SeedLike) -> np.ndarray:
        """
        Sample a next state: pick a member uniformly, then draw from its Gaussian.

        Args:
            states (np.ndarray): One state or a batch.
            actions (np.ndarray): One action or a batch.
            seed (SeedLike): Integer seed or generator.

        Returns:
            np.ndarray: Sampled next state(s), same rank as `states`.
        """
        rng = as_generator(seed)
        single: bool = np.ndim(states) == 1
        means, variances = self.predict(np.atleast_2d(states), np.atleast_2d(actions))
        rows = np.arange(means.shape[1])
        picks = rng.integers(0, self.ensemble_size, size=len(rows))
        noise = rng.standard_normal(means.shape[1:])
        sample = means[picks, rows] + np.sqrt(variances[picks, rows]) * noise
        return sample[0] if single else sample

    def save(self, path: str) -> None:
        """Write members and normalization statistics as a parameter checkpoint."""
        metadata = {
            "config": asdict(self.config),
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "input_mean": self.input_norm.mean.tolist(),
            "input_std": self.input_norm.std.tolist(),
            "output_mean": self.output_norm.mean.tolist(),
            "output_std": self.output_norm.std.tolist(),
        }
        save_parameters(path, {f"member{i}": m for i, m in enumerate(self.members)}, metadata)

    def load(self, path: str) -> None:
        """Restore members and normalization statistics from `save` output."""
        nets, metadata = load_parameters(path)
        dims = (metadata.get("state_dim"), metadata.get("action_dim"))
        if dims != (self.state_dim, self.action_dim):
            raise ContractViolation(
                f"checkpoint dimensions {dims} differ from this model's ({self.state_dim}, {self.action_dim})"
            )
        if any(net.in_dim != self.members[0].in_dim for net in nets.values()):
            raise ContractViolation("checkpoint input width differs from this model's features")
        if len(nets) != self.ensemble_size:
            raise ContractViolation("checkpoint ensemble size differs from this model")
        self.members = [nets[f"member{i}"] for i in range(self.ensemble_size)]
        self.optimizers = [AdamState.for_mlp(m, lr=self.config.lr) for m in self.members]
        self.input_norm = Normalizer(np.asarray(metadata["input_mean"]), np.asarray(metadata["input_std"]))
        self.output_norm = Normalizer(np.asarray(metadata["output_mean"]), np.asarray(metadata["output_std"]))
        self.fitted = True


def pairwise_disagreement(means: np.ndarray) -> np.ndarray:
    """
    Largest pairwise Euclidean distance between member means.

    Args:
        means (np.ndarray): (E, B, dim) member predictions.

    Returns:
        np.ndarray: (B,) disagreement, exactly zero when all members agree.
    """
    gaps = means[:, None] - means[None, :]
    return np.max(np.sqrt(np.sum(gaps**2, axis=-1)), axis=(0, 1))


def ensemble_uncertainty(means: np.ndarray, variances: np.ndarray, mode: str = "pairwise") -> np.ndarray:
    """
    Uncertainty of a batch of member predictions.

    Args:
        means (np.ndarray): (E, B, dim) member means.
        variances (np.ndarray): (E, B, dim) member variances.
        mode (str, optional): "pairwise" or "std". Defaults to "pairwise".

    Returns:
        np.ndarray: (B,) non-negative uncertainties.
    """
    if mode == "std":
        return np.max(np.sqrt(np.sum(variances, axis=-1)), axis=0)
    return pairwise_disagreement(means)
