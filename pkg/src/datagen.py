"""
This module builds the offline source dataset.

Candidate episodes come from uncertainty-penalized MPC in the source task. Each one is
kept only if its mean uncertainty is at most u_th and its source return is at least
J_th; kept episodes are relabeled with the target reward and persisted as a versioned
CSV file.
"""

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from envs import StepCounter, TaskPair
from errors import ContractViolation, DatasetParseError, UnsupportedVersionError
from planner import EnsemblePredictor, PlannerConfig, Trajectory, mpc_rollout
from utils import spawn_seeds

logger: logging.Logger = logging.getLogger("Wombet")

DATASET_MAGIC: str = "WOMBET-DS"
DATASET_VERSION: int = 1
CRITERIA: Tuple[str, ...] = ("dual", "reward-only", "uncertainty-only", "none")


@dataclass(frozen=True)
class FilterConfig:
    """
    Thresholds of the dual-criterion filter.

    In quantile mode the thresholds are placeholders until `resolve` replaces them with
    quantiles of the candidate pool.
    """

    u_threshold: float = math.inf
    j_threshold: float = -math.inf
    quantile_mode: bool = True
    u_quantile: float = 0.6
    j_quantile: float = 0.5
    criterion: str = "dual"

    def __post_init__(self) -> None:
        if self.criterion not in CRITERIA:
            raise ContractViolation(f"unknown filter criterion '{self.criterion}'")
        if not (0.0 <= self.u_quantile <= 1.0 and 0.0 <= self.j_quantile <= 1.0):
            raise ContractViolation("filter quantiles must lie in [0, 1]")
        if math.isnan(self.u_threshold) or self.u_threshold < 0.0 or math.isnan(self.j_threshold):
            raise ContractViolation("uncertainty threshold must be >= 0 and thresholds not NaN")

    def resolve(self, pool: Sequence[Trajectory]) -> "FilterConfig":
        """
        Fix concrete thresholds.

        Args:
            pool (Sequence[Trajectory]): Candidate trajectories; empty ones are ignored.

        Returns:
            FilterConfig: A config with `quantile_mode` off.
        """
        if not self.quantile_mode:
            return self
        usable = [t for t in pool if len(t)]
        if not usable:
            return replace(self, quantile_mode=False)
        u_values = np.array([t.mean_uncertainty for t in usable])
        j_values = np.array([t.source_return for t in usable])
        return replace(
            self,
            u_threshold=float(np.quantile(u_values, self.u_quantile)),
            j_threshold=float(np.quantile(j_values, self.j_quantile)),
            quantile_mode=False,
        )


@dataclass(frozen=True)
class FilterDecision:
    """An acceptance decision and why it was made."""

    accepted: bool
    reason: str

    def __bool__(self) -> bool:
        return self.accepted


def filter_trajectory(trajectory: Trajectory, cfg: FilterConfig) -> FilterDecision:
    """
    Accept iff mean uncertainty <= u_th and source return >= J_th.

    Args:
        trajectory (Trajectory): Candidate with cached statistics.
        cfg (FilterConfig): Resolved thresholds.

    Returns:
        FilterDecision: Reason is "accepted", "empty", "uncertainty" or "return".
    """
    if cfg.quantile_mode:
        raise ContractViolation("quantile thresholds must be resolved against a pool first")
    if len(trajectory) == 0:
        return FilterDecision(False, "empty")
    if cfg.criterion in ("dual", "uncertainty-only") and not trajectory.mean_uncertainty <= cfg.u_threshold:
        return FilterDecision(False, "uncertainty")
    if cfg.criterion in ("dual", "reward-only") and not trajectory.source_return >= cfg.j_threshold:
        return FilterDecision(False, "return")
    return FilterDecision(True, "accepted")


def filter_pool(pool: Sequence[Trajectory], cfg: FilterConfig) -> Tuple[FilterConfig, List[FilterDecision]]:
    """Resolve thresholds on `pool` and decide every candidate."""
    resolved = cfg.resolve(pool)
    return resolved, [filter_trajectory(t, resolved) for t in pool]


def relabel(trajectory: Trajectory, pair: TaskPair, task: str = "target") -> Trajectory:
    """
    Replace the reward column by the `task` reward; everything else is untouched.

    Args:
        trajectory (Trajectory): Trajectory to relabel.
        pair (TaskPair): Pair providing the reward function.
        task (str, optional): Reward to apply. Defaults to "target".

    Returns:
        Trajectory: A relabeled copy.
    """
    if len(trajectory) == 0:
        return replace(trajectory)
    if not (np.all(np.isfinite(trajectory.states)) and np.all(np.isfinite(trajectory.actions))):
        raise ContractViolation("cannot relabel a trajectory with non-finite states or actions")
    rewards = np.asarray(pair.reward(trajectory.states, trajectory.actions, task), dtype=np.float64)
    return replace(trajectory, rewards=rewards)


def round_rewards(values: np.ndarray) -> np.ndarray:
    """Round rewards to their 9-significant-digit decimal form, the form datasets store."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    return np.array([float(_fmt(v)) for v in flat], dtype=np.float64).reshape(np.shape(values))


def quantize(trajectory: Trajectory) -> Trajectory:
    """Round every column to the precision datasets are stored at: float32, decimal rewards."""

    def through32(values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float32).astype(np.float64)

    return replace(
        trajectory,
        states=through32(trajectory.states),
        actions=through32(trajectory.actions),
        rewards=round_rewards(trajectory.rewards),
        source_rewards=round_rewards(trajectory.source_rewards),
        next_states=through32(trajectory.next_states),
        uncertainties=through32(trajectory.uncertainties),
    )


@dataclass
class OfflineDataset:
    """
    Accepted, relabeled source transitions.

    States, actions and uncertainties are float32; both reward columns are float64 rounded
    to 9 significant digits, so relabeled rewards survive a save and load exactly.

    Every row came from the source task, so the source flag is implicitly true.
    """

    state_dim: int
    action_dim: int
    episodes: np.ndarray
    steps: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    source_rewards: np.ndarray
    target_rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    uncertainties: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(len(self.steps))

    @property
    def source_flags(self) -> np.ndarray:
        return np.ones(len(self), dtype=bool)

    @classmethod
    def empty(cls, state_dim: int, action_dim: int, metadata: Optional[Dict[str, Any]] = None) -> "OfflineDataset":
        return cls.from_trajectories([], state_dim, action_dim, metadata)

    @classmethod
    def from_trajectories(
        cls,
        trajectories: Sequence[Trajectory],
        state_dim: int,
        action_dim: int,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> "OfflineDataset":
        """
        Stack relabeled trajectories into columns.

        Args:
            trajectories (Sequence[Trajectory]): Relabeled trajectories, in episode order.
            state_dim (int): State width.
            action_dim (int): Action width.
            metadata (Optional[Dict[str, Any]], optional): Provenance metadata.

        Returns:
            OfflineDataset: The dataset.
        """
        kept = [t for t in trajectories if len(t)]

        def stack(name: str, width: int) -> np.ndarray:
            if not kept:
                return np.zeros((0, width), dtype=np.float32)
            return np.concatenate([getattr(t, name) for t in kept]).astype(np.float32).reshape(-1, width)

        def flat(name: str, dtype: Any) -> np.ndarray:
            if not kept:
                return np.zeros(0, dtype=dtype)
            return np.concatenate([getattr(t, name) for t in kept]).astype(dtype)

        dataset = cls(
            state_dim=state_dim,
            action_dim=action_dim,
            episodes=np.concatenate([np.full(len(t), t.episode) for t in kept]).astype(np.int64)
            if kept
            else np.zeros(0, dtype=np.int64),
            steps=np.concatenate([np.arange(len(t)) for t in kept]).astype(np.int64)
            if kept
            else np.zeros(0, dtype=np.int64),
            states=stack("states", state_dim),
            actions=stack("actions", action_dim),
            source_rewards=round_rewards(flat("source_rewards", np.float64)),
            target_rewards=round_rewards(flat("rewards", np.float64)),
            next_states=stack("next_states", state_dim),
            dones=flat("dones", bool),
            uncertainties=flat("uncertainties", np.float32),
            metadata=dict(metadata or {}),
        )
        dataset.metadata.update({"state_dim": state_dim, "action_dim": action_dim, "n_rows": len(dataset)})
        return dataset

    def extend(self, other: "OfflineDataset") -> "OfflineDataset":
        """Concatenate another dataset's rows; metadata of `other` is kept under `refreshes`."""
        if (other.state_dim, other.action_dim) != (self.state_dim, self.action_dim):
            raise ContractViolation("cannot merge datasets of different dimensions")
        metadata = dict(self.metadata)
        metadata["refreshes"] = list(metadata.get("refreshes", [])) + [other.metadata.get("acceptance", {})]
        merged = OfflineDataset(
            self.state_dim,
            self.action_dim,
            *(
                np.concatenate([getattr(self, name), getattr(other, name)])
                for name in (
                    "episodes",
                    "steps",
                    "states",
                    "actions",
                    "source_rewards",
                    "target_rewards",
                    "next_states",
                    "dones",
                    "uncertainties",
                )
            ),
            metadata=metadata,
        )
        merged.metadata["n_rows"] = len(merged)
        return merged

    def trajectories(self, gamma: Optional[float] = None) -> List[Trajectory]:
        """Regroup rows into per-episode trajectories (reward column = target rewards)."""
        discount: float = self.metadata.get("gamma", 1.0) if gamma is None else gamma
        result: List[Trajectory] = []
        for episode in np.unique(self.episodes):
            rows = np.flatnonzero(self.episodes == episode)
            rows = rows[np.argsort(self.steps[rows], kind="stable")]
            result.append(
                Trajectory(
                    states=self.states[rows].astype(np.float64),
                    actions=self.actions[rows].astype(np.float64),
                    rewards=self.target_rewards[rows].astype(np.float64),
                    source_rewards=self.source_rewards[rows].astype(np.float64),
                    next_states=self.next_states[rows].astype(np.float64),
                    dones=self.dones[rows].copy(),
                    uncertainties=self.uncertainties[rows].astype(np.float64),
                    episode=int(episode),
                    gamma=discount,
                )
            )
        return result


def model_fingerprint(model: Any) -> str:
    """A short content hash of a model's member parameters, for provenance."""
    digest = hashlib.sha1()
    for member in getattr(model, "members", []):
        for param in member.parameters():
            digest.update(np.ascontiguousarray(param, dtype=np.float64).tobytes())
    return digest.hexdigest()[:16]


def acceptance_stats(pool: Sequence[Trajectory], decisions: Sequence[FilterDecision]) -> Dict[str, Any]:
    """Counts and mean statistics of one filtering pass."""
    accepted = [t for t, d in zip(pool, decisions) if d.accepted]
    by_u = [t for t, d in zip(pool, decisions) if d.reason == "uncertainty"]
    reasons = [d.reason for d in decisions]
    return {
        "n_candidates": len(pool),
        "n_accepted": len(accepted),
        "acceptance_rate": len(accepted) / len(pool) if pool else 0.0,
        "rejected_uncertainty": reasons.count("uncertainty"),
        "rejected_return": reasons.count("return"),
        "rejected_empty": reasons.count("empty"),
        "mean_u_accepted": float(np.mean([t.mean_uncertainty for t in accepted])) if accepted else None,
        "mean_u_rejected_uncertainty": float(np.mean([t.mean_uncertainty for t in by_u])) if by_u else None,
        "mean_j_accepted": float(np.mean([t.source_return for t in accepted])) if accepted else None,
    }


def generate_offline_dataset(
    pair: TaskPair,
    model: EnsemblePredictor,
    planner_cfg: PlannerConfig,
    filter_cfg: FilterConfig,
    n_episodes: int,
    seed: int,
    mode: str = "real-mpc",
    episode_len: Optional[int] = None,
    counter: Optional[StepCounter] = None,
    episode_offset: int = 0,
) -> OfflineDataset:
    """
    Plan candidate source episodes, filter them, relabel the accepted ones.

    Args:
        pair (TaskPair): Source/target pair.
        model (EnsemblePredictor): Fitted dynamics ensemble.
        planner_cfg (PlannerConfig): Planner settings.
        filter_cfg (FilterConfig): Filter thresholds or quantiles.
        n_episodes (int): Number of candidate episodes.
        seed (int): Root seed; episode i uses the i-th spawned seed.
        mode (str, optional): "real-mpc" or "synthetic". Defaults to "real-mpc".
        episode_len (Optional[int], optional): Steps per episode; defaults to the task horizon.
        counter (Optional[StepCounter], optional): Real-interaction tally.
        episode_offset (int, optional): First episode index, for appending refreshes.

    Returns:
        OfflineDataset: Accepted transitions; empty (with a warning) if nothing passed.
    """
    spec = pair.spec
    length: int = spec.horizon if episode_len is None else episode_len
    steps_before: int = counter.counts["source"] if counter is not None else 0
    pool: List[Trajectory] = []
    for index, episode_seed in enumerate(spawn_seeds(seed, n_episodes)):
        trajectory = mpc_rollout(
            pair,
            model,
            planner_cfg,
            length,
            episode_seed,
            mode=mode,
            task="source",
            counter=counter,
            episode=episode_offset + index,
        )
        pool.append(quantize(trajectory))
        logger.debug(
            "Candidate %d: %d steps, J=%.3f, mean u=%.4f",
            episode_offset + index,
            len(trajectory),
            trajectory.source_return,
            trajectory.mean_uncertainty,
        )
    resolved, decisions = filter_pool(pool, filter_cfg)
    accepted = [relabel(t, pair) for t, d in zip(pool, decisions) if d.accepted]
    stats = acceptance_stats(pool, decisions)
    metadata: Dict[str, Any] = {
        "task_pair": spec.name,
        "model_id": model_fingerprint(model),
        "planner": asdict(planner_cfg),
        "filter": asdict(resolved),
        "acceptance": stats,
        "mode": mode,
        "return_rewards": "model" if mode == "synthetic" else "real",
        "gamma": pair.gamma,
        "seed": seed,
        "source_env_steps": (counter.counts["source"] - steps_before) if counter is not None else 0,
    }
    if not accepted:
        logger.warning(
            "No candidate passed the filter (%d candidates, u_th=%.4g, J_th=%.4g)",
            len(pool),
            resolved.u_threshold,
            resolved.j_threshold,
        )
    else:
        logger.info(
            "Offline dataset: accepted %d of %d episodes (%.0f%%)",
            stats["n_accepted"],
            stats["n_candidates"],
            100.0 * stats["acceptance_rate"],
        )
    return OfflineDataset.from_trajectories(accepted, spec.state_dim, spec.action_dim, metadata)


def _columns(state_dim: int, action_dim: int) -> List[str]:
    return (
        ["episode", "step"]
        + [f"s{i}" for i in range(state_dim)]
        + [f"a{i}" for i in range(action_dim)]
        + ["r_source", "r_target"]
        + [f"s_next{i}" for i in range(state_dim)]
        + ["done", "u"]
    )


def _fmt(value: Any) -> str:
    return "%.9g" % float(value)


def save_dataset(dataset: OfflineDataset, path: str) -> None:
    """
    Write the dataset: version line, one-line JSON metadata, CSV header and rows.

    Args:
        dataset (OfflineDataset): Dataset to persist.
        path (str): Destination file.
    """
    metadata = dict(dataset.metadata)
    metadata.update(
        {"state_dim": dataset.state_dim, "action_dim": dataset.action_dim, "n_rows": len(dataset)}
    )
    try:
        with open(path, "w", encoding="utf-8", newline="") as file:
            file.write(f"{DATASET_MAGIC} v{DATASET_VERSION}\n")
            file.write(json.dumps(metadata, sort_keys=True) + "\n")
            writer = csv.writer(file, lineterminator="\n")
            writer.writerow(_columns(dataset.state_dim, dataset.action_dim))
            for i in range(len(dataset)):
                fields = [str(int(dataset.episodes[i])), str(int(dataset.steps[i]))]
                fields += [_fmt(v) for v in dataset.states[i]]
                fields += [_fmt(v) for v in dataset.actions[i]]
                fields += [_fmt(dataset.source_rewards[i]), _fmt(dataset.target_rewards[i])]
                fields += [_fmt(v) for v in dataset.next_states[i]]
                fields += ["1" if dataset.dones[i] else "0", _fmt(dataset.uncertainties[i])]
                writer.writerow(fields)
        logger.info("Saved %d offline transitions to %s", len(dataset), path)
    except (OSError, IOError) as e:
        logger.critical("Failed to write dataset %s: %s", path, e)
        raise


def load_dataset(path: str) -> OfflineDataset:
    """
    Read a dataset written by `save_dataset`.

    Args:
        path (str): Dataset file.

    Returns:
        OfflineDataset: The dataset, bit-identical to what was saved.
    """
    with open(path, "rb") as file:
        blob: bytes = file.read()
    lines: List[Tuple[int, str]] = []
    offset: int = 0
    while offset < len(blob):
        end = blob.find(b"\n", offset)
        if end < 0:
            raise DatasetParseError("unterminated line (file truncated?)", offset)
        try:
            lines.append((offset, blob[offset:end].decode("utf-8")))
        except UnicodeDecodeError as e:
            raise DatasetParseError("invalid UTF-8", offset) from e
        offset = end + 1
    if not lines:
        raise DatasetParseError("empty dataset file", 0)

    magic, _, version = lines[0][1].partition(" ")
    if magic != DATASET_MAGIC or not version.startswith("v"):
        raise DatasetParseError("missing WOMBET-DS version line", 0)
    if version != f"v{DATASET_VERSION}":
        raise UnsupportedVersionError(f"dataset version {version} is not supported (expected v{DATASET_VERSION})")
    if len(lines) < 3:
        raise DatasetParseError("missing metadata or column header", len(blob))
    try:
        metadata: Dict[str, Any] = json.loads(lines[1][1])
        state_dim, action_dim, n_rows = int(metadata["state_dim"]), int(metadata["action_dim"]), int(metadata["n_rows"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetParseError(f"malformed metadata ({e})", lines[1][0]) from e
    columns = _columns(state_dim, action_dim)
    if lines[2][1].split(",") != columns:
        raise DatasetParseError("column header does not match metadata dimensions", lines[2][0])
    body = lines[3:]
    if len(body) != n_rows:
        raise DatasetParseError(f"expected {n_rows} rows, found {len(body)}", len(blob))

    table = np.zeros((n_rows, len(columns)), dtype=np.float64)
    for row, (line_offset, text) in enumerate(body):
        fields = text.split(",")
        if len(fields) != len(columns):
            raise DatasetParseError(f"row {row} has {len(fields)} fields, expected {len(columns)}", line_offset)
        try:
            table[row] = [float(v) for v in fields]
        except ValueError as e:
            raise DatasetParseError(f"row {row}: {e}", line_offset) from e

    n, m = state_dim, action_dim
    a0, r0 = 2 + n, 2 + n + m
    s1 = r0 + 2
    return OfflineDataset(
        state_dim=n,
        action_dim=m,
        episodes=table[:, 0].astype(np.int64),
        steps=table[:, 1].astype(np.int64),
        states=table[:, 2:a0].astype(np.float32),
        actions=table[:, a0:r0].astype(np.float32),
        source_rewards=table[:, r0].copy(),
        target_rewards=table[:, r0 + 1].copy(),
        next_states=table[:, s1 : s1 + n].astype(np.float32),
        dones=table[:, s1 + n] != 0.0,
        uncertainties=table[:, s1 + n + 1].astype(np.float32),
        metadata=metadata,
    )
