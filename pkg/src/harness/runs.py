"""
This module provides the experiment runners: the full transfer pipeline, the
from-scratch SAC baseline, single-component ablations and an offline-only variant.

Every runner is a deterministic function of (config, seed). Real environment steps in
either task are charged to one `StepCounter`; evaluation episodes are not.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from agent import AgentState, act, actor_update, critic_update, make_agent, polyak_update, td_error
from config_utils import ExperimentConfig, config_diff
from datagen import OfflineDataset, generate_offline_dataset
from envs import Env, StepCounter, TaskPair
from errors import ContractViolation, DivergenceError, EnvironmentFault, PreconditionError
from harness.metrics import MetricsRow, RunMetrics
from transfer import MixController, ReplayBuffer, Transition, sample_mixed
from utils import spawn_seeds
from world_model import EnsembleDynamicsModel, ModelTrainReport

logger: logging.Logger = logging.getLogger("Wombet")

ABLATIONS: Tuple[str, ...] = ("fixed-alpha", "reward-only", "uncertainty-only", "no-filter")

Policy = Callable[[np.ndarray], np.ndarray]


def evaluate_policy(pair: TaskPair, policy: Policy, episodes: int, seed: int, task: str = "target") -> Tuple[float, float]:
    """
    Undiscounted return of `policy` over full-horizon episodes (not charged to any budget).

    Args:
        pair (TaskPair): Task pair.
        policy (Policy): Raw state to action.
        episodes (int): Number of episodes.
        seed (int): Seed of the episode resets.
        task (str, optional): Task evaluated. Defaults to "target".

    Returns:
        Tuple[float, float]: Mean and standard deviation of the returns.
    """
    returns: List[float] = []
    for episode_seed in spawn_seeds(seed, episodes):
        env = Env(pair, task)
        state = env.reset(episode_seed)
        total = 0.0
        try:
            for _ in range(pair.spec.horizon):
                result = env.step(policy(state))
                total += result.reward
                state = result.next_state
        except EnvironmentFault as e:
            logger.warning("Evaluation episode aborted: %s", e)
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


def random_policy(action_dim: int, seed: int) -> Policy:
    """Uniform actions in [-1, 1]."""
    rng = np.random.default_rng(seed)
    return lambda _state: rng.uniform(-1.0, 1.0, size=action_dim)


def collect_random(
    pair: TaskPair, task: str, steps: int, seed: int, counter: StepCounter, buffer: ReplayBuffer
) -> None:
    """Roll a uniform random policy for `steps` real steps of `task` into `buffer`."""
    reset_seeds = iter(spawn_seeds(seed, steps // pair.spec.horizon + 2))
    policy = random_policy(pair.spec.action_dim, seed)
    env = Env(pair, task, counter)
    state = env.reset(next(reset_seeds))
    for _ in range(steps):
        action = policy(state)
        try:
            result = env.step(action)
        except EnvironmentFault as e:
            logger.warning("Random collection episode aborted: %s", e)
            state = env.reset(next(reset_seeds))
            continue
        buffer.push(Transition(state, action, result.reward, result.next_state, result.done, source_flag=task == "source"))
        state = env.reset(next(reset_seeds)) if result.done else result.next_state


def fit_model(model: EnsembleDynamicsModel, data: ReplayBuffer, seed: int) -> ModelTrainReport:
    """Fit the ensemble on everything in `data`."""
    contents = data.contents()
    return model.fit(contents.states, contents.actions, contents.next_states, seed=seed)


def add_dataset_to_model_data(dataset: OfflineDataset, data: ReplayBuffer, start: int = 0) -> None:
    """Feed real dataset transitions (rows from `start` on) to the model's training data."""
    for i in range(start, len(dataset)):
        data.push(
            Transition(
                dataset.states[i].astype(np.float64),
                dataset.actions[i].astype(np.float64),
                float(dataset.source_rewards[i]),
                dataset.next_states[i].astype(np.float64),
                bool(dataset.dones[i]),
                source_flag=True,
                uncertainty=float(dataset.uncertainties[i]),
            )
        )


@dataclass
class _Run:
    """Mutable state shared by the phases of one run."""

    cfg: ExperimentConfig
    pair: TaskPair
    seeds: Dict[str, int]
    counter: StepCounter
    metrics: RunMetrics
    model: Optional[EnsembleDynamicsModel] = None
    model_data: Optional[ReplayBuffer] = None
    dataset: Optional[OfflineDataset] = None
    episodes_generated: int = 0
    offline_samples: int = 0
    critic_loss: float = math.nan
    actor_loss: float = math.nan
    last_td: float = math.nan


_STREAMS: Tuple[str, ...] = ("collect", "model", "datagen", "agent", "act", "train", "td", "eval", "episodes", "refine")


def _start(cfg: ExperimentConfig, seed: int, variant: str) -> _Run:
    pair = cfg.task()
    seeds = dict(zip(_STREAMS, spawn_seeds(seed, len(_STREAMS))))
    metrics = RunMetrics(task=cfg.task_pair, variant=variant, seed=seed)
    metrics.random_return, _ = evaluate_policy(
        pair, random_policy(pair.spec.action_dim, seeds["eval"]), cfg.eval_episodes, seeds["eval"]
    )
    logger.info("Run %s/%s seed %d: random-policy target return %.3f", cfg.task_pair, variant, seed, metrics.random_return)
    return _Run(cfg, pair, seeds, StepCounter(), metrics)


def _source_phase(run: _Run) -> None:
    """Seed data, first model fit and the initial filtered offline dataset."""
    cfg, pair, spec = run.cfg, run.pair, run.pair.spec
    refreshes = cfg.budget // cfg.refine_every
    capacity = cfg.seed_transitions + cfg.budget + spec.horizon * (cfg.dataset_episodes + refreshes * cfg.refresh_episodes) + 1
    run.model_data = ReplayBuffer(capacity, spec.state_dim, spec.action_dim)
    collect_random(pair, "source", cfg.seed_transitions, run.seeds["collect"], run.counter, run.model_data)
    run.model = EnsembleDynamicsModel(
        spec.state_dim,
        spec.action_dim,
        cfg.model,
        seed=run.seeds["model"],
        featurize=pair.featurize,
        feature_dim=pair.feature_dim,
    )
    report = fit_model(run.model, run.model_data, run.seeds["model"])
    logger.info("Initial world model: held-out NLL %.4f, MSE %.3e", report.mean_nll, report.mean_mse)
    run.dataset = generate_offline_dataset(
        pair,
        run.model,
        cfg.planner,
        cfg.filter,
        cfg.dataset_episodes,
        run.seeds["datagen"],
        mode=cfg.datagen_mode,
        counter=run.counter,
    )
    run.episodes_generated = cfg.dataset_episodes
    if cfg.datagen_mode == "real-mpc":
        add_dataset_to_model_data(run.dataset, run.model_data)


def _refine(run: _Run, step: int) -> None:
    """Refit the model on all real data and append freshly generated filtered episodes."""
    assert run.model is not None and run.model_data is not None and run.dataset is not None
    report = fit_model(run.model, run.model_data, run.seeds["refine"] + step)
    logger.info("Refit world model at step %d: held-out NLL %.4f", step, report.mean_nll)
    if run.cfg.refresh_episodes <= 0:
        return
    fresh = generate_offline_dataset(
        run.pair,
        run.model,
        run.cfg.planner,
        run.cfg.filter,
        run.cfg.refresh_episodes,
        run.seeds["refine"] + step,
        mode=run.cfg.datagen_mode,
        counter=run.counter,
        episode_offset=run.episodes_generated,
    )
    run.episodes_generated += run.cfg.refresh_episodes
    if run.cfg.datagen_mode == "real-mpc":
        add_dataset_to_model_data(fresh, run.model_data)
    run.dataset = run.dataset.extend(fresh)
    run.dataset.metadata["acceptance"] = fresh.metadata["acceptance"]


def _gradient_step(run: _Run, agent: AgentState, online: ReplayBuffer, alpha: float, rng: np.random.Generator, step_id: int) -> None:
    batch = sample_mixed(run.dataset, online, alpha, run.cfg.agent.batch_size, rng)
    run.offline_samples += int(np.count_nonzero(batch.source_flags))
    losses = critic_update(agent, batch, rng, batch_id=step_id)
    run.critic_loss = float(np.mean(losses))
    run.actor_loss = actor_update(agent, batch, rng, batch_id=step_id)
    polyak_update(agent)


def _record(run: _Run, agent: AgentState, controller: MixController, env_steps: int, alpha: float) -> None:
    cfg = run.cfg
    mean, std = evaluate_policy(
        run.pair, lambda s: act(agent, s, deterministic=True), cfg.eval_episodes, run.seeds["eval"]
    )
    acceptance = (run.dataset.metadata.get("acceptance", {}) if run.dataset is not None else {})
    run.metrics.add_row(
        MetricsRow(
            env_steps=int(env_steps),
            source_env_steps=int(run.counter.counts["source"]),
            total_env_steps=int(run.counter.total),
            eval_return_mean=mean,
            eval_return_std=std,
            alpha=float(alpha),
            controller_k=int(controller.k),
            td_error=run.last_td,
            delta_bar=math.nan if controller.delta_bar is None else float(controller.delta_bar),
            critic_loss=run.critic_loss,
            actor_loss=run.actor_loss,
            offline_samples=int(run.offline_samples),
            offline_rows=len(run.dataset) if run.dataset is not None else 0,
            acceptance_rate=float(acceptance.get("acceptance_rate", math.nan)),
            accepted_episodes=int(acceptance.get("n_accepted", 0)),
            candidate_episodes=int(acceptance.get("n_candidates", 0)),
        )
    )
    logger.info("[%s seed %d] target step %d: eval return %.3f ± %.3f (alpha %.3f)",
                run.metrics.variant, run.metrics.seed, env_steps, mean, std, alpha)


def _pretrain(run: _Run, agent: AgentState, steps: int, rng: np.random.Generator) -> None:
    """Gradient steps on the offline dataset alone."""
    if steps <= 0:
        return
    if run.dataset is None or len(run.dataset) == 0:
        logger.warning("Skipping offline pretraining: the offline dataset is empty")
        return
    empty = ReplayBuffer(1, run.pair.spec.state_dim, run.pair.spec.action_dim)
    for i in range(steps):
        _gradient_step(run, agent, empty, 1.0, rng, -(i + 1))
    logger.info("Pretrained on %d offline rows for %d gradient steps", len(run.dataset), steps)


def _online_phase(run: _Run, agent: AgentState, controller: MixController, refine: bool) -> None:
    """Target-task interaction with one gradient step per environment step."""
    cfg, pair = run.cfg, run.pair
    online = ReplayBuffer(cfg.replay_capacity, pair.spec.state_dim, pair.spec.action_dim)
    env = Env(pair, "target", run.counter)
    act_rng = np.random.default_rng(run.seeds["act"])
    train_rng = np.random.default_rng(run.seeds["train"])
    td_rng = np.random.default_rng(run.seeds["td"])
    episode_seeds = np.random.default_rng(run.seeds["episodes"])
    warmup = random_policy(pair.spec.action_dim, run.seeds["act"])

    _record(run, agent, controller, 0, controller.current_alpha(0))
    state = env.reset(int(episode_seeds.integers(2**31)))
    for step in range(1, cfg.budget + 1):
        action = warmup(state) if step <= cfg.agent.start_steps else act(agent, state, act_rng)
        try:
            result = env.step(action)
            transition = Transition(state, action, result.reward, result.next_state, result.done)
            online.push(transition)
            if run.model_data is not None:
                run.model_data.push(transition)
            state = env.reset(int(episode_seeds.integers(2**31))) if result.done else result.next_state
        except EnvironmentFault as e:
            logger.warning("Target episode aborted at step %d: %s", step, e)
            state = env.reset(int(episode_seeds.integers(2**31)))

        alpha = controller.current_alpha(step)
        if len(online) or (run.dataset is not None and len(run.dataset)):
            _gradient_step(run, agent, online, alpha, train_rng, step)
        if controller.should_measure(step) and len(online):
            run.last_td = td_error(agent, online.sample(cfg.controller.td_batch, td_rng), td_rng)
            controller.update_alpha(run.last_td)
        if refine and step % cfg.refine_every == 0 and step < cfg.budget:
            _refine(run, step)
        if step % cfg.eval_every == 0 or step == cfg.budget:
            _record(run, agent, controller, step, controller.current_alpha(step))


def _finish(run: _Run, controller: MixController, out_dir: Optional[str]) -> RunMetrics:
    run.metrics.trace = list(controller.trace)
    if out_dir:
        run.metrics.write(out_dir)
    return run.metrics


def _guarded(run: _Run, controller: MixController, out_dir: Optional[str], body: Callable[[], None]) -> RunMetrics:
    try:
        body()
    except DivergenceError as e:
        logger.critical("Run %s seed %d diverged: %s", run.metrics.variant, run.metrics.seed, e)
        run.metrics.status = "diverged"
        _finish(run, controller, out_dir)
        raise
    return _finish(run, controller, out_dir)


def run_wombet(cfg: ExperimentConfig, seed: int, variant: str = "wombet", out_dir: Optional[str] = None) -> RunMetrics:
    """
    The full pipeline: seed data and model fit in the source task, filtered relabeled
    offline data, then adaptive offline/online fine-tuning in the target task with
    periodic model refits and dataset refreshes.

    Args:
        cfg (ExperimentConfig): Experiment config.
        seed (int): Run seed.
        variant (str, optional): Name written to the metrics. Defaults to "wombet".
        out_dir (Optional[str], optional): Where to write metrics; nothing is written if None.

    Returns:
        RunMetrics: Evaluation rows, partial if the run diverged.
    """
    run = _start(cfg, seed, variant)
    controller = MixController(cfg.controller)

    def body() -> None:
        _source_phase(run)
        agent = make_agent(run.pair.feature_dim, run.pair.spec.action_dim, cfg.agent, run.seeds["agent"], run.pair.featurize)
        _pretrain(run, agent, cfg.agent.pretrain_steps, np.random.default_rng(run.seeds["train"] + 1))
        _online_phase(run, agent, controller, refine=True)

    return _guarded(run, controller, out_dir, body)


def run_sac_baseline(cfg: ExperimentConfig, seed: int, out_dir: Optional[str] = None) -> RunMetrics:
    """
    SAC from scratch on the target task: same agent, alpha forced to 0, no offline data.

    Args:
        cfg (ExperimentConfig): Experiment config.
        seed (int): Run seed.
        out_dir (Optional[str], optional): Where to write metrics.

    Returns:
        RunMetrics: Evaluation rows.
    """
    run = _start(cfg, seed, "sac")
    controller = MixController(dataclasses.replace(cfg.controller, fixed_alpha=0.0))

    def body() -> None:
        agent = make_agent(run.pair.feature_dim, run.pair.spec.action_dim, cfg.agent, run.seeds["agent"], run.pair.featurize)
        _online_phase(run, agent, controller, refine=False)

    return _guarded(run, controller, out_dir, body)


def ablation_config(cfg: ExperimentConfig, which: str) -> ExperimentConfig:
    """The config of one ablation: exactly one component differs from `cfg`."""
    if which == "fixed-alpha":
        return dataclasses.replace(cfg, controller=dataclasses.replace(cfg.controller, fixed_alpha=0.5))
    criteria = {"reward-only": "reward-only", "uncertainty-only": "uncertainty-only", "no-filter": "none"}
    if which not in criteria:
        raise ContractViolation(f"unknown ablation '{which}' (choose from {', '.join(ABLATIONS)})")
    return dataclasses.replace(cfg, filter=dataclasses.replace(cfg.filter, criterion=criteria[which]))


def run_ablation(cfg: ExperimentConfig, which: str, seed: int, out_dir: Optional[str] = None) -> RunMetrics:
    """
    Run the pipeline with one component patched.

    Args:
        cfg (ExperimentConfig): The full-method config.
        which (str): "fixed-alpha", "reward-only", "uncertainty-only" or "no-filter".
        seed (int): Run seed.
        out_dir (Optional[str], optional): Where to write metrics.

    Returns:
        RunMetrics: Evaluation rows.
    """
    patched = ablation_config(cfg, which)
    logger.info("Ablation %s changes %s", which, config_diff(cfg, patched))
    return run_wombet(patched, seed, variant=f"ablation-{which}", out_dir=out_dir)


def run_offline_only(cfg: ExperimentConfig, seed: int, out_dir: Optional[str] = None) -> RunMetrics:
    """
    Zero-shot transfer: train on the filtered offline dataset alone, then evaluate.

    Gradient steps are `agent.pretrain_steps`, or the budget when that is 0. The run
    never interacts with the target task, so its single row sits at env_steps 0.

    Args:
        cfg (ExperimentConfig): Experiment config.
        seed (int): Run seed.
        out_dir (Optional[str], optional): Where to write metrics.

    Returns:
        RunMetrics: One evaluation row.
    """
    run = _start(cfg, seed, "offline")
    controller = MixController(dataclasses.replace(cfg.controller, fixed_alpha=1.0))

    def body() -> None:
        _source_phase(run)
        if run.dataset is None or len(run.dataset) == 0:
            raise PreconditionError("offline-only training needs a non-empty offline dataset")
        agent = make_agent(run.pair.feature_dim, run.pair.spec.action_dim, cfg.agent, run.seeds["agent"], run.pair.featurize)
        steps = cfg.agent.pretrain_steps or cfg.budget
        _pretrain(run, agent, steps, np.random.default_rng(run.seeds["train"]))
        _record(run, agent, controller, 0, 1.0)

    return _guarded(run, controller, out_dir, body)


def generate_source_dataset(cfg: ExperimentConfig, seed: int) -> Tuple[OfflineDataset, EnsembleDynamicsModel, StepCounter]:
    """Run only the source phase and return its dataset, model and step tally."""
    run = _start(cfg, seed, "gen-data")
    _source_phase(run)
    assert run.dataset is not None and run.model is not None
    return run.dataset, run.model, run.counter
