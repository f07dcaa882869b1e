import dataclasses
import math
import os

import numpy as np
import pytest

import harness.runs
from errors import ContractViolation, DivergenceError, PreconditionError
from harness.metrics import MetricsRow, RunMetrics, find_metrics, read_metrics
from harness.plots import aggregate, emit_plots
from harness.runs import (
    ablation_config,
    evaluate_policy,
    generate_source_dataset,
    random_policy,
    run_ablation,
    run_offline_only,
    run_sac_baseline,
    run_wombet,
)


def _row(step: int, value: float) -> MetricsRow:
    return MetricsRow(env_steps=step, source_env_steps=0, total_env_steps=step, eval_return_mean=value, eval_return_std=0.0)


def test_full_pipeline_accounting(tiny_config):
    metrics = run_wombet(tiny_config, 0)
    assert [r.env_steps for r in metrics.rows] == [0, 30, 60]
    final = metrics.rows[-1]
    # 200 random seed steps, 3 dataset episodes and 2 refresh episodes of 20 steps each
    assert final.source_env_steps == 300
    assert final.total_env_steps == 360
    assert final.offline_rows > 0
    assert final.offline_samples > 0
    assert final.candidate_episodes == 2
    assert 0 <= final.accepted_episodes <= final.candidate_episodes
    assert len(metrics.trace) == 6
    assert all(math.isfinite(r.eval_return_mean) for r in metrics.rows)
    assert metrics.status == "complete"


def test_runs_are_byte_identical_for_a_seed(tiny_config, tmp_path):
    first = run_wombet(tiny_config, 1, out_dir=str(tmp_path / "a")).filename()
    second = run_wombet(tiny_config, 1, out_dir=str(tmp_path / "b")).filename()
    assert first == second == "metrics_v1__pendulum__wombet__seed1.csv"
    assert (tmp_path / "a" / first).read_bytes() == (tmp_path / "b" / first).read_bytes()
    assert os.listdir(tmp_path / "a") == [first]


def test_sac_baseline_never_uses_source_data(tiny_config):
    metrics = run_sac_baseline(tiny_config, 0)
    assert [r.env_steps for r in metrics.rows] == [0, 30, 60]
    assert all(r.offline_samples == 0 and r.source_env_steps == 0 for r in metrics.rows)
    assert all(r.alpha == 0.0 for r in metrics.rows)
    assert metrics.rows[-1].total_env_steps == 60


def test_warmup_steps_act_uniformly_at_random(tiny_config, monkeypatch):
    sampled = []
    real_act = harness.runs.act

    def counting_act(agent, state, rng=None, deterministic=False):
        if not deterministic:
            sampled.append(state)
        return real_act(agent, state, rng, deterministic=deterministic)

    monkeypatch.setattr(harness.runs, "act", counting_act)
    cfg = dataclasses.replace(tiny_config, agent=dataclasses.replace(tiny_config.agent, start_steps=40))
    run_sac_baseline(cfg, 0)
    assert len(sampled) == cfg.budget - 40


def test_offline_only_reports_a_single_zero_step_row(tiny_offline_config):
    metrics = run_offline_only(tiny_offline_config, 0)
    assert len(metrics.rows) == 1
    row = metrics.rows[0]
    assert row.env_steps == 0
    assert row.alpha == 1.0
    assert row.offline_samples == 10 * tiny_offline_config.agent.batch_size
    assert row.total_env_steps == row.source_env_steps


def test_no_filter_ablation_accepts_every_candidate(tiny_config, tmp_path):
    metrics = run_ablation(tiny_config, "no-filter", 0, out_dir=str(tmp_path))
    assert metrics.variant == "ablation-no-filter"
    assert metrics.rows[-1].acceptance_rate == 1.0
    assert find_metrics(str(tmp_path)) == [str(tmp_path / "metrics_v1__pendulum__ablation-no-filter__seed0.csv")]


def test_ablation_configs_change_one_component(tiny_config):
    fixed = ablation_config(tiny_config, "fixed-alpha")
    assert fixed.controller.fixed_alpha == 0.5
    assert fixed.filter == tiny_config.filter
    assert ablation_config(tiny_config, "reward-only").filter.criterion == "reward-only"
    assert ablation_config(tiny_config, "uncertainty-only").controller == tiny_config.controller
    with pytest.raises(ContractViolation):
        ablation_config(tiny_config, "no-model")


def test_source_dataset_generation(tiny_config):
    dataset, model, counter = generate_source_dataset(tiny_config, 0)
    assert model.fitted
    assert counter.counts == {"source": 260, "target": 0}
    assert dataset.metadata["acceptance"]["n_candidates"] == 3
    assert len(dataset) == 20 * dataset.metadata["acceptance"]["n_accepted"]


def test_divergence_writes_partial_metrics(tiny_config, tmp_path, monkeypatch):
    def explode(*_args, batch_id=None, **_kwargs):
        raise DivergenceError("critic loss became non-finite", batch_id)

    monkeypatch.setattr(harness.runs, "critic_update", explode)
    with pytest.raises(DivergenceError):
        run_sac_baseline(tiny_config, 0, out_dir=str(tmp_path))
    written = read_metrics(str(tmp_path / "metrics_v1__pendulum__sac__seed0.csv"))
    assert written.status == "diverged"
    assert [r.env_steps for r in written.rows] == [0]


def test_metrics_file_round_trip(tiny_config, tmp_path):
    metrics = run_sac_baseline(tiny_config, 2, out_dir=str(tmp_path))
    restored = read_metrics(find_metrics(str(tmp_path))[0])
    assert (restored.task, restored.variant, restored.seed) == ("pendulum", "sac", 2)
    assert restored.random_return == pytest.approx(metrics.random_return, rel=1e-9)
    assert [r.env_steps for r in restored.rows] == [r.env_steps for r in metrics.rows]
    np.testing.assert_allclose(
        [r.eval_return_mean for r in restored.rows], [r.eval_return_mean for r in metrics.rows], rtol=1e-9
    )
    norms = [r.eval_return_norm for r in restored.rows]
    assert all(n <= 1.0 + 1e-9 for n in norms)


def test_controller_trace_is_read_back_from_the_metrics_file(tiny_config, tmp_path):
    metrics = run_wombet(tiny_config, 0, out_dir=str(tmp_path))
    restored = read_metrics(str(tmp_path / metrics.filename()))
    assert [t.k for t in restored.trace] == [t.k for t in metrics.trace]
    np.testing.assert_allclose([t.alpha for t in restored.trace], [t.alpha for t in metrics.trace], rtol=1e-9)
    np.testing.assert_allclose([t.delta_bar for t in restored.trace], [t.delta_bar for t in metrics.trace], rtol=1e-9)
    assert len(restored.rows) == len(metrics.rows)


def test_metrics_steps_must_increase():
    metrics = RunMetrics("pendulum", "sac", 0)
    metrics.add_row(_row(10, 1.0))
    with pytest.raises(ContractViolation):
        metrics.add_row(_row(10, 2.0))
    assert math.isnan(metrics.return_at(5))
    assert metrics.return_at(99) == 1.0


def test_aggregate_carries_the_last_evaluation_forward():
    first = RunMetrics("pendulum", "wombet", 0, rows=[_row(0, 0.0), _row(10, 2.0)])
    second = RunMetrics("pendulum", "wombet", 1, rows=[_row(0, 2.0), _row(20, 4.0)])
    steps, mean, std = aggregate([first, second])
    np.testing.assert_array_equal(steps, [0.0, 10.0, 20.0])
    np.testing.assert_allclose(mean, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(std, [1.0, 0.0, 1.0])


def test_emit_plots_writes_one_figure_per_task(tmp_path):
    for seed in range(2):
        for variant in ("wombet", "sac"):
            rows = [_row(0, -5.0 + seed), _row(50, -2.0 + seed), _row(100, -1.0)]
            RunMetrics("point-mass", variant, seed, random_return=-6.0, rows=rows).write(str(tmp_path))
    summary = emit_plots(str(tmp_path), str(tmp_path / "figures"))
    assert list(summary) == ["point-mass"]
    entry = summary["point-mass"]
    assert os.path.exists(entry["path"]) and entry["path"].endswith("curves__point-mass.svg")
    assert entry["x_range"] == (0.0, 100.0)
    assert entry["variants"] == ["sac", "wombet"]


def test_emit_plots_needs_metrics(tmp_path):
    with pytest.raises(PreconditionError):
        emit_plots(str(tmp_path))


def test_evaluation_is_seeded(pendulum):
    mean, std = evaluate_policy(pendulum, random_policy(1, 0), 3, 0)
    assert math.isfinite(mean) and std >= 0.0
    assert evaluate_policy(pendulum, random_policy(1, 0), 3, 0) == (mean, std)


@pytest.mark.slow
def test_transfer_matches_scratch_with_half_the_target_steps(tiny_config):
    cfg = dataclasses.replace(
        tiny_config,
        budget=1500,
        eval_every=500,
        refine_every=1500,
        seed_transitions=2000,
        dataset_episodes=10,
        refresh_episodes=5,
        env=dataclasses.replace(tiny_config.env, horizon=100),
        agent=dataclasses.replace(tiny_config.agent, hidden=(64, 64), batch_size=64),
    )
    scratch_cfg = dataclasses.replace(cfg, budget=2 * cfg.budget)
    seeds = range(5)
    transfer = np.median([run_wombet(cfg, s).return_at(cfg.budget) for s in seeds])
    scratch = np.median([run_sac_baseline(scratch_cfg, s).return_at(scratch_cfg.budget) for s in seeds])
    assert transfer >= scratch


@pytest.mark.slow
def test_adaptive_mixing_and_dual_filter_are_not_worse_than_their_ablations(tiny_config):
    cfg = dataclasses.replace(
        tiny_config,
        budget=2000,
        eval_every=1000,
        refine_every=1000,
        seed_transitions=2000,
        dataset_episodes=10,
        refresh_episodes=5,
        env=dataclasses.replace(tiny_config.env, horizon=100),
        agent=dataclasses.replace(tiny_config.agent, hidden=(64, 64), batch_size=64),
    )
    seeds = range(5)
    full = np.median([run_wombet(cfg, s).final_return for s in seeds])
    for which in ("fixed-alpha", "reward-only", "uncertainty-only", "no-filter"):
        assert full >= np.median([run_ablation(cfg, which, s).final_return for s in seeds])
