"""
This module provides learning-curve figures from a directory of metrics files.
"""

import logging
import os
from collections import defaultdict
from typing import Any, Dict, List, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # pylint: disable=wrong-import-position
import numpy as np  # pylint: disable=wrong-import-position

from errors import PreconditionError  # pylint: disable=wrong-import-position
from harness.metrics import RunMetrics, find_metrics, read_metrics  # pylint: disable=wrong-import-position
from utils import ensure_directory  # pylint: disable=wrong-import-position

logger: logging.Logger = logging.getLogger("Wombet")


def aggregate(runs: List[RunMetrics]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean and standard deviation across seeds on the union of evaluation steps.

    A run contributes at a step its last evaluation at or before that step; runs whose
    first evaluation comes later are left out of that step.

    Args:
        runs (List[RunMetrics]): Runs of one (task, variant).

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: Steps, mean and std.
    """
    steps = np.array(sorted({row.env_steps for run in runs for row in run.rows}), dtype=float)
    means = np.full(len(steps), np.nan)
    stds = np.full(len(steps), np.nan)
    for i, step in enumerate(steps):
        values = [run.return_at(int(step)) for run in runs]
        values = [v for v in values if np.isfinite(v)]
        if values:
            means[i] = np.mean(values)
            stds[i] = np.std(values)
    return steps, means, stds


def emit_plots(metrics_dir: str, out_dir: Optional[str] = None) -> Dict[str, Any]:
    """
    Plot one SVG of evaluation return versus target steps per task, one curve per variant.

    Args:
        metrics_dir (str): Directory of metrics CSV files.
        out_dir (Optional[str], optional): Figure directory; defaults to `metrics_dir`.

    Returns:
        Dict[str, Any]: Per task, the figure path, x range and variants plotted.
    """
    paths = find_metrics(metrics_dir)
    if not paths:
        raise PreconditionError(f"no metrics files in {metrics_dir}")
    out_dir = out_dir or metrics_dir
    ensure_directory(out_dir)

    grouped: Dict[str, Dict[str, List[RunMetrics]]] = defaultdict(lambda: defaultdict(list))
    for path in paths:
        run = read_metrics(path)
        if run.rows:
            grouped[run.task][run.variant].append(run)

    summary: Dict[str, Any] = {}
    for task, variants in sorted(grouped.items()):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        low, high = np.inf, -np.inf
        for variant, runs in sorted(variants.items()):
            steps, mean, std = aggregate(runs)
            ax.plot(steps, mean, label=f"{variant} (n={len(runs)})", marker="o" if len(steps) == 1 else None)
            ax.fill_between(steps, mean - std, mean + std, alpha=0.2)
            low, high = min(low, steps[0]), max(high, steps[-1])
        if high > low:
            ax.set_xlim(low, high)
        ax.set_xlabel("target environment steps")
        ax.set_ylabel("evaluation return")
        ax.set_title(task)
        ax.legend(loc="best")
        ax.grid(True, alpha=0.3)
        path = os.path.join(out_dir, f"curves__{task}.svg")
        fig.savefig(path, format="svg", bbox_inches="tight")
        plt.close(fig)
        summary[task] = {"path": path, "x_range": (float(low), float(high)), "variants": sorted(variants)}
        logger.info("Wrote %s (%d variants)", path, len(variants))
    return summary
