"""
This module provides the per-run metrics record and its versioned CSV files.
"""

import csv
import glob
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

from errors import ContractViolation, DatasetParseError
from transfer import ControllerTrace
from utils import ensure_directory

logger: logging.Logger = logging.getLogger("Wombet")

METRICS_VERSION: str = "metrics_v1"
TRACE_VERSION: str = "trace_v1"
TRACE_MARKER: str = f"# {TRACE_VERSION}"
TRACE_COLUMNS: List[str] = [f.name for f in fields(ControllerTrace)]


@dataclass
class MetricsRow:
    """One evaluation point of a run."""

    env_steps: int
    source_env_steps: int
    total_env_steps: int
    eval_return_mean: float
    eval_return_std: float
    eval_return_norm: float = math.nan
    alpha: float = math.nan
    controller_k: int = 0
    td_error: float = math.nan
    delta_bar: float = math.nan
    critic_loss: float = math.nan
    actor_loss: float = math.nan
    offline_samples: int = 0
    offline_rows: int = 0
    acceptance_rate: float = math.nan
    accepted_episodes: int = 0
    candidate_episodes: int = 0


COLUMNS: List[str] = [f.name for f in fields(MetricsRow)]
_INT_COLUMNS = {f.name for f in fields(MetricsRow) if f.type in (int, "int")}


def _fmt(value: float) -> str:
    if isinstance(value, int):
        return str(value)
    return "%.10g" % value


@dataclass
class RunMetrics:
    """Evaluation rows and controller trace of one (task, variant, seed) run."""

    task: str
    variant: str
    seed: int
    random_return: float = math.nan
    rows: List[MetricsRow] = field(default_factory=list)
    trace: List[ControllerTrace] = field(default_factory=list)
    status: str = "complete"

    def add_row(self, row: MetricsRow) -> None:
        """Append a row; env_steps must strictly increase."""
        if self.rows and row.env_steps <= self.rows[-1].env_steps:
            raise ContractViolation("metrics env_steps must be strictly increasing")
        self.rows.append(row)

    @property
    def final_return(self) -> float:
        return self.rows[-1].eval_return_mean if self.rows else math.nan

    def return_at(self, env_steps: int) -> float:
        """Mean eval return of the last row at or before `env_steps`."""
        eligible = [r for r in self.rows if r.env_steps <= env_steps]
        return eligible[-1].eval_return_mean if eligible else math.nan

    def normalize(self) -> None:
        """Fill eval_return_norm by min-max against (random policy, best observed in this run)."""
        if not self.rows:
            return
        best = max(r.eval_return_mean for r in self.rows)
        span = best - self.random_return
        for row in self.rows:
            row.eval_return_norm = (row.eval_return_mean - self.random_return) / span if span > 0 else 0.0

    def filename(self) -> str:
        return f"{METRICS_VERSION}__{self.task}__{self.variant}__seed{self.seed}.csv"

    def write(self, out_dir: str) -> str:
        """
        Write the metrics CSV: header line, evaluation rows, then the controller trace section.

        Args:
            out_dir (str): Output directory, created if needed.

        Returns:
            str: Path of the metrics file.
        """
        ensure_directory(out_dir)
        self.normalize()
        path = os.path.join(out_dir, self.filename())
        try:
            with open(path, "w", encoding="utf-8", newline="") as file:
                file.write(
                    f"# {METRICS_VERSION} task={self.task} variant={self.variant} seed={self.seed} "
                    f"status={self.status} random_return={_fmt(self.random_return)}\n"
                )
                writer = csv.writer(file, lineterminator="\n")
                writer.writerow(COLUMNS)
                for row in self.rows:
                    values = asdict(row)
                    writer.writerow([_fmt(values[c]) for c in COLUMNS])
                file.write(f"{TRACE_MARKER}\n")
                writer.writerow(TRACE_COLUMNS)
                writer.writerows([t.k, _fmt(t.delta), _fmt(t.delta_bar), _fmt(t.alpha)] for t in self.trace)
        except (OSError, IOError) as e:
            logger.critical("Failed to write metrics %s: %s", path, e)
            raise
        logger.info("Wrote %d metrics rows and %d trace entries to %s", len(self.rows), len(self.trace), path)
        return path


def _parse_trace(lines: List[str], offset: int) -> List[ControllerTrace]:
    if not lines or lines[0].split(",") != TRACE_COLUMNS:
        raise DatasetParseError("unexpected controller trace columns", offset)
    offset += len(lines[0]) + 1
    trace: List[ControllerTrace] = []
    for line, parts in zip(lines[1:], csv.reader(lines[1:])):
        if len(parts) != len(TRACE_COLUMNS):
            raise DatasetParseError("trace row has the wrong number of fields", offset)
        try:
            trace.append(ControllerTrace(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])))
        except ValueError as e:
            raise DatasetParseError(f"bad trace row ({e})", offset) from e
        offset += len(line) + 1
    return trace


def read_metrics(path: str) -> RunMetrics:
    """
    Parse a metrics CSV written by `RunMetrics.write`, controller trace included.

    Args:
        path (str): Metrics file.

    Returns:
        RunMetrics: The run's rows and trace.
    """
    with open(path, "r", encoding="utf-8") as file:
        text = file.read()
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# {METRICS_VERSION}"):
        raise DatasetParseError(f"not a {METRICS_VERSION} file", 0)
    header: Dict[str, str] = dict(part.split("=", 1) for part in lines[0][2:].split()[1:] if "=" in part)
    if len(lines) < 2 or lines[1].split(",") != COLUMNS:
        raise DatasetParseError("unexpected metrics columns", len(lines[0]) + 1)
    metrics = RunMetrics(
        task=header.get("task", "unknown"),
        variant=header.get("variant", "unknown"),
        seed=int(header.get("seed", "0")),
        random_return=float(header.get("random_return", "nan")),
        status=header.get("status", "complete"),
    )
    offset = len(lines[0]) + len(lines[1]) + 2
    body, trace_lines = lines[2:], None
    if TRACE_MARKER in body:
        split = body.index(TRACE_MARKER)
        body, trace_lines = body[:split], body[split + 1 :]
    for line, parts in zip(body, csv.reader(body)):
        if len(parts) != len(COLUMNS):
            raise DatasetParseError("metrics row has the wrong number of fields", offset)
        try:
            values = {c: (int(float(v)) if c in _INT_COLUMNS else float(v)) for c, v in zip(COLUMNS, parts)}
        except ValueError as e:
            raise DatasetParseError(f"bad metrics row ({e})", offset) from e
        metrics.rows.append(MetricsRow(**values))
        offset += len(line) + 1
    if trace_lines is not None:
        metrics.trace = _parse_trace(trace_lines, offset + len(TRACE_MARKER) + 1)
    return metrics


def find_metrics(directory: str, pattern: Optional[str] = None) -> List[str]:
    """Sorted metrics CSV paths in `directory`."""
    return sorted(glob.glob(os.path.join(directory, pattern or f"{METRICS_VERSION}__*.csv")))
