"""Run outputs: per-seed CSV, detail JSONL, manifest JSON and two-column plot data.

Everything a summary needs is in the CSV plus the manifest (for the reset
period and horizon), so ``summarize`` can rebuild results from disk alone.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from ..errors import PreconditionError
from ..plasticity import (
    METRIC_DEFINITIONS,
    ReturnCurve,
    fixed_budget_return,
    normalized_auc,
    worst_post_event_dip,
)

CSV_HEADER = ("env_step", "episodic_return", "avg_weight_norm", "dormant_fraction", "stable_rank",
              "agent_tag", "event")
EVENTS = ("", "reset", "swap", "buffer_shrink", "halt")
BUDGET_FRACTIONS = (0.1, 0.3, 0.5)
SMOOTHING_WINDOW = 5
MANIFEST_NAME = "manifest.json"


def _num(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


class CsvLog:
    """Row-at-a-time CSV writer; every row is flushed so partial runs stay readable."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(CSV_HEADER)
        self.rows = 0

    def write(self, env_step: int, episodic_return: float | None = None, metrics=None,
              agent_tag: str = "", event: str = "") -> None:
        if event not in EVENTS:
            raise ValueError(f"unknown event {event!r}")
        if metrics is None:
            norm = dormant = rank = None
        else:
            norm, dormant, rank = metrics.avg_weight_norm, metrics.dormant_fraction, metrics.stable_rank
        self._writer.writerow([int(env_step), _num(episodic_return), _num(norm), _num(dormant), _num(rank),
                               agent_tag, event])
        self._fh.flush()
        self.rows += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class DetailLog:
    """JSON lines with per-layer stable ranks and the critic/value-network metrics."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w")

    def write(self, record: dict[str, Any]) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


@dataclass
class CsvRow:
    env_step: int
    episodic_return: float | None
    avg_weight_norm: float | None
    dormant_fraction: float | None
    stable_rank: float | None
    agent_tag: str
    event: str


def _opt(s: str) -> float | None:
    return None if s == "" else float(s)


def read_csv(path: str | Path) -> list[CsvRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise PreconditionError(f"{path}: unexpected header {header}")
        return [CsvRow(int(r[0]), _opt(r[1]), _opt(r[2]), _opt(r[3]), _opt(r[4]), r[5], r[6]) for r in reader]


def return_curve(rows: Iterable[CsvRow]) -> ReturnCurve:
    pts = [(r.env_step, r.episodic_return) for r in rows if r.episodic_return is not None]
    return ReturnCurve([p[0] for p in pts], [p[1] for p in pts])


def event_steps(rows: Iterable[CsvRow], kinds: Sequence[str] = ("reset", "swap")) -> list[int]:
    return [r.env_step for r in rows if r.event in kinds]


def summarize_rows(rows: list[CsvRow], total_env_steps: int, period: int | None,
                   smoothing_window: int = SMOOTHING_WINDOW) -> dict[str, Any]:
    """Normalized AUC, fixed-budget returns, final-quarter mean and worst post-event dip."""
    curve = return_curve(rows)
    events = event_steps(rows)
    out: dict[str, Any] = {"computable": len(curve) >= 2, "n_evals": len(curve), "n_reset_events": len(events)}
    if len(curve) < 2:
        out.update(normalized_auc=None, fixed_budget_returns={}, final_quarter_return=None,
                   final_return=None, worst_post_reset_dip=None)
        return out
    out["normalized_auc"] = normalized_auc(curve)
    budgets = [int(round(f * total_env_steps)) for f in BUDGET_FRACTIONS]
    budgets = [b for b in budgets if curve.steps[0] <= b <= curve.steps[-1]]
    out["fixed_budget_returns"] = {str(b): v for b, v in zip(budgets, fixed_budget_return(curve, budgets))}
    tail = curve.returns[curve.steps >= 0.75 * total_env_steps]
    out["final_quarter_return"] = float(tail.mean()) if tail.size else None
    out["final_return"] = float(curve.returns[-1])
    dip = worst_post_event_dip(curve, events, period, smoothing_window) if period and events else None
    out["worst_post_reset_dip"] = dip
    return out


def aggregate(summaries: Sequence[dict[str, Any]]) -> dict[str, Any]:
    """Median and mean over seeds for each scalar summary entry."""
    ok = [s for s in summaries if s.get("computable")]
    out: dict[str, Any] = {"seeds_ok": len(ok)}
    keys = ["normalized_auc", "final_quarter_return", "final_return", "worst_post_reset_dip"]
    for k in keys:
        vals = [s[k] for s in ok if s.get(k) is not None]
        out[k] = {"median": float(np.median(vals)), "mean": float(np.mean(vals)),
                  "stderr": float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0,
                  "n": len(vals)} if vals else None
    budgets = sorted({b for s in ok for b in s.get("fixed_budget_returns", {})}, key=int)
    out["fixed_budget_returns"] = {
        b: float(np.median([s["fixed_budget_returns"][b] for s in ok if b in s["fixed_budget_returns"]]))
        for b in budgets}
    return out


def metric_definitions() -> dict[str, Any]:
    d = dict(METRIC_DEFINITIONS)
    d["return_smoothing_window"] = SMOOTHING_WINDOW
    d["fixed_budget_fractions"] = list(BUDGET_FRACTIONS)
    d["worst_post_reset_dip"] = ("per reset/swap event: (mean of the last 5 evaluations before the event - "
                                 "minimum evaluation within 10% of the reset period after it) / "
                                 "max(that mean, 1); maximum over events")
    return d


def write_manifest(path: str | Path, record: dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text())


def write_plot_data(path: str | Path, steps: Sequence[float], values: Sequence[float],
                    header: str = "") -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for s, v in zip(steps, values):
            fh.write(f"{int(s)} {float(v)!r}\n")


def write_seed_plots(plot_dir: Path, seed: int, rows: list[CsvRow]) -> list[str]:
    plot_dir.mkdir(parents=True, exist_ok=True)
    written = []
    curve = return_curve(rows)
    p = plot_dir / f"seed{seed}.return.dat"
    write_plot_data(p, curve.steps, curve.returns, "env_step mean_eval_return")
    written.append(p.name)
    for role in ("active", "passive"):
        sel = [r for r in rows if r.agent_tag.endswith("/" + role) and r.avg_weight_norm is not None]
        if not sel:
            continue
        for metric in ("avg_weight_norm", "dormant_fraction", "stable_rank"):
            p = plot_dir / f"seed{seed}.{metric}.{role}.dat"
            write_plot_data(p, [r.env_step for r in sel], [getattr(r, metric) for r in sel],
                            f"env_step {metric} ({role} network)")
            written.append(p.name)
    return written


def write_mean_curve(plot_dir: Path, curves: Sequence[ReturnCurve]) -> str | None:
    """Seed-mean return curve over the evaluation steps common to every seed."""
    if not curves:
        return None
    common = set(curves[0].steps.tolist())
    for c in curves[1:]:
        common &= set(c.steps.tolist())
    steps = sorted(common)
    if not steps:
        return None
    vals = [float(np.mean([c.returns[c.steps == s][0] for c in curves])) for s in steps]
    p = plot_dir / "mean.return.dat"
    write_plot_data(p, steps, vals, f"env_step mean_eval_return over {len(curves)} seeds")
    return p.name


def check_writable(directory: str | Path) -> Path:
    """Create ``directory`` and prove it accepts files; raises ``OSError`` otherwise."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    probe = d / ".write_check"
    with open(probe, "w") as fh:
        fh.write("ok")
    probe.unlink()
    return d
