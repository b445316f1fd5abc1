"""Multi-seed experiments, run records and cross-run summaries."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from ..errors import PreconditionError
from ..strategies import STRATEGIES
from .config import ExperimentConfig, config_from_dict, config_hash, reset_period, validate_config
from .loop import SeedResult, run_seed
from .outputs import (
    MANIFEST_NAME,
    aggregate,
    check_writable,
    metric_definitions,
    read_csv,
    read_manifest,
    return_curve,
    summarize_rows,
    write_manifest,
    write_mean_curve,
    write_seed_plots,
)

MANIFEST_VERSION = 1


@dataclass
class RunRecord:
    config: dict[str, Any]
    config_hash: str
    run_dir: str
    reset_period_env_steps: int | None
    seeds: list[dict[str, Any]] = field(default_factory=list)
    summary: dict[str, Any] = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def to_manifest(self) -> dict[str, Any]:
        d = asdict(self)
        d["manifest_version"] = MANIFEST_VERSION
        d["metric_definitions"] = metric_definitions()
        return d

    @property
    def ok(self) -> bool:
        return all(s["status"] == "ok" for s in self.seeds)


def run_directory(cfg: ExperimentConfig, root: str | Path | None = None) -> Path:
    return Path(root if root is not None else cfg.output_dir) / cfg.label


def run_experiment(cfg: ExperimentConfig, root: str | Path | None = None,
                   progress: Callable[[str], None] | None = None,
                   keep: dict | None = None) -> RunRecord:
    """Train every seed of ``cfg`` and write CSVs, plots and the manifest.

    A seed that hits a numeric failure is marked failed and the others go on.
    ``keep`` (optional) receives per-seed live objects for inspection.
    """
    validate_config(cfg)
    run_dir = check_writable(run_directory(cfg, root))
    period = reset_period(cfg)
    record = RunRecord(cfg.to_dict(), config_hash(cfg), str(run_dir), period)
    start = time.perf_counter()
    summaries = []
    curves = []
    for seed in cfg.seeds:
        csv_path = run_dir / f"seed{seed}.csv"
        detail_path = run_dir / f"seed{seed}.detail.jsonl"
        seed_keep: dict | None = {} if keep is not None else None
        res: SeedResult = run_seed(cfg, seed, csv_path, detail_path, seed_keep)
        if keep is not None:
            keep[seed] = seed_keep
        rows = read_csv(csv_path)
        s = summarize_rows(rows, cfg.total_env_steps, period)
        if res.status != "ok":
            s["computable"] = False
        plots = write_seed_plots(run_dir / "plots", seed, rows)
        if res.status == "ok" and s["computable"]:
            summaries.append(s)
            curves.append(return_curve(rows))
        entry = asdict(res)
        entry.update(csv=csv_path.name, detail=detail_path.name, plots=plots, summary=s)
        for k in ("csv_path", "detail_path"):
            entry.pop(k)
        record.seeds.append(entry)
        if progress:
            auc = s.get("normalized_auc")
            progress(f"{cfg.label} seed {seed}: {res.status}, AUC {auc if auc is None else round(auc, 2)}, "
                     f"{res.wall_clock_s:.0f}s")
    write_mean_curve(run_dir / "plots", curves)
    record.summary = aggregate(summaries)
    record.summary["seeds_failed"] = sum(1 for e in record.seeds if e["status"] != "ok")
    record.wall_clock_s = time.perf_counter() - start
    write_manifest(run_dir / MANIFEST_NAME, record.to_manifest())
    return record


def load_record(run_dir: str | Path) -> dict[str, Any]:
    return read_manifest(Path(run_dir) / MANIFEST_NAME)


def manifest_config(manifest: dict[str, Any]) -> ExperimentConfig:
    return config_from_dict(manifest["config"])


def recompute_run(run_dir: str | Path) -> dict[str, Any]:
    """Summaries rebuilt from a run directory's CSVs (the manifest supplies period and horizon)."""
    run_dir = Path(run_dir)
    m = read_manifest(run_dir / MANIFEST_NAME)
    cfg = m["config"]
    period = m["reset_period_env_steps"]
    per_seed = {}
    ok = []
    for entry in m["seeds"]:
        rows = read_csv(run_dir / entry["csv"])
        s = summarize_rows(rows, cfg["total_env_steps"], period)
        if entry["status"] != "ok":
            s["computable"] = False
        per_seed[entry["seed"]] = s
        if s["computable"]:
            ok.append(s)
    return {"label": run_dir.name, "config": cfg, "per_seed": per_seed, "summary": aggregate(ok)}


def find_runs(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / MANIFEST_NAME).exists():
        return [root]
    return sorted(p.parent for p in root.rglob(MANIFEST_NAME))


def _strategy_order(run: dict[str, Any]) -> tuple:
    cfg = run["config"]
    return (cfg["algorithm"], STRATEGIES.index(cfg["strategy"]), cfg["replay_ratio"], run["label"])


def summarize_directory(root: str | Path) -> list[dict[str, Any]]:
    runs = [recompute_run(d) for d in find_runs(root)]
    if not runs:
        raise PreconditionError(f"no run manifests under {root}")
    return sorted(runs, key=_strategy_order)


def _fmt(x, width: int = 10) -> str:
    return f"{'n/a':>{width}}" if x is None else f"{x:>{width}.2f}"


def format_tables(runs: Sequence[dict[str, Any]]) -> str:
    """AUC table (one row per run, columns per replay ratio) and a fixed-budget table."""
    lines = ["Normalized AUC (median over seeds +- standard error)"]
    envs = sorted({r["config"]["env"] for r in runs})
    ratios = sorted({r["config"]["replay_ratio"] for r in runs})
    head = f"{'method':<40}" + "".join(f"{f'{e} RR={rr}':>28}" for e in envs for rr in ratios)
    lines.append(head)
    methods = []
    for r in runs:
        key = r["label"].replace(f"-rr{r['config']['replay_ratio']}", "").replace(f"-{r['config']['env']}", "")
        if key not in methods:
            methods.append(key)
    cell = {}
    for r in runs:
        key = r["label"].replace(f"-rr{r['config']['replay_ratio']}", "").replace(f"-{r['config']['env']}", "")
        cell[(key, r["config"]["env"], r["config"]["replay_ratio"])] = r["summary"].get("normalized_auc")
    for m in methods:
        row = f"{m:<40}"
        for e in envs:
            for rr in ratios:
                a = cell.get((m, e, rr))
                row += f"{'':>28}" if a is None else f"{a['median']:>18.2f} +- {a['stderr']:<6.2f}"
        lines.append(row)

    lines += ["", "Fixed-budget returns (median over seeds)"]
    budgets = sorted({b for r in runs for b in r["summary"].get("fixed_budget_returns", {})}, key=int)
    lines.append(f"{'run':<48}" + "".join(f"{b + ' steps':>16}" for b in budgets))
    for r in runs:
        fb = r["summary"].get("fixed_budget_returns", {})
        lines.append(f"{r['label']:<48}" + "".join(_fmt(fb.get(b), 16) for b in budgets))

    lines += ["", "Worst post-reset dip (median over seeds)"]
    for r in runs:
        d = r["summary"].get("worst_post_reset_dip")
        lines.append(f"{r['label']:<48}{_fmt(None if d is None else d['median'], 16)}")
    return "\n".join(lines)
