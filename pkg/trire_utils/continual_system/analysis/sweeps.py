# analysis/sweeps.py

"""
Analysis module for sweeps.
Each sweep is a grid of configuration points run over the same seeds and
data streams: the rewind-point sweep, the phase ablation grid, the pruning
criterion comparison and single-key hyperparameter sensitivity. Every
(point, seed) pair is an independent job; results are merged in grid order.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from ..core.exceptions import ConfigurationError
from ..io.artifacts import aggregate_reports, aggregate_rows, build_manifest, write_json, write_manifest, write_table
from ..utils.config_manager import DEFAULT_CONFIG, KEY_SECTIONS, ExperimentConfig, apply_overrides, canonical_key
from ..utils.path_utils import join_paths, resolve_output_root
from .experiment import preflight, run_jobs, seed_jobs
from .metrics import MetricsReport
from .trainer import checkpoint_epoch_for

import logging
logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["seed", "class_il", "task_il", "stability", "plasticity", "tradeoff", "ece", "recency_share"]
SUMMARY_COLUMNS = ["metric", "mean", "std", "n"]

# Phase switches per ablation row; Revise without Retain is not a runnable configuration
ABLATION_ROWS = (
    ("retain_only", {"revise_on": False, "rewind_on": False}),
    ("retain_revise", {"revise_on": True, "rewind_on": False}),
    ("retain_rewind", {"revise_on": False, "rewind_on": True}),
    ("full", {"revise_on": True, "rewind_on": True}),
)
PRUNING_CRITERIA = ("magnitude", "fisher", "cwi")

@dataclass(frozen=True)
class SweepPoint:
    """One grid point: a directory name, CSV label columns and config overrides."""
    name: str
    labels: Dict[str, Any]
    overrides: Dict[str, Any]

@dataclass
class SweepResult:
    sweep: str
    root: str
    points: List[SweepPoint]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    summary: List[Dict[str, Any]] = field(default_factory=list)
    paths: Dict[str, str] = field(default_factory=dict)

    def rows_for(self, seed: int) -> List[Dict[str, Any]]:
        return [r for r in self.rows if r["seed"] == seed]

def _result_row(point: SweepPoint, report: MetricsReport) -> Dict[str, Any]:
    row = dict(point.labels, point=point.name)
    row.update({key: getattr(report, key) for key in RESULT_COLUMNS})
    return row

def _run_grid(config: ExperimentConfig, sweep: str, points: Sequence[SweepPoint],
              workers: Optional[int] = None, root: Optional[str] = None) -> SweepResult:
    """
    Run every (point, seed) job and write per-seed and summary CSVs.

    All point configurations are validated before any training starts.
    """
    preflight(config)
    root = root or join_paths(resolve_output_root(config.get("out")), sweep)
    configs = [apply_overrides(config, p.overrides, source=f"sweep {p.name}") for p in points]

    jobs, owners = [], []
    for point, cfg in zip(points, configs):
        point_root = join_paths(root, point.name)
        manifest = build_manifest(f"{cfg.get('name')}/{sweep}/{point.name}", cfg.method, point_root, cfg.seeds,
                                  cfg.snapshot(), cfg.get("tasks"), cfg.get("save_checkpoints"))
        write_manifest(manifest)
        point_jobs = seed_jobs(cfg, manifest)
        jobs.extend(point_jobs)
        owners.extend([point] * len(point_jobs))
    logger.info(f"Sweep {sweep}: {len(points)} points x {len(config.seeds)} seed(s) = {len(jobs)} runs")
    reports = run_jobs(jobs, workers or config.workers, config.get("executor"), config.get("progress"))

    result = SweepResult(sweep, root, list(points))
    label_columns = list(points[0].labels) if points else []
    for point in points:
        point_reports = [r for r, owner in zip(reports, owners) if owner is point]
        result.rows.extend(_result_row(point, r) for r in point_reports)
        aggregate = aggregate_reports(point_reports)
        write_json(join_paths(root, point.name, "aggregate.json"), aggregate)
        result.summary.extend(aggregate_rows(aggregate, point=point.name, **point.labels))

    columns = label_columns + ["point"] + RESULT_COLUMNS
    for seed in config.seeds:
        result.paths[f"seed_{seed}"] = write_table(join_paths(root, f"{sweep}_seed_{seed}.csv"), result.rows_for(seed), columns)
    result.paths["summary"] = write_table(join_paths(root, f"{sweep}_summary.csv"), result.summary,
                                          label_columns + ["point"] + SUMMARY_COLUMNS)
    logger.info(f"Sweep {sweep} written to {root}")
    return result

def sweep_rewind(config: ExperimentConfig, percentiles: Sequence[float], workers: Optional[int] = None,
                 root: Optional[str] = None) -> SweepResult:
    """
    One TriRE run per distinct checkpoint epoch per seed, in increasing order.

    Only the checkpoint epoch k = max(1, round(p * E1)) depends on the
    percentile, so percentiles that give the same k would repeat the same
    runs; each k is run once under the smallest percentile that reaches it.

    Raises:
        ConfigurationError: a percentile outside (0, 1)
    """
    grid = sorted({float(p) for p in percentiles})
    if not grid:
        raise ConfigurationError("sweep-rewind needs at least one percentile")
    outside = [p for p in grid if not 0.0 < p < 1.0]
    if outside:
        raise ConfigurationError(f"rewind percentiles must lie in (0, 1), got {outside}")
    epochs_retain = config.epoch_split()[0]
    by_epoch: Dict[int, float] = {}
    for p in grid:
        by_epoch.setdefault(checkpoint_epoch_for(p, epochs_retain), p)
    if len(by_epoch) < len(grid):
        logger.info(f"Sweep rewind: {len(grid)} percentiles map to checkpoint epochs {sorted(by_epoch)} of {epochs_retain}")
    points = [SweepPoint(f"rewind_{p:g}", {"percentile": p, "checkpoint_epoch": k},
                         {"method": "trire", "rewind_percentile": p}) for k, p in sorted(by_epoch.items())]
    return _run_grid(config, "rewind", points, workers, root)

def sweep_ablation(config: ExperimentConfig, workers: Optional[int] = None, root: Optional[str] = None) -> SweepResult:
    """The three runnable phase subsets plus the full pipeline."""
    points = [SweepPoint(name, dict(switches), dict(switches, method="trire")) for name, switches in ABLATION_ROWS]
    return _run_grid(config, "ablation", points, workers, root)

def sweep_pruning(config: ExperimentConfig, criteria: Sequence[str] = PRUNING_CRITERIA,
                  workers: Optional[int] = None, root: Optional[str] = None) -> SweepResult:
    """Swap only the weight-scoring criterion of extraction."""
    ordered = list(dict.fromkeys(criteria))
    points = [SweepPoint(c, {"criterion": c}, {"method": "trire", "criterion": c}) for c in ordered]
    return _run_grid(config, "pruning", points, workers, root)

def sweep_hyperparameter(config: ExperimentConfig, key: str, values: Sequence[Any],
                         workers: Optional[int] = None, root: Optional[str] = None) -> SweepResult:
    """
    Sensitivity of the configured method to one key (e.g. gamma, kappa, zeta).

    Raises:
        ConfigurationError: unknown key, or a non-numeric key
    """
    name = canonical_key(key)
    if name not in KEY_SECTIONS:
        raise ConfigurationError(f"sweep-hyper: unknown key '{key}'")
    default = DEFAULT_CONFIG[KEY_SECTIONS[name]][name]
    if isinstance(default, bool) or not isinstance(default, (int, float)):
        raise ConfigurationError(f"sweep-hyper: '{key}' is not a numeric key")
    cast = int if isinstance(default, int) else float
    try:
        grid = sorted({cast(v) for v in values})
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"sweep-hyper: bad value for '{key}': {e}") from e
    if not grid:
        raise ConfigurationError(f"sweep-hyper needs at least one value for '{key}'")
    points = [SweepPoint(f"{name}_{v:g}", {name: v}, {name: v}) for v in grid]
    return _run_grid(config, f"hyper_{name}", points, workers, root)
