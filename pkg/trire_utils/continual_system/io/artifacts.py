# io/artifacts.py

"""
IO module for run artifacts.
Writes the per-seed CSV tables and JSON reports, the run manifest and the
cross-seed aggregate. Column schemas: docs/artifact_schemas.md.
"""

import json
import os
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Mapping, Sequence

import numpy as np
import pandas as pd

from ... import __version__
from ..analysis.metrics import MetricsReport, finite_or_none
from ..core.exceptions import ArtifactError
from ..utils.path_utils import ensure_directory, join_paths

import logging
logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["task", "phase", "epoch", "steps", "loss_current", "loss_buffer"]
ACCURACY_COLUMNS = ["after_task", "eval_task", "protocol", "accuracy"]
MASK_COLUMNS = ["task", "mask", "density", "layer", "neurons_retained", "neurons_total",
                "weights_retained", "weights_total"]
BUFFER_COLUMNS = ["task", "stat", "key", "value"]
COUNTER_COLUMNS = ["task", "layer", "neuron", "count"]
VALIDATION_COLUMNS = ["task", "accuracy"]
EVENT_COLUMNS = ["task", "event", "epoch", "params"]
CONFUSION_COLUMNS = ["true_task", "predicted_task", "share"]
RELIABILITY_COLUMNS = ["bin", "lower", "upper", "count", "accuracy", "confidence"]

METRICS_SCHEMA = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "schemas",
                              "metrics_report.schema.json")

# Scalars aggregated across seeds (mean and sample std)
AGGREGATE_METRICS = ["class_il", "task_il", "stability", "plasticity", "tradeoff", "ece", "recency_share"]

SEED_FILES = {
    "losses": "losses.csv",
    "accuracy": "accuracy.csv",
    "masks": "masks.csv",
    "buffer": "buffer.csv",
    "counters": "counters.csv",
    "validation": "validation.csv",
    "events": "events.csv",
    "confusion": "confusion.csv",
    "reliability": "reliability.csv",
    "metrics": "metrics.json",
    "timing": "timing.json",
}

def write_table(path: str, rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> str:
    """
    Write rows as CSV with a fixed column order.

    Missing keys become empty cells; floats use 10 significant digits and
    lines end in a bare newline so reruns compare byte-for-byte.
    """
    frame = pd.DataFrame(list(rows), columns=list(columns))
    try:
        frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    except OSError as e:
        raise ArtifactError(path, str(e)) from e
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path

def write_json(path: str, payload: Any) -> str:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(finite_or_none(payload), f, indent=2, sort_keys=True, allow_nan=False)
            f.write("\n")
    except OSError as e:
        raise ArtifactError(path, str(e)) from e
    logger.debug(f"Wrote {path}")
    return path

def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)

def load_metrics_schema() -> Dict[str, Any]:
    """The published JSON schema of MetricsReport payloads."""
    return read_json(METRICS_SCHEMA)

# --- Manifest ---

@dataclass(frozen=True)
class RunManifest:
    """What a run will produce; written before any training starts."""
    name: str
    method: str
    version: str
    created: str
    root: str
    seeds: List[int]
    config: Dict[str, Dict[str, Any]]
    outputs: Dict[str, Dict[str, str]] = field(default_factory=dict)
    environment: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def seed_outputs(self, seed: int) -> Dict[str, str]:
        return dict(self.outputs[str(seed)])

def seed_directory(root: str, seed: int) -> str:
    return join_paths(root, f"seed_{seed}")

def planned_outputs(root: str, seed: int, n_tasks: int = 0, save_checkpoints: bool = False) -> Dict[str, str]:
    """File key -> path for one seed; checkpoints are listed per task when requested."""
    directory = seed_directory(root, seed)
    outputs = {key: join_paths(directory, name) for key, name in SEED_FILES.items()}
    if save_checkpoints:
        for t in range(n_tasks):
            outputs[f"checkpoint_task_{t}"] = join_paths(directory, "checkpoints", f"task_{t}.ckpt")
    return outputs

def build_manifest(name: str, method: str, root: str, seeds: Sequence[int], config: Dict[str, Dict[str, Any]],
                   n_tasks: int, save_checkpoints: bool) -> RunManifest:
    return RunManifest(
        name=name, method=method, version=__version__,
        created=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        root=root, seeds=list(seeds), config=config,
        outputs={str(s): planned_outputs(root, s, n_tasks, save_checkpoints) for s in seeds},
        environment={"python": platform.python_version(), "numpy": np.__version__, "pandas": pd.__version__},
    )

def write_manifest(manifest: RunManifest) -> str:
    ensure_directory(manifest.root)
    path = join_paths(manifest.root, "manifest.json")
    write_json(path, manifest.to_dict())
    logger.info(f"Run manifest: {path}")
    return path

# --- Per-seed artifacts ---

def confusion_rows(confusion: Sequence[Sequence[float]]) -> List[Dict[str, Any]]:
    return [{"true_task": i, "predicted_task": j, "share": float(v)}
            for i, row in enumerate(confusion) for j, v in enumerate(row)]

def write_run_artifacts(outputs: Mapping[str, str], record: Any, report: MetricsReport) -> Dict[str, str]:
    """
    Write one seed's RunRecord tables, MetricsReport and timings.

    `record` is a RunRecord; wall-clock timings go to timing.json only so the
    metric CSVs stay reproducible.
    """
    ensure_directory(os.path.dirname(outputs["metrics"]))
    write_table(outputs["losses"], record.losses, LOSS_COLUMNS)
    write_table(outputs["accuracy"], record.accuracy, ACCURACY_COLUMNS)
    write_table(outputs["masks"], record.masks, MASK_COLUMNS)
    write_table(outputs["buffer"], record.buffer, BUFFER_COLUMNS)
    write_table(outputs["counters"], record.counters, COUNTER_COLUMNS)
    write_table(outputs["validation"], record.validation, VALIDATION_COLUMNS)
    write_table(outputs["events"], record.events, EVENT_COLUMNS)
    write_table(outputs["confusion"], confusion_rows(report.confusion), CONFUSION_COLUMNS)
    write_table(outputs["reliability"], report.reliability, RELIABILITY_COLUMNS)
    write_json(outputs["metrics"], report.to_dict())
    write_json(outputs["timing"], dict(record.wall_clock, total=float(sum(record.wall_clock.values()))))
    return {key: outputs[key] for key in SEED_FILES}

# --- Aggregation ---

def aggregate_reports(reports: Sequence[MetricsReport]) -> Dict[str, Any]:
    """
    Mean and sample standard deviation (ddof=1) of each scalar metric across seeds.

    Metrics missing for every seed (e.g. stability of the joint baseline)
    aggregate to None; the std of a single seed is None.
    """
    if not reports:
        return {"seeds": [], "n_seeds": 0, "metrics": {}}
    frame = pd.DataFrame([{key: getattr(r, key) for key in AGGREGATE_METRICS} for r in reports], dtype=float)
    summary = {}
    for key in AGGREGATE_METRICS:
        column = frame[key].dropna()
        summary[key] = {
            "mean": float(column.mean()) if len(column) else None,
            "std": float(column.std(ddof=1)) if len(column) > 1 else None,
            "n": int(len(column)),
        }
    return {
        "method": reports[0].method,
        "seeds": [r.seed for r in reports],
        "n_seeds": len(reports),
        "metrics": summary,
    }

def aggregate_rows(aggregate: Mapping[str, Any], **extra: Any) -> List[Dict[str, Any]]:
    """Long-form rows (metric, mean, std, n) for summary CSVs."""
    return [dict(extra, metric=key, mean=value["mean"], std=value["std"], n=value["n"])
            for key, value in aggregate.get("metrics", {}).items()]
