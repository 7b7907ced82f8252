# analysis/experiment.py

"""
Analysis module for experiment orchestration.
Builds task streams from the configuration, runs every seed of a method
(in parallel when workers allow), writes per-seed artifacts and the cross-seed
aggregate, and evaluates or inspects saved checkpoints.
"""

import os
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Type

from ..core.exceptions import DataError, InputError, ShapeError, StateError
from ..core.model import MLPNet
from ..io.artifacts import (RunManifest, aggregate_reports, build_manifest, write_json, write_manifest,
                            write_run_artifacts)
from ..io.checkpoint import load_checkpoint
from ..io.datasets import TaskStream, build_split_tasks, load_image_dataset, synthetic_blobs
from ..utils.batch_processor import BatchProcessor
from ..utils.config_manager import ExperimentConfig
from ..utils.path_utils import ensure_directory, join_paths, resolve_output_root
from .baselines import ERLearner, JointLearner, SGDLearner
from .metrics import MetricsReport, build_report
from .trainer import ContinualLearner, RunResult, TriRELearner

import logging
logger = logging.getLogger(__name__)

IDX_KEYS = ("train_images", "train_labels", "test_images", "test_labels")

METHODS: Dict[str, Type[ContinualLearner]] = {
    "trire": TriRELearner,
    "sgd": SGDLearner,
    "er": ERLearner,
    "joint": JointLearner,
}

# --- Data ---

def preflight(config: ExperimentConfig) -> None:
    """
    Check dataset inputs before any compute.

    Raises:
        DataError: an IDX path is unset or does not exist
    """
    if config.get("dataset") != "idx":
        return
    missing = []
    for key in IDX_KEYS:
        path = config.get(key)
        if not path:
            missing.append(f"{key} (unset)")
        elif not os.path.isfile(path):
            missing.append(f"{key}={path}")
    if missing:
        raise DataError(f"Missing dataset files: {', '.join(missing)}")

def build_stream(config: ExperimentConfig, seed: int) -> TaskStream:
    """Task stream for one seed (IDX split tasks or Gaussian blobs)."""
    g = config.get
    if g("dataset") == "idx":
        preflight(config)
        source = load_image_dataset(g("train_images"), g("train_labels"), g("test_images"), g("test_labels"))
        return build_split_tasks(source, g("tasks"), g("classes_per_task"), seed, g("class_order"))
    return synthetic_blobs(g("tasks"), g("classes_per_task"), g("blobs_dim"), g("blobs_per_class"),
                           g("blobs_separation"), seed)

# --- Runs ---

def make_learner(config: ExperimentConfig, seed: int, stream: TaskStream) -> ContinualLearner:
    method = config.method
    if method not in METHODS:
        raise InputError(f"Unknown method '{method}', expected one of {sorted(METHODS)}")
    return METHODS[method](stream.n_features, stream.n_classes, config.hidden, config.trire_config(seed))

def run_method(config: ExperimentConfig, seed: int, stream: Optional[TaskStream] = None, workers: int = 1,
               checkpoint_dir: Optional[str] = None) -> RunResult:
    """Train and evaluate the configured method for one seed."""
    stream = stream if stream is not None else build_stream(config, seed)
    learner = make_learner(config, seed, stream)
    logger.info(f"Running {config.method} on {len(stream)} tasks (seed {seed})")
    if checkpoint_dir:
        ensure_directory(checkpoint_dir)
    return learner.run(stream, workers=workers, checkpoint_dir=checkpoint_dir, ece_bins=config.get("ece_bins"))

@dataclass(frozen=True)
class SeedJob:
    """One seed's work; picklable for process pools."""
    sections: Dict[str, Dict[str, Any]]
    seed: int
    outputs: Dict[str, str]
    checkpoint_dir: Optional[str]
    eval_workers: int

def _seed_job(job: SeedJob) -> MetricsReport:
    config = ExperimentConfig(job.sections)
    result = run_method(config, job.seed, workers=job.eval_workers, checkpoint_dir=job.checkpoint_dir)
    write_run_artifacts(job.outputs, result.record, result.report)
    return result.report

def seed_jobs(config: ExperimentConfig, manifest: RunManifest, eval_workers: int = 1) -> List[SeedJob]:
    jobs = []
    for seed in manifest.seeds:
        outputs = manifest.seed_outputs(seed)
        checkpoint_dir = join_paths(os.path.dirname(outputs["metrics"]), "checkpoints") if config.get("save_checkpoints") else None
        jobs.append(SeedJob(config.snapshot(), seed, outputs, checkpoint_dir, eval_workers))
    return jobs

def run_jobs(jobs: List[SeedJob], workers: int, executor: str = "thread", progress: bool = False) -> List[MetricsReport]:
    """
    Run seed jobs on a worker pool; reports come back in job order.

    With a single pool worker, each job may use the workers for evaluation instead.
    """
    parallel = max(1, min(workers, len(jobs)))
    if parallel == 1:
        jobs = [replace(job, eval_workers=max(job.eval_workers, workers)) for job in jobs]
    processor = BatchProcessor(max_workers=parallel, show_progress=progress, executor=executor)
    return processor.process_items(jobs, _seed_job)

@dataclass
class ExperimentOutcome:
    manifest: RunManifest
    reports: List[MetricsReport]
    aggregate: Dict[str, Any]
    aggregate_path: str

def run_experiment(config: ExperimentConfig, workers: Optional[int] = None,
                   root: Optional[str] = None) -> ExperimentOutcome:
    """
    Run every seed of the configured method and aggregate mean and std across seeds.

    The manifest is written before training starts; per-seed artifacts go to
    `<root>/seed_<s>/` and the aggregate to `<root>/aggregate.json`.

    Raises:
        DataError: dataset files missing (before any compute)
    """
    preflight(config)
    root = root or resolve_output_root(config.get("out"))
    manifest = build_manifest(config.get("name"), config.method, root, config.seeds, config.snapshot(),
                              config.get("tasks"), config.get("save_checkpoints"))
    write_manifest(manifest)
    reports = run_jobs(seed_jobs(config, manifest), workers or config.workers, config.get("executor"), config.get("progress"))
    aggregate = aggregate_reports(reports)
    aggregate_path = write_json(join_paths(root, "aggregate.json"), aggregate)
    class_il = aggregate["metrics"]["class_il"]
    logger.info(f"{config.method}: Class-IL mean {class_il['mean']:.4f} over {len(reports)} seed(s); aggregate at {aggregate_path}")
    return ExperimentOutcome(manifest, reports, aggregate, aggregate_path)

# --- Checkpoints ---

def evaluate_checkpoint(path: str, config: ExperimentConfig, seed: Optional[int] = None,
                        use_working: bool = False, workers: int = 1) -> MetricsReport:
    """
    Evaluate a saved model on the configured stream (EMA parameters by default).

    Raises:
        CheckpointError: unreadable or malformed checkpoint
        ShapeError: the checkpoint architecture does not fit the stream
    """
    data = load_checkpoint(path)
    seed = config.seeds[0] if seed is None else seed
    stream = build_stream(config, seed)
    layout = data.layout
    if layout.input_dim != stream.n_features or layout.n_classes < stream.n_classes:
        raise ShapeError(f"Checkpoint {layout!r} does not fit a stream of {stream.n_features} features "
                         f"and {stream.n_classes} classes")
    net = MLPNet(layout.input_dim, layout.hidden, layout.n_classes)
    net.set_params(data.working if use_working else data.ema)
    method = str(data.meta.get("method", "checkpoint"))
    logger.info(f"Evaluating {'working' if use_working else 'EMA'} parameters of {path}")
    return build_report(net, stream, method, seed, config.get("ece_bins"), workers=workers)

def inspect_buffer(path: str) -> Dict[str, Any]:
    """
    Buffer statistics (size, seen, class histogram, loss quantiles) from a checkpoint.

    Raises:
        StateError: the checkpoint holds no buffer
    """
    data = load_checkpoint(path)
    if data.buffer is None:
        raise StateError(f"Checkpoint {path} holds no rehearsal buffer")
    stats = data.buffer.stats()
    stats["task_histogram"] = data.buffer.task_histogram()
    return stats
