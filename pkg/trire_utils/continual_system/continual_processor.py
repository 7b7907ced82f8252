# continual_processor.py

"""
Main entry point for the continual learning system.
Processes command-line arguments and delegates to appropriate handlers.
"""

import argparse
import json
import logging
import os
import sys
from typing import Callable, Dict, List, Optional

# --- Analysis Imports ---
from trire_utils.continual_system.analysis.experiment import evaluate_checkpoint, inspect_buffer, run_experiment
from trire_utils.continual_system.analysis.sweeps import (
    PRUNING_CRITERIA, sweep_ablation, sweep_hyperparameter, sweep_pruning, sweep_rewind
)

# --- Core / IO Imports ---
from trire_utils.continual_system.core.exceptions import ConfigurationError, ContinualSystemError, DataError
from trire_utils.continual_system.io.artifacts import write_json

# --- Utility Imports ---
from trire_utils.continual_system.utils.cache_manager import clear_all_caches, get_cache_stats
from trire_utils.continual_system.utils.config_manager import ExperimentConfig, apply_overrides, load_config
from trire_utils.continual_system.utils.path_utils import ensure_directory, join_paths, resolve_output_root

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

DEFAULT_PERCENTILES = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# --- Configuration from arguments ---

def _parse_assignments(pairs: Optional[List[str]]) -> Dict[str, str]:
    assignments: Dict[str, str] = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got '{pair}'")
        key, value = pair.split("=", 1)
        assignments[key.strip()] = value
    return assignments

def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file, then --set pairs, then the dedicated flags (which win)."""
    config = load_config(args.config)
    config = apply_overrides(config, _parse_assignments(args.set), source="--set")
    flags = {
        "seeds": None if args.seed is None else [args.seed],
        "out": args.out,
        "method": args.method,
        "buffer": args.buffer,
        "workers": args.workers,
        "progress": args.progress,
    }
    return apply_overrides(config, flags, source="command line")

def _split_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]

# --- Handlers ---

def handle_run(args: argparse.Namespace, config: ExperimentConfig, root: str) -> int:
    """Handle the run command."""
    outcome = run_experiment(config, root=root)
    print(f"Run complete: manifest {os.path.join(root, 'manifest.json')}, aggregate {outcome.aggregate_path}")
    return EXIT_OK

def handle_sweep_rewind(args: argparse.Namespace, config: ExperimentConfig, root: str) -> int:
    """Handle the sweep-rewind command."""
    try:
        percentiles = [float(p) for p in _split_list(args.percentiles)]
    except ValueError as e:
        raise ConfigurationError(f"--percentiles: {e}") from e
    result = sweep_rewind(config, percentiles, root=join_paths(root, "rewind"))
    print(f"Rewind sweep ({len(result.points)} points) written to {result.root}")
    return EXIT_OK

def handle_sweep_ablation(args: argparse.Namespace, config: ExperimentConfig, root: str) -> int:
    """Handle the sweep-ablation command."""
    result = sweep_ablation(config, root=join_paths(root, "ablation"))
    print(f"Ablation grid ({len(result.points)} configurations) written to {result.root}")
    return EXIT_OK

def handle_sweep_pruning(args: argparse.Namespace, config: ExperimentConfig, root: str) -> int:
    """Handle the sweep-pruning command."""
    criteria = _split_list(args.criteria)
    unknown = [c for c in criteria if c not in PRUNING_CRITERIA]
    if unknown:
        raise ConfigurationError(f"--criteria: unknown criteria {unknown}, expected {PRUNING_CRITERIA}")
    result = sweep_pruning(config, criteria, root=join_paths(root, "pruning"))
    print(f"Pruning comparison ({len(result.points)} criteria) written to {result.root}")
    return EXIT_OK

def handle_sweep_hyper(args: argparse.Namespace, config: ExperimentConfig, root: str) -> int:
    """Handle the sweep-hyper command."""
    result = sweep_hyperparameter(config, args.key, _split_list(args.values), root=join_paths(root, f"hyper_{args.key}"))
    print(f"Sensitivity sweep over {args.key} ({len(result.points)} values) written to {result.root}")
    return EXIT_OK

def handle_evaluate(args: argparse.Namespace, config: ExperimentConfig, root: str) -> int:
    """Handle the evaluate command."""
    report = evaluate_checkpoint(args.checkpoint, config, use_working=args.working, workers=config.workers)
    name = os.path.splitext(os.path.basename(args.checkpoint))[0]
    output = args.output or join_paths(root, f"evaluate_{name}.json")
    ensure_directory(os.path.dirname(output) or ".")
    write_json(output, report.to_dict())
    print(f"Class-IL {report.class_il:.4f}, Task-IL {report.task_il:.4f}, ECE {report.ece:.4f}; report saved to {output}")
    return EXIT_OK

def handle_inspect_buffer(args: argparse.Namespace, config: ExperimentConfig, root: str) -> int:
    """Handle the inspect-buffer command."""
    stats = inspect_buffer(args.checkpoint)
    if args.output:
        write_json(args.output, stats)
    print(json.dumps(stats, indent=2, sort_keys=True, default=str))
    return EXIT_OK

# --- Logging ---

def setup_logging(root: str) -> None:
    """DEBUG to <root>/debug.txt, training detail to <root>/training.log, INFO to stdout."""
    log_formatter = logging.Formatter(LOG_FORMAT)
    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG)
    for handler in [h for h in root_logger.handlers if getattr(h, "_continual_cli", False)]:
        root_logger.removeHandler(handler)
        handler.close()

    def attach(handler: logging.Handler, level: int) -> None:
        handler.setLevel(level)
        handler.setFormatter(log_formatter)
        handler._continual_cli = True  # type: ignore[attr-defined]
        root_logger.addHandler(handler)

    try: # File Handler
        ensure_directory(root)
        attach(logging.FileHandler(os.path.join(root, 'debug.txt'), mode='w'), logging.DEBUG)
    except Exception as e: print(f"Error setting up file logger in {root}: {e}", file=sys.stderr)
    try: # Training Handler
        training_handler = logging.FileHandler(os.path.join(root, 'training.log'), mode='w')
        class TrainingLogFilter(logging.Filter):
            def filter(self, record): return record.name.startswith('trire_utils.continual_system.analysis')
        training_handler.addFilter(TrainingLogFilter())
        attach(training_handler, logging.DEBUG)
    except Exception as e: print(f"Error setting up training logger in {root}: {e}", file=sys.stderr)
    # Console Handler
    attach(logging.StreamHandler(sys.stdout), logging.INFO)

def exit_code_for(error: BaseException) -> int:
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(error, DataError):
        return EXIT_DATA
    return EXIT_RUNTIME

def _dispatch(handler: Callable[..., int], args: argparse.Namespace, config: ExperimentConfig, root: str) -> int:
    try:
        return handler(args, config, root)
    except ContinualSystemError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

# --- Parser ---

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Experiment file of key=value lines (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="Run a single seed instead of the configured seed list")
    parser.add_argument("--out", help="Output directory (relative paths resolve under $TRIRE_OUTPUT_ROOT)")
    parser.add_argument("--method", help="trire | sgd | er | joint")
    parser.add_argument("--buffer", type=int, help="Rehearsal buffer capacity")
    parser.add_argument("--workers", type=int, help="Parallel workers (defaults to $TRIRE_THREADS or 1)")
    parser.add_argument("--progress", action="store_true", default=None, help="Print run progress to stdout")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override any config key (repeatable)")

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Continual learning experiment runner")
    subparsers = parser.add_subparsers(dest="command", help="Available commands", required=True)

    # --- Runs ---
    run_parser = subparsers.add_parser("run", help="Train and evaluate a method over every configured seed")
    _add_common(run_parser)
    run_parser.set_defaults(func=handle_run)

    # --- Sweeps ---
    rewind_parser = subparsers.add_parser("sweep-rewind", help="Vary the rewind checkpoint percentile")
    _add_common(rewind_parser)
    rewind_parser.add_argument("--percentiles", default=DEFAULT_PERCENTILES, help="Comma-separated values in (0, 1)")
    rewind_parser.set_defaults(func=handle_sweep_rewind)

    ablation_parser = subparsers.add_parser("sweep-ablation", help="Phase on/off grid (4 configurations)")
    _add_common(ablation_parser)
    ablation_parser.set_defaults(func=handle_sweep_ablation)

    pruning_parser = subparsers.add_parser("sweep-pruning", help="Compare weight-scoring criteria")
    _add_common(pruning_parser)
    pruning_parser.add_argument("--criteria", default=",".join(PRUNING_CRITERIA), help="Comma-separated criteria")
    pruning_parser.set_defaults(func=handle_sweep_pruning)

    hyper_parser = subparsers.add_parser("sweep-hyper", help="Sensitivity to one numeric key")
    _add_common(hyper_parser)
    hyper_parser.add_argument("--key", required=True, help="Config key or alias (e.g. gamma, kappa, zeta)")
    hyper_parser.add_argument("--values", required=True, help="Comma-separated values")
    hyper_parser.set_defaults(func=handle_sweep_hyper)

    # --- Checkpoints ---
    evaluate_parser = subparsers.add_parser("evaluate", help="Evaluate a saved checkpoint on the configured stream")
    _add_common(evaluate_parser)
    evaluate_parser.add_argument("checkpoint", help="Path to a .ckpt file")
    evaluate_parser.add_argument("--working", action="store_true", help="Evaluate the working parameters instead of the EMA")
    evaluate_parser.add_argument("--output", "-o", help="Report path (default: <out>/evaluate_<name>.json)")
    evaluate_parser.set_defaults(func=handle_evaluate)

    inspect_parser = subparsers.add_parser("inspect-buffer", help="Show the rehearsal buffer stored in a checkpoint")
    _add_common(inspect_parser)
    inspect_parser.add_argument("checkpoint", help="Path to a .ckpt file")
    inspect_parser.add_argument("--output", "-o", help="Also save the statistics as JSON")
    inspect_parser.set_defaults(func=handle_inspect_buffer)
    return parser

def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, set up logging and dispatch; returns the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
    except ConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    root = resolve_output_root(config.get("out"))
    setup_logging(root)
    logger.debug(f"Command {args.command} with output root {root}")
    try:
        return _dispatch(args.func, args, config, root)
    finally:
        logger.debug(f"Dataset cache: {get_cache_stats('idx_datasets')}")
        clear_all_caches()

if __name__ == "__main__":
    sys.exit(main())
