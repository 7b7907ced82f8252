# utils/batch_processor.py

"""
Utility module for parallel batch processing.
Runs independent jobs (seeds, sweep points, evaluation shards) on a thread or
process pool and returns results in input order.
"""

import os
import time
from typing import List, Callable, TypeVar, Any, Optional, Dict
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor, as_completed
import functools

import logging
logger = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')

THREADS_ENV = "TRIRE_THREADS"
EXECUTOR_KINDS = ("thread", "process")

def default_workers() -> int:
    """Worker count from $TRIRE_THREADS, else 1."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning(f"Ignoring non-integer {THREADS_ENV}={raw!r}")
    return 1

class BatchProcessor:
    """Generic batch processor for parallel execution of independent jobs."""

    def __init__(self, max_workers: Optional[int] = None, batch_size: Optional[int] = None,
                 show_progress: bool = False, executor: str = "thread"):
        """
        Initialize the batch processor.

        Args:
            max_workers: Maximum number of workers (defaults to $TRIRE_THREADS or 1)
            batch_size: Size of batches to process (defaults to adaptive sizing)
            show_progress: Whether to show progress information (prints to stdout)
            executor: "thread" or "process"; process pools need picklable jobs
        """
        if executor not in EXECUTOR_KINDS:
            raise ValueError(f"executor must be one of {EXECUTOR_KINDS}, got {executor!r}")
        self.max_workers = max(1, max_workers or default_workers())
        self.batch_size = batch_size
        self.show_progress = show_progress
        self.executor = executor
        self.total_items = 0
        self.processed_items = 0
        self.start_time = 0.0

    def process_items(self, items: List[T], processor_func: Callable[..., R], **kwargs: Any) -> List[R]:
        """
        Process a list of items in parallel batches.
        Extra keyword arguments (**kwargs) are passed directly to the processor_func.

        Returns:
            Results in the order of items
        Raises:
            The first job exception (by item order) after the batch has drained
        """
        if not callable(processor_func):
            logger.error("processor_func must be callable")
            raise TypeError("processor_func must be a callable")

        self.total_items = len(items)
        if not self.total_items:
            logger.info("No items to process")
            return []

        self.processed_items = 0
        self.start_time = time.time()

        actual_batch_size = self._determine_batch_size()
        logger.info(f"Processing {self.total_items} items with batch size: {actual_batch_size}, workers: {self.max_workers} ({self.executor})")

        results: List[Any] = [None] * self.total_items
        for i in range(0, self.total_items, actual_batch_size):
            batch_items = items[i:i + actual_batch_size]
            batch_results = self._process_batch(batch_items, processor_func, **kwargs)
            for idx_in_batch, result_value in batch_results.items():
                results[i + idx_in_batch] = result_value
            self.processed_items += len(batch_items)
            if self.show_progress:
                self._show_progress()

        logger.info(f"Processed {self.total_items} items in {time.time() - self.start_time:.2f} seconds")
        if self.show_progress:
            print()
        return results

    def _determine_batch_size(self) -> int:
        """Determine adaptive batch size based on total items and workers."""
        if self.batch_size is not None:
            return max(1, self.batch_size)
        # Jobs here are coarse (whole training runs), so one wave per worker pool
        final_batch_size = max(1, min(self.total_items, self.max_workers * 4))
        logger.debug(f"Adaptive batch size: Total={self.total_items}, Workers={self.max_workers} -> {final_batch_size}")
        return final_batch_size

    def _make_executor(self, n_jobs: int) -> Executor:
        workers = min(self.max_workers, n_jobs)
        if self.executor == "process":
            return ProcessPoolExecutor(max_workers=workers)
        return ThreadPoolExecutor(max_workers=workers)

    def _process_batch(self, batch: List[T], processor_func: Callable[..., R], **kwargs: Any) -> Dict[int, R]:
        """Run one batch; returns batch index -> result."""
        partial_func = functools.partial(processor_func, **kwargs)
        if self.max_workers == 1:
            return {i: partial_func(item) for i, item in enumerate(batch)}

        batch_results: Dict[int, R] = {}
        errors: Dict[int, BaseException] = {}
        with self._make_executor(len(batch)) as executor:
            future_to_idx = {executor.submit(partial_func, item): i for i, item in enumerate(batch)}
            for future in as_completed(future_to_idx):
                idx_in_batch = future_to_idx[future]
                try:
                    batch_results[idx_in_batch] = future.result()
                except Exception as e:
                    item_repr = repr(batch[idx_in_batch])
                    if len(item_repr) > 100: item_repr = item_repr[:100] + "..."
                    logger.error(f"Error processing item (batch index {idx_in_batch}): {item_repr} -> {e}")
                    errors[idx_in_batch] = e
        if errors:
            raise errors[min(errors)]
        return batch_results

    def _show_progress(self) -> None:
        """Show progress information to stdout."""
        elapsed_time = max(0.01, time.time() - self.start_time)
        items_per_second = self.processed_items / elapsed_time
        percent_complete = (self.processed_items / max(1, self.total_items)) * 100
        progress_str = f"{self.processed_items:>{len(str(self.total_items))}}/{self.total_items}"
        print(f"Progress: {progress_str} ({percent_complete:6.1f}%) | {items_per_second:6.2f} jobs/s", end="\r", flush=True)
