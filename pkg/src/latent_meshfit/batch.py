"""Batch inversion: independent targets on a bounded pool of worker processes."""

import asyncio
import logging
from collections.abc import Callable
from concurrent.futures import Executor, ProcessPoolExecutor
from datetime import datetime
from pathlib import Path

import pandas as pd

from latent_meshfit.commands import TARGET_CONFIG, cmd_invert
from latent_meshfit.config import ConfigError, RunConfig
from latent_meshfit.files import write_table
from latent_meshfit.models import BatchJob, JobStatus

logger = logging.getLogger(__name__)

# Durations stay out of batch.csv so re-runs compare equal
BATCH_COLUMNS = ["id", "config_path", "output_dir", "status", "iou", "error"]

JobFunction = Callable[[str, str, tuple[str, ...]], dict]


def run_invert_job(config_path: str, output_dir: str, overrides: tuple[str, ...]) -> dict:
    """Worker entry point: one full ``invert`` run into output_dir."""
    cfg = RunConfig.load(config_path)
    cfg.apply_overrides(overrides)
    cfg.set("output.dir", output_dir)
    return cmd_invert(cfg)


def discover_jobs(batch_dir: Path, output_dir: Path) -> list[BatchJob]:
    """One job per sub-directory of batch_dir holding a target.cfg, in name order."""
    if not batch_dir.is_dir():
        raise ConfigError(f"batch directory not found: {batch_dir}")
    jobs = [
        BatchJob(
            id=sub.name,
            config_path=str(sub / TARGET_CONFIG),
            output_dir=str(output_dir / sub.name),
        )
        for sub in sorted(batch_dir.iterdir())
        if (sub / TARGET_CONFIG).is_file()
    ]
    if not jobs:
        raise ConfigError(f"no {TARGET_CONFIG} found under {batch_dir}")
    return jobs


class BatchRunner:
    """Runs batch jobs with at most ``workers`` inversions in flight."""

    def __init__(
        self,
        workers: int = 1,
        overrides: tuple[str, ...] = (),
        executor: Executor | None = None,
        job_fn: JobFunction = run_invert_job,
        on_status_change: Callable[[BatchJob], None] | None = None,
    ):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self.overrides = tuple(overrides)
        self.job_fn = job_fn
        self.on_status_change = on_status_change
        self._executor = executor
        self._owns_executor = executor is None
        self._tasks: dict[str, asyncio.Task] = {}

    def _notify_status_change(self, job: BatchJob) -> None:
        if self.on_status_change:
            self.on_status_change(job)

    async def run(self, jobs: list[BatchJob]) -> list[BatchJob]:
        """Run every job; failures are recorded on the job, never raised."""
        if self._executor is None:
            self._executor = ProcessPoolExecutor(max_workers=self.workers)
        semaphore = asyncio.Semaphore(self.workers)
        try:
            for job in jobs:
                self._tasks[job.id] = asyncio.create_task(self._run_job(job, semaphore))
            await asyncio.gather(*self._tasks.values(), return_exceptions=True)
        finally:
            if self._owns_executor:
                self._executor.shutdown(wait=True)
                self._executor = None
        return jobs

    async def _run_job(self, job: BatchJob, semaphore: asyncio.Semaphore) -> None:
        async with semaphore:
            job.status = JobStatus.RUNNING
            job.started_at = datetime.now()
            self._notify_status_change(job)
            loop = asyncio.get_running_loop()
            try:
                summary = await loop.run_in_executor(
                    self._executor, self.job_fn, job.config_path, job.output_dir, self.overrides
                )
                job.iou = summary.get("iou")
                job.status = JobStatus.COMPLETED
                logger.info("Batch job %s completed (IoU %s)", job.id, job.iou)
            except asyncio.CancelledError:
                job.status = JobStatus.FAILED
                job.error = "cancelled"
                raise
            except Exception as e:
                job.status = JobStatus.FAILED
                job.error = f"{type(e).__name__}: {e}"
                logger.error("Batch job %s failed: %s", job.id, job.error)
            finally:
                job.completed_at = datetime.now()
                self._tasks.pop(job.id, None)
                self._notify_status_change(job)


def batch_table(jobs: list[BatchJob]) -> pd.DataFrame:
    return pd.DataFrame([job.to_dict() for job in jobs], columns=BATCH_COLUMNS)


def cmd_batch(cfg: RunConfig, overrides: tuple[str, ...] = ()) -> list[BatchJob]:
    """Invert every target under batch.dir into its own output directory; writes batch.csv."""
    batch_dir = cfg.require_path("batch.dir")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    jobs = discover_jobs(batch_dir, out)
    logger.info("Running %d batch jobs on %d workers", len(jobs), cfg["workers"])
    runner = BatchRunner(workers=cfg["workers"], overrides=overrides)
    try:
        asyncio.run(runner.run(jobs))
    finally:
        write_table(out / "batch.csv", batch_table(jobs))
    return jobs
