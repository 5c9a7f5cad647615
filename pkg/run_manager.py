#!/usr/bin/env python3
"""
Run Manager for per-seed CQural experiment runs
Queues seed runs, executes them through asyncio (one process per seed when running in parallel)
and aggregates their results
"""

import asyncio
import logging
import uuid
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

logger = logging.getLogger(__name__)


class RunStatus(Enum):
    PENDING = "pending"
    IN_PROGRESS = "in_progress"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class RunTask:
    seed: int
    command: str
    payload: Dict[str, Any] = field(default_factory=dict)
    id: str = field(default_factory=lambda: str(uuid.uuid4()))
    status: RunStatus = RunStatus.PENDING
    result: Optional[Dict[str, Any]] = None
    error: Optional[BaseException] = None
    created_at: datetime = field(default_factory=datetime.now)
    started_at: Optional[datetime] = None
    completed_at: Optional[datetime] = None

    def duration(self) -> Optional[float]:
        """Run duration in seconds"""
        if self.started_at and self.completed_at:
            return (self.completed_at - self.started_at).total_seconds()
        return None


RunFunction = Callable[[Dict[str, Any]], Dict[str, Any]]


class RunManager:
    """
    Executes RunTasks with at most `max_concurrent_runs` in flight. Runs are deterministic,
    so a failure is recorded on its task and never retried.
    """

    def __init__(self, max_concurrent_runs: int = 1):
        self.max_concurrent_runs = max(1, int(max_concurrent_runs))
        self.completed_runs: Dict[str, RunTask] = {}
        self.failed_runs: Dict[str, RunTask] = {}
        self.metrics = {
            "total_runs": 0,
            "avg_run_duration": 0.0,
            "error_rate": 0.0,
        }

    def _executor(self) -> Optional[Executor]:
        if self.max_concurrent_runs > 1:
            return ProcessPoolExecutor(max_workers=self.max_concurrent_runs)
        return None

    async def run_all(self, tasks: List[RunTask], run_fn: RunFunction) -> List[RunTask]:
        """Execute every task; the returned list keeps submission order"""
        logger.info(f"🚀 Starting {len(tasks)} run(s) with {self.max_concurrent_runs} worker(s)")
        semaphore = asyncio.Semaphore(self.max_concurrent_runs)
        executor = self._executor()
        try:
            await asyncio.gather(*(self._process(task, run_fn, semaphore, executor) for task in tasks))
        finally:
            if executor is not None:
                executor.shutdown(wait=True)
        logger.info(f"✅ Runs finished: {len(self.completed_runs)} completed, {len(self.failed_runs)} failed")
        return tasks

    async def _process(self, task: RunTask, run_fn: RunFunction, semaphore: asyncio.Semaphore,
                       executor: Optional[Executor]):
        async with semaphore:
            task.status = RunStatus.IN_PROGRESS
            task.started_at = datetime.now()
            logger.debug(f"🔄 Run {task.command} seed={task.seed} started")
            try:
                if executor is None:
                    task.result = run_fn(task.payload)
                else:
                    loop = asyncio.get_running_loop()
                    task.result = await loop.run_in_executor(executor, run_fn, task.payload)
                task.status = RunStatus.COMPLETED
                self.completed_runs[task.id] = task
            except Exception as e:
                task.status = RunStatus.FAILED
                task.error = e
                self.failed_runs[task.id] = task
                logger.error(f"❌ Run {task.command} seed={task.seed} failed: {e}")
            finally:
                task.completed_at = datetime.now()
                self._update_metrics(task)

    def _update_metrics(self, task: RunTask):
        self.metrics["total_runs"] += 1
        total = self.metrics["total_runs"]
        if task.duration() is not None:
            current = self.metrics["avg_run_duration"]
            self.metrics["avg_run_duration"] = (current * (total - 1) + task.duration()) / total
        self.metrics["error_rate"] = len(self.failed_runs) / total

    def first_failure(self, tasks: List[RunTask]) -> Optional[RunTask]:
        """Earliest failed task in submission order; its error decides the exit code"""
        return next((task for task in tasks if task.status is RunStatus.FAILED), None)

    def run(self, tasks: List[RunTask], run_fn: RunFunction) -> List[RunTask]:
        """Synchronous entry point used by the CLI"""
        return asyncio.run(self.run_all(tasks, run_fn))

    def get_status(self) -> Dict[str, Any]:
        return {
            "completed_runs": len(self.completed_runs),
            "failed_runs": len(self.failed_runs),
            "metrics": dict(self.metrics),
        }

