#!/usr/bin/env python3
"""
Structured Experiment Logging for the CQural Lab
Queues log entries to a writer thread and keeps error and timing metrics per component
"""

import json
import logging
import os
import sys
import threading
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from queue import Empty, Queue
from typing import Any, Dict, List, Optional


class LogLevel(Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


_LEVEL_VALUES = {
    LogLevel.DEBUG: 10,
    LogLevel.INFO: 20,
    LogLevel.WARNING: 30,
    LogLevel.ERROR: 40,
    LogLevel.CRITICAL: 50,
}


class ComponentType(Enum):
    TENSOR = "tensor"
    QUANTUM = "quantum"
    DATA = "data"
    MODEL = "model"
    TRAINER = "trainer"
    EXPLAIN = "explain"
    REPORT = "report"
    SYSTEM = "system"


@dataclass
class LogEntry:
    timestamp: datetime
    level: LogLevel
    component: ComponentType
    message: str
    run_id: Optional[str] = None
    seed: Optional[int] = None
    epoch: Optional[int] = None
    duration: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    exception: Optional[str] = None
    stack_trace: Optional[str] = None


@dataclass
class ErrorMetrics:
    total_errors: int = 0
    errors_by_component: Dict[str, int] = field(default_factory=dict)
    last_error: Optional[datetime] = None


@dataclass
class TimingMetrics:
    total_operations: int = 0
    avg_operation_time: float = 0.0
    operations_by_component: Dict[str, int] = field(default_factory=dict)
    time_by_component: Dict[str, float] = field(default_factory=dict)
    slowest_operation: Optional[LogEntry] = None


class ExperimentLogger:
    """Structured logger: entries go through a queue to a daemon writer thread"""

    def __init__(self,
                 name: str = "cqural_lab",
                 log_level: LogLevel = LogLevel.INFO,
                 log_file: Optional[str] = None,
                 max_log_entries: int = 10000,
                 enable_console: bool = True):
        self.name = name
        self.log_level = log_level
        self.log_file = log_file
        self.max_log_entries = max_log_entries
        self.enable_console = enable_console

        self.log_entries: List[LogEntry] = []
        self.log_queue: Queue = Queue()

        self.error_metrics = ErrorMetrics()
        self.timing_metrics = TimingMetrics()

        self.running = False
        self.log_thread: Optional[threading.Thread] = None
        self.lock = threading.Lock()

        self.logger = logging.getLogger(name)
        self.logger.setLevel(getattr(logging, log_level.value))
        self._setup_handlers()

    def _setup_handlers(self):
        self.logger.handlers.clear()
        self.logger.propagate = False
        formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

        if self.enable_console:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setFormatter(formatter)
            self.logger.addHandler(console_handler)

        if self.log_file:
            file_handler = logging.FileHandler(self.log_file)
            file_handler.setFormatter(formatter)
            self.logger.addHandler(file_handler)

    def start(self):
        """Start the writer thread"""
        if self.running:
            return
        self.running = True
        self.log_thread = threading.Thread(target=self._log_worker, daemon=True)
        self.log_thread.start()

    def stop(self):
        """Drain the queue and stop the writer thread"""
        if not self.running:
            return
        self.running = False
        if self.log_thread:
            self.log_thread.join(timeout=5)
        self._process_queue(limit=None)

    def _log_worker(self):
        while self.running:
            try:
                self._process_queue()
                time.sleep(0.05)
            except Exception as e:
                print(f"ERROR in log worker: {e}", file=sys.stderr)

    def _process_queue(self, limit: Optional[int] = 100):
        processed = 0
        while limit is None or processed < limit:
            try:
                entry = self.log_queue.get_nowait()
            except Empty:
                break
            self._write_log_entry(entry)
            processed += 1

    def _write_log_entry(self, entry: LogEntry):
        with self.lock:
            self.log_entries.append(entry)
            if len(self.log_entries) > self.max_log_entries:
                self.log_entries.pop(0)
            self._update_metrics(entry)
            self.logger.log(getattr(logging, entry.level.value), self._format_message(entry))

    def _update_metrics(self, entry: LogEntry):
        component_name = entry.component.value

        if entry.duration is not None:
            timing = self.timing_metrics
            timing.total_operations += 1
            timing.avg_operation_time += (entry.duration - timing.avg_operation_time) / timing.total_operations
            timing.operations_by_component[component_name] = timing.operations_by_component.get(component_name, 0) + 1
            timing.time_by_component[component_name] = timing.time_by_component.get(component_name, 0.0) + entry.duration
            if timing.slowest_operation is None or entry.duration > timing.slowest_operation.duration:
                timing.slowest_operation = entry

        if entry.level in (LogLevel.ERROR, LogLevel.CRITICAL):
            errors = self.error_metrics
            errors.total_errors += 1
            errors.last_error = entry.timestamp
            errors.errors_by_component[component_name] = errors.errors_by_component.get(component_name, 0) + 1

    def _format_message(self, entry: LogEntry) -> str:
        parts = [entry.message, f"[{entry.component.value}]"]
        if entry.run_id:
            parts.append(f"[run:{entry.run_id}]")
        if entry.seed is not None:
            parts.append(f"[seed:{entry.seed}]")
        if entry.epoch is not None:
            parts.append(f"[epoch:{entry.epoch}]")
        if entry.duration is not None:
            parts.append(f"[{entry.duration:.3f}s]")
        if entry.metadata:
            parts.append(f"[metadata:{json.dumps(entry.metadata, sort_keys=True, default=str)}]")
        return " ".join(parts)

    def _should_log(self, level: LogLevel) -> bool:
        return _LEVEL_VALUES[level] >= _LEVEL_VALUES[self.log_level]

    def _log(self,
             level: LogLevel,
             component: ComponentType,
             message: str,
             run_id: Optional[str] = None,
             seed: Optional[int] = None,
             epoch: Optional[int] = None,
             duration: Optional[float] = None,
             metadata: Optional[Dict[str, Any]] = None,
             exception: Optional[BaseException] = None):
        if not self._should_log(level):
            return

        entry = LogEntry(
            timestamp=datetime.now(),
            level=level,
            component=component,
            message=message,
            run_id=run_id,
            seed=seed,
            epoch=epoch,
            duration=duration,
            metadata=metadata or {},
            exception=str(exception) if exception else None,
            stack_trace="".join(traceback.format_exception(type(exception), exception, exception.__traceback__))
            if exception else None,
        )

        if self.running:
            self.log_queue.put(entry)
        else:
            self._write_log_entry(entry)

    def debug(self, component: ComponentType, message: str, **kwargs):
        self._log(LogLevel.DEBUG, component, message, **kwargs)

    def info(self, component: ComponentType, message: str, **kwargs):
        self._log(LogLevel.INFO, component, message, **kwargs)

    def warning(self, component: ComponentType, message: str, **kwargs):
        self._log(LogLevel.WARNING, component, message, **kwargs)

    def error(self, component: ComponentType, message: str, **kwargs):
        self._log(LogLevel.ERROR, component, message, **kwargs)

    def critical(self, component: ComponentType, message: str, **kwargs):
        self._log(LogLevel.CRITICAL, component, message, **kwargs)

    def log_operation(self,
                      component: ComponentType,
                      operation: str,
                      start_time: float,
                      success: bool = True,
                      **kwargs):
        """Log an operation with its duration"""
        duration = time.perf_counter() - start_time
        if success:
            self.info(component, f"✅ {operation} done", duration=duration, **kwargs)
        else:
            self.error(component, f"❌ {operation} failed", duration=duration, **kwargs)

    def get_metrics(self) -> Dict[str, Any]:
        """Current error and timing metrics"""
        with self.lock:
            slowest = self.timing_metrics.slowest_operation
            return {
                'error_metrics': {
                    'total_errors': self.error_metrics.total_errors,
                    'errors_by_component': dict(self.error_metrics.errors_by_component),
                    'last_error': self.error_metrics.last_error.isoformat() if self.error_metrics.last_error else None,
                },
                'timing_metrics': {
                    'total_operations': self.timing_metrics.total_operations,
                    'avg_operation_time': self.timing_metrics.avg_operation_time,
                    'operations_by_component': dict(self.timing_metrics.operations_by_component),
                    'time_by_component': dict(self.timing_metrics.time_by_component),
                    'slowest_operation': slowest.message if slowest else None,
                },
                'log_stats': {
                    'total_entries': len(self.log_entries),
                    'queue_size': self.log_queue.qsize(),
                    'running': self.running,
                },
            }

    def get_recent_logs(self,
                        component: Optional[ComponentType] = None,
                        level: Optional[LogLevel] = None,
                        limit: int = 100) -> List[Dict[str, Any]]:
        with self.lock:
            entries = self.log_entries[-limit:]
            if component:
                entries = [e for e in entries if e.component == component]
            if level:
                entries = [e for e in entries if e.level == level]
            return [
                {
                    'timestamp': entry.timestamp.isoformat(),
                    'level': entry.level.value,
                    'component': entry.component.value,
                    'message': entry.message,
                    'run_id': entry.run_id,
                    'seed': entry.seed,
                    'epoch': entry.epoch,
                    'duration': entry.duration,
                    'metadata': entry.metadata,
                    'exception': entry.exception,
                }
                for entry in entries
            ]


_experiment_logger_instance: Optional[ExperimentLogger] = None
_instance_lock = threading.Lock()


def get_experiment_logger() -> ExperimentLogger:
    """Get or create the process-wide experiment logger"""
    global _experiment_logger_instance
    with _instance_lock:
        if _experiment_logger_instance is None:
            level_name = os.getenv("CQURAL_LOG_LEVEL", "INFO").upper()
            level = LogLevel[level_name] if level_name in LogLevel.__members__ else LogLevel.INFO
            _experiment_logger_instance = ExperimentLogger(
                log_level=level,
                log_file=os.getenv("CQURAL_LOG_FILE") or None,
            )
            _experiment_logger_instance.start()
        return _experiment_logger_instance


class LoggedOperation:
    """Context manager that logs an operation with its duration"""

    def __init__(self,
                 component: ComponentType,
                 operation: str,
                 logger: Optional[ExperimentLogger] = None,
                 **kwargs):
        self.component = component
        self.operation = operation
        self.logger = logger or get_experiment_logger()
        self.kwargs = kwargs
        self.start_time = 0.0

    def __enter__(self):
        self.start_time = time.perf_counter()
        self.logger.debug(self.component, f"▶️ {self.operation}", **self.kwargs)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is None:
            self.logger.log_operation(self.component, self.operation, self.start_time, success=True, **self.kwargs)
        else:
            self.logger.log_operation(self.component, self.operation, self.start_time, success=False,
                                      exception=exc_val, **self.kwargs)
        return False
