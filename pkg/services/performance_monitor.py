# services/performance_monitor.py
import time
import logging
from contextlib import contextmanager
from typing import Dict, Any, List
from threading import Thread, Lock

import psutil

logger = logging.getLogger(__name__)

# Operations recorded by the trainer and the synthesis service
TRACKED_OPERATIONS = ('train_step', 'validation', 'checkpoint', 'synthesize')


class PerformanceMonitor:
    """Resource usage and per-operation timings for training and synthesis"""

    def __init__(self, history: int = 100, sample_interval: float = 5.0):
        self.history = history
        self.sample_interval = sample_interval
        self.lock = Lock()
        self.monitoring_thread = None
        self.is_monitoring = False
        self.metrics = self._empty_metrics()

    @staticmethod
    def _empty_metrics() -> Dict[str, Any]:
        return {
            'cpu_usage': 0.0,
            'memory_usage': 0.0,
            'process_rss_mb': 0.0,
            'durations': {},
            'failures': {},
            'start_time': time.time()
        }

    def start_monitoring(self):
        """Sample CPU and memory on a daemon thread"""
        if self.is_monitoring:
            logger.warning("Performance monitoring already started")
            return

        self.is_monitoring = True
        self.monitoring_thread = Thread(target=self._monitor_resources, daemon=True)
        self.monitoring_thread.start()
        logger.info("Performance monitoring started")

    def stop_monitoring(self):
        self.is_monitoring = False
        if self.monitoring_thread:
            self.monitoring_thread.join(timeout=self.sample_interval + 2)
        logger.info("Performance monitoring stopped")

    def sample_resources(self):
        process = psutil.Process()
        with self.lock:
            self.metrics['cpu_usage'] = psutil.cpu_percent(interval=None)
            self.metrics['memory_usage'] = psutil.virtual_memory().percent
            self.metrics['process_rss_mb'] = process.memory_info().rss / 2 ** 20

    def _monitor_resources(self):
        while self.is_monitoring:
            try:
                self.sample_resources()
                time.sleep(self.sample_interval)
            except Exception as e:
                logger.error(f"Error in resource monitoring: {str(e)}")
                time.sleep(2 * self.sample_interval)

    def record_operation(self, operation_name: str, duration: float, success: bool):
        with self.lock:
            durations = self.metrics['durations'].setdefault(operation_name, [])
            durations.append(duration)
            if len(durations) > self.history:
                del durations[:-self.history]

            if not success:
                self.metrics['failures'][operation_name] = self.metrics['failures'].get(operation_name, 0) + 1

    @contextmanager
    def track(self, operation_name: str):
        """Time the enclosed block; an exception counts as a failure and propagates"""
        start = time.perf_counter()
        success = False
        try:
            yield
            success = True
        finally:
            self.record_operation(operation_name, time.perf_counter() - start, success)

    def get_performance_report(self) -> Dict[str, Any]:
        with self.lock:
            return {
                'system_metrics': {
                    'cpu_usage': self.metrics['cpu_usage'],
                    'memory_usage': self.metrics['memory_usage'],
                    'process_rss_mb': self.metrics['process_rss_mb'],
                    'uptime': time.time() - self.metrics['start_time']
                },
                'performance_metrics': {
                    'average_duration': self._average_duration(),
                    'error_rate': self._error_rate(),
                    'throughput': self._throughput()
                },
                'operation_metrics': {
                    'durations': self._operation_stats(),
                    'failures': self.metrics['failures'].copy()
                }
            }

    def _all_durations(self) -> List[float]:
        return [d for durations in self.metrics['durations'].values() for d in durations]

    def _average_duration(self) -> float:
        durations = self._all_durations()
        return sum(durations) / len(durations) if durations else 0.0

    def _error_rate(self) -> float:
        total = len(self._all_durations())
        return sum(self.metrics['failures'].values()) / total if total > 0 else 0.0

    def _throughput(self) -> float:
        uptime = time.time() - self.metrics['start_time']
        return len(self._all_durations()) / uptime if uptime > 0 else 0.0

    def _operation_stats(self) -> Dict[str, Dict[str, float]]:
        stats = {}
        for operation_name, durations in self.metrics['durations'].items():
            if durations:
                stats[operation_name] = {
                    'count': len(durations),
                    'average': sum(durations) / len(durations),
                    'min': min(durations),
                    'max': max(durations),
                    'latest': durations[-1]
                }
        return stats

    def get_health_status(self) -> Dict[str, Any]:
        with self.lock:
            cpu_usage = self.metrics['cpu_usage']
            memory_usage = self.metrics['memory_usage']
            error_rate = self._error_rate()

            if memory_usage > 90 or error_rate > 0.1:
                health_status = 'critical'
            elif memory_usage > 75 or error_rate > 0.05:
                health_status = 'warning'
            else:
                health_status = 'healthy'

            return {
                'status': health_status,
                'cpu_usage': cpu_usage,
                'memory_usage': memory_usage,
                'error_rate': error_rate,
                'uptime': time.time() - self.metrics['start_time']
            }

    def reset_metrics(self):
        with self.lock:
            self.metrics = self._empty_metrics()
        logger.info("Performance metrics reset")
