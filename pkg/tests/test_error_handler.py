# tests/test_error_handler.py
import json
import os

import pytest

from services.error_handler import (
    ArtifactIOError, DuetGenError, ErrorHandler, FeatureError, NonFiniteError, TokenizationError,
)
from services.performance_monitor import PerformanceMonitor


class TestErrorHandler:
    def test_retry_recovers_from_transient_io_errors(self):
        calls = []

        @ErrorHandler().retry_on_error(max_retries=3, delay=0.0)
        def flaky():
            calls.append(1)
            if len(calls) < 3:
                raise OSError('disk busy')
            return 'ok'

        assert flaky() == 'ok'
        assert len(calls) == 3

    def test_retry_gives_up_and_reraises(self):
        calls = []

        @ErrorHandler().retry_on_error(max_retries=2, delay=0.0)
        def broken():
            calls.append(1)
            raise ArtifactIOError('read-only', path='/x')

        with pytest.raises(ArtifactIOError):
            broken()
        assert len(calls) == 2

    def test_other_errors_are_not_retried(self):
        calls = []

        @ErrorHandler().retry_on_error(max_retries=3, delay=0.0)
        def invalid():
            calls.append(1)
            raise FeatureError('bad frames')

        with pytest.raises(FeatureError):
            invalid()
        assert len(calls) == 1

    def test_training_snapshot(self, tmp_path):
        saved = []
        path = ErrorHandler().handle_training_error(NonFiniteError('loss is nan', step=7), {'step': 7, 'lr': 1e-4},
                                                    str(tmp_path), save_params=saved.append)

        assert path == os.path.join(str(tmp_path), 'diverged-step-7')
        with open(os.path.join(path, 'diagnostics.json'), encoding='utf-8') as file:
            info = json.load(file)
        assert info['error_type'] == 'NonFiniteError'
        assert info['context'] == {'step': 7, 'lr': 1e-4}
        assert saved == [os.path.join(path, 'params.zip')]

    def test_snapshot_survives_failed_parameter_save(self, tmp_path):
        def fail(_path):
            raise OSError('no space left')

        path = ErrorHandler().handle_training_error(ValueError('x'), {'step': 1}, str(tmp_path), save_params=fail)
        assert os.path.exists(os.path.join(path, 'diagnostics.json'))


def test_error_hierarchy():
    error = TokenizationError('bad text', offenders=['z', 'a', 'z'])
    assert error.offenders == ['a', 'z']
    assert isinstance(error, (DuetGenError, ValueError))
    assert isinstance(ArtifactIOError('x'), OSError)
    assert NonFiniteError('x', step=3).step == 3


class TestPerformanceMonitor:
    def test_track_records_durations_and_failures(self):
        monitor = PerformanceMonitor()
        with monitor.track('synthesize'):
            pass
        with pytest.raises(RuntimeError):
            with monitor.track('synthesize'):
                raise RuntimeError('boom')

        report = monitor.get_performance_report()
        assert report['operation_metrics']['durations']['synthesize']['count'] == 2
        assert report['operation_metrics']['failures'] == {'synthesize': 1}
        assert report['performance_metrics']['error_rate'] == 0.5

    def test_history_is_bounded(self):
        monitor = PerformanceMonitor(history=3)
        for duration in range(5):
            monitor.record_operation('train_step', float(duration), True)
        stats = monitor.get_performance_report()['operation_metrics']['durations']['train_step']
        assert stats['count'] == 3
        assert stats['min'] == 2.0 and stats['latest'] == 4.0

    def test_health_follows_error_rate(self):
        monitor = PerformanceMonitor()
        assert monitor.get_health_status()['status'] == 'healthy'
        for success in (True, False):
            monitor.record_operation('synthesize', 0.1, success)
        assert monitor.get_health_status()['status'] == 'critical'

        monitor.reset_metrics()
        assert monitor.get_performance_report()['operation_metrics']['durations'] == {}

    def test_resource_sample(self):
        monitor = PerformanceMonitor()
        monitor.sample_resources()
        assert monitor.get_performance_report()['system_metrics']['process_rss_mb'] > 0
