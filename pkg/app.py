# app.py - HTTP service for DuetGen speech and gesture synthesis
import json
import re
import time
import logging
from threading import Lock
from typing import Optional

from flask import Flask, request, jsonify
from pydantic import ValidationError
from werkzeug.exceptions import HTTPException

from config.config_manager import ConfigManager
from services.banner import display_banner
from services.error_handler import CheckpointError, DuetGenError, ErrorHandler
from services.log_setup import setup_logger
from services.performance_monitor import PerformanceMonitor
from services.synthesizer import SynthesisRequest, Synthesizer, result_summary

logger = logging.getLogger(__name__)

_STEM_PATTERN = re.compile(r'^[A-Za-z0-9_.-]{1,64}$')


class SynthesisService:
    """Holds the loaded checkpoint and the status of the last request"""

    def __init__(self, config_manager: ConfigManager, monitor: PerformanceMonitor,
                 synthesizer: Optional[Synthesizer] = None):
        self.config_manager = config_manager
        self.monitor = monitor
        self.synthesizer = synthesizer
        self.checkpoint = config_manager.get_service_config('checkpoint')
        self.lock = Lock()
        self.status = {
            'checkpoint': self.checkpoint if synthesizer is None else 'preloaded',
            'requests': 0,
            'last_request': None,
            'last_result': None,
            'error': None
        }

    def get_synthesizer(self) -> Synthesizer:
        with self.lock:
            if self.synthesizer is None:
                if ConfigManager.is_unset(self.checkpoint):
                    raise CheckpointError("No checkpoint configured; set DUETGEN_CHECKPOINT")
                self.synthesizer = Synthesizer.from_checkpoint(self.checkpoint, monitor=self.monitor)
            return self.synthesizer

    def get_status(self):
        with self.lock:
            return dict(self.status)

    def record(self, **values):
        with self.lock:
            self.status.update(values)


def create_app(config_manager: Optional[ConfigManager] = None, synthesizer: Optional[Synthesizer] = None,
               output_dir: Optional[str] = None, monitor: Optional[PerformanceMonitor] = None,
               start_monitoring: bool = False) -> Flask:
    """Application factory"""
    config_manager = config_manager or ConfigManager()
    app = Flask(__name__)

    error_handler = ErrorHandler(config_manager)
    performance_monitor = monitor or PerformanceMonitor()
    if synthesizer is not None:
        synthesizer.monitor = performance_monitor
    service = SynthesisService(config_manager, performance_monitor, synthesizer)
    output_dir = output_dir or config_manager.get_service_config('output_dir', 'outputs')
    version = config_manager.get_system_config('version', 'v0.1.0')

    app.extensions['duetgen'] = service
    if start_monitoring:
        performance_monitor.start_monitoring()

    @app.route('/api/synthesize', methods=['POST'])
    def synthesize():
        """Synthesize mel and pose for the posted text"""
        data = request.get_json(silent=True)
        if not data or not isinstance(data, dict):
            logger.warning("Synthesis request without a JSON object body")
            return jsonify({"error": "No data provided"}), 400

        stem = str(data.pop('stem', 'utterance'))
        if not _STEM_PATTERN.match(stem):
            return jsonify({"error": "stem may only contain letters, digits, '.', '_' and '-'"}), 400
        data.pop('checkpoint', None)

        try:
            synthesis_request = SynthesisRequest.from_config(config_manager, **data)
        except ValidationError as e:
            logger.warning(f"Invalid synthesis request: {e}")
            return jsonify({"error": "Invalid request", "details": json.loads(e.json(include_url=False))}), 400

        service.record(last_request=synthesis_request.model_dump(), requests=service.get_status()['requests'] + 1)
        try:
            synthesizer_instance = service.get_synthesizer()
            summaries = []
            for result in synthesizer_instance.synthesize_many(synthesis_request):
                name = stem if synthesis_request.num_samples == 1 else f"{stem}-seed{result.seed}"
                paths = synthesizer_instance.write_outputs(result, output_dir, name)
                summaries.append(result_summary(result, paths))
        except CheckpointError as e:
            logger.error(f"Checkpoint unavailable: {str(e)}")
            service.record(error=str(e))
            return jsonify({"error": str(e)}), 503
        except (DuetGenError, ValueError) as e:
            logger.warning(f"Synthesis rejected: {str(e)}")
            service.record(error=str(e))
            return jsonify({"error": str(e)}), 400

        service.record(last_result=summaries[-1], error=None)
        return jsonify({"status": "success", "results": summaries})

    @app.route('/api/status', methods=['GET'])
    def get_status():
        try:
            return jsonify({
                "service_status": service.get_status(),
                "performance": performance_monitor.get_performance_report(),
                "health": performance_monitor.get_health_status(),
                "timestamp": time.time()
            })
        except Exception as e:
            logger.error(f"Error getting status: {str(e)}", exc_info=True)
            return jsonify({"error": str(e)}), 500

    @app.route('/api/config', methods=['GET'])
    def get_config():
        config = config_manager.get_all_config()
        config['service'] = dict(config['service'], checkpoint=service.get_status()["checkpoint"])
        return jsonify(config)

    @app.errorhandler(404)
    def not_found(error):
        logger.warning(f"404 error: {request.url}")
        return jsonify({"error": "Not found"}), 404

    @app.errorhandler(Exception)
    def handle_exception(error):
        if isinstance(error, HTTPException):
            return jsonify({"error": error.description}), error.code
        error_handler.log_error_with_context(error, {'route': request.path})
        logger.error(f'Unhandled exception: {str(error)}', exc_info=True)
        return jsonify({"error": "Internal server error"}), 500

    @app.route('/health')
    def health_check():
        return jsonify({
            "status": "healthy",
            "timestamp": time.time(),
            "version": version,
            "health": performance_monitor.get_health_status()
        })

    @app.route('/metrics')
    def get_metrics():
        return jsonify(performance_monitor.get_performance_report())

    return app


if __name__ == '__main__':
    config_manager = ConfigManager()
    setup_logger(config_manager)
    display_banner(config_manager.get_system_config('version', 'v0.1.0'))
    app = create_app(config_manager, start_monitoring=True)
    logger.info('Starting DuetGen synthesis service...')
    app.run(
        debug=config_manager.get_service_config('debug', False),
        host=config_manager.get_service_config('host', '0.0.0.0'),
        port=int(config_manager.get_service_config('port', 5000))
    )
