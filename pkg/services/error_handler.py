# services/error_handler.py
import json
import logging
import os
import time
from typing import Dict, Any, Optional, Callable, Sequence
from functools import wraps

logger = logging.getLogger(__name__)


class DuetGenError(Exception):
    """Base class for all DuetGen errors"""


class ConfigurationError(DuetGenError):
    """Invalid or inconsistent configuration"""


class FeatureError(DuetGenError, ValueError):
    """Invalid acoustic or motion features"""


class TokenizationError(DuetGenError, ValueError):
    """Text that cannot be mapped onto the symbol inventory"""

    def __init__(self, message: str, offenders: Sequence[str] = ()):
        super().__init__(message)
        self.offenders = sorted(set(offenders))


class AlignmentError(DuetGenError, ValueError):
    """Alignment or duration problem"""


class CheckpointError(DuetGenError):
    """Unreadable, incompatible or unwritable checkpoint"""


class ArtifactIOError(DuetGenError, OSError):
    """Reading or writing a feature, pose or report file failed"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class NonFiniteError(DuetGenError):
    """A sampler state became NaN or infinite"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class TrainingDivergedError(DuetGenError):
    """Training produced a non-finite loss"""

    def __init__(self, message: str, snapshot_path: Optional[str] = None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


class EvaluationError(DuetGenError, ValueError):
    """Malformed listening-test plan or response table"""


class ErrorHandler:
    """Centralized error handling for the DuetGen system"""

    def __init__(self, config_manager=None):
        self.config_manager = config_manager
        self.logger = logging.getLogger(__name__)

    def handle_training_error(self, error: Exception, context: Dict[str, Any],
                              snapshot_dir: str, save_params: Optional[Callable[[str], None]] = None) -> str:
        """Write a diagnostic snapshot for a failed training step and return its directory"""
        step = context.get('step', 'unknown')
        snapshot_path = os.path.join(snapshot_dir, f"diverged-step-{step}")
        os.makedirs(snapshot_path, exist_ok=True)

        error_info = self.log_error_with_context(error, context)
        with open(os.path.join(snapshot_path, 'diagnostics.json'), 'w', encoding='utf-8') as file:
            json.dump(error_info, file, indent=2, default=str)

        if save_params is not None:
            try:
                save_params(os.path.join(snapshot_path, 'params.zip'))
            except Exception as e:
                self.logger.error(f"Failed to save parameter snapshot: {str(e)}")

        self.logger.error(f"Training diverged at step {step}; snapshot written to {snapshot_path}")
        return snapshot_path

    def retry_on_error(self, max_retries: int = 3, delay: float = 1.0,
                       retry_on: tuple = (OSError,)):
        """Decorator for retrying operations on error"""
        def decorator(func: Callable) -> Callable:
            @wraps(func)
            def wrapper(*args, **kwargs):
                last_exception = None

                for attempt in range(max_retries):
                    try:
                        return func(*args, **kwargs)
                    except retry_on as e:
                        last_exception = e
                        self.logger.warning(
                            f"Attempt {attempt + 1} failed for {func.__name__}: {str(e)}"
                        )

                        if attempt < max_retries - 1:
                            time.sleep(delay * (2 ** attempt))  # Exponential backoff

                # All retries failed
                self.logger.error(
                    f"All {max_retries} attempts failed for {func.__name__}: {str(last_exception)}"
                )
                raise last_exception

            return wrapper
        return decorator

    def log_error_with_context(self, error: Exception, context: Dict[str, Any]) -> Dict[str, Any]:
        """Log error with additional context"""
        error_context = {
            'error_type': type(error).__name__,
            'error_message': str(error),
            'context': context,
            'timestamp': time.time()
        }

        self.logger.error(f"Error with context: {error_context}")
        return error_context

