# app/utils/error_handler.py
# Centralised error handling for the toolkit
# Provides the logging setup, the exception hierarchy and a decorator mapping
# failures of CLI commands onto process exit codes

from functools import wraps
import logging
import sys

import click


# === EXIT CODES ===
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def setup_logging(config):
    """
    Configure application logging

    Writes every record both to a UTF-8 log file and to the console.

    Args:
        config: configuration object (LOG_LEVEL, LOG_FILE)

    Returns:
        logging.Logger: logger of this module
    """
    log_file = config.LOG_FILE
    log_file.parent.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file, encoding='utf-8'),
            logging.StreamHandler(),
        ]
    )

    # PIL and matplotlib are chatty at DEBUG level
    for noisy in ('PIL', 'matplotlib'):
        logging.getLogger(noisy).setLevel(logging.WARNING)

    return logging.getLogger(__name__)


def handle_errors(stage="general"):
    """
    Decorator giving every CLI command the same failure behaviour

    Validation problems exit with code 2, numerical failures with code 3 and
    anything else with code 1. The full stack trace always goes to the log.

    Args:
        stage (str): name used in the log records (e.g. "distill")

    Usage:
        @handle_errors(stage="stage1")
        def stage1_command(...):
            ...
    """
    def decorator(f):
        @wraps(f)
        def decorated_function(*args, **kwargs):
            logger = logging.getLogger(f.__module__)
            try:
                return f(*args, **kwargs)

            except DataValidationError as e:
                logger.error(f"[{stage}] validation error: {e.message}")
                click.echo(f"error: {e.message}", err=True)
                sys.exit(EXIT_VALIDATION)

            except NumericalError as e:
                logger.error(f"[{stage}] numerical failure: {e.message} {e.diagnostics}")
                click.echo(f"numerical failure: {e.message}", err=True)
                sys.exit(EXIT_NUMERICAL)

            except FileNotFoundError as e:
                logger.error(f"[{stage}] missing file: {e}")
                click.echo(f"missing file: {e}", err=True)
                sys.exit(EXIT_VALIDATION)

            except click.exceptions.Exit:
                raise

            except Exception as e:
                logger.error(f"[{stage}] unexpected error: {e}", exc_info=True)
                click.echo(f"unexpected error: {e}", err=True)
                sys.exit(EXIT_FAILURE)

        return decorated_function
    return decorator


# === APPLICATION EXCEPTIONS ===

class AppError(Exception):
    """
    Base exception of the toolkit

    Carries a human readable message and an optional short error code.
    """
    def __init__(self, message, error_code=None):
        self.message = message
        self.error_code = error_code
        super().__init__(self.message)


class DataValidationError(AppError):
    """
    Invalid input: bad config file, out-of-range argument, wrong shape
    """
    pass


class DataProcessingError(AppError):
    """
    Failure while reading, writing or converting artifacts
    """
    pass


class NumericalError(AppError):
    """
    NaN, divergence or another numerical failure during training

    The diagnostics dict is written next to the partial results.
    """
    def __init__(self, message, diagnostics=None, error_code="numerical"):
        super().__init__(message, error_code)
        self.diagnostics = diagnostics or {}


class DegenerateCameraError(DataValidationError):
    """Every primitive lies behind a camera"""
    pass


class UnknownEditCodeError(DataValidationError):
    """Edit code absent from the registry"""
    pass


class ScheduleRangeError(DataValidationError):
    """Step index or step range outside the schedule"""
    pass


class ShapeMismatchError(DataValidationError):
    """Array shapes inconsistent with each other or with the model config"""
    pass


class LoRAError(DataValidationError):
    """No layer matches the adapter filter, or the rank is too large"""
    pass


class SingularCovarianceError(NumericalError):
    """Generator covariance W·Wᵀ is not invertible"""
    pass
