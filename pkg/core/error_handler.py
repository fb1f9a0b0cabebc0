"""
Error handling and logging module for the DC-QFA pipeline
"""
import logging
import os
import sys
import traceback
from datetime import datetime
from functools import wraps
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)

DEFAULT_LOG_DIR = 'logs'


def setup_logging(log_dir: Optional[str] = None, level: int = logging.INFO) -> str:
    """
    Configure root logging with a dated file handler plus console output.
    Returns the log file path.
    """
    log_dir = log_dir or os.getenv('DCQFA_LOG_DIR', DEFAULT_LOG_DIR)
    os.makedirs(log_dir, exist_ok=True)
    log_file = os.path.join(log_dir, f'dcqfa_{datetime.now().strftime("%Y%m%d")}.log')

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler()
        ],
        force=True
    )
    return log_file


class DCQFAError(Exception):
    """Base exception carrying a machine-readable error code"""
    user_error = False
    default_code = "INTERNAL_ERROR"

    def __init__(self, message: str, error_code: str = None, details: Dict = None):
        self.message = message
        self.error_code = error_code or self.default_code
        self.details = details or {}
        super().__init__(self.message)


class ConfigError(DCQFAError):
    """Invalid run configuration, override or search-space declaration"""
    user_error = True
    default_code = "CONFIG_INVALID"


class ProfileError(DCQFAError):
    """Device LUT failed schema, completeness or monotonicity checks"""
    user_error = True
    default_code = "PROFILE_INVALID"


class ConfigSpaceError(DCQFAError):
    """Genome or configuration outside the declared search space"""
    user_error = True
    default_code = "GENOME_OUT_OF_RANGE"


class CheckpointError(DCQFAError):
    """Checkpoint could not be read or does not match the run"""
    user_error = True
    default_code = "CHECKPOINT_INVALID"


class DatasetError(DCQFAError):
    """Demonstration file missing or malformed"""
    user_error = True
    default_code = "DEMOS_INVALID"


class QuantizerError(DCQFAError):
    """Quantizer used before calibration"""
    default_code = "QUANTIZER_UNCALIBRATED"


class NumericsError(DCQFAError):
    """Shape mismatch or misuse of the autodiff tape"""
    default_code = "NUMERICS_ERROR"


class NonFiniteError(NumericsError):
    """NaN or Inf produced by a primitive"""
    default_code = "NON_FINITE"


class EnvDivergenceError(DCQFAError):
    """Closed-loop rollout produced non-finite actions or states"""
    default_code = "ENV_DIVERGED"


class TrainingError(DCQFAError):
    """Training step aborted"""
    default_code = "TRAINING_ABORTED"


class EvaluationError(DCQFAError):
    """Evaluation request cannot be served"""
    user_error = True
    default_code = "EVAL_INVALID"


class SearchError(DCQFAError):
    """Search or deployment selection failed"""
    user_error = True
    default_code = "SEARCH_FAILED"


ERROR_MESSAGES = {
    "CONFIG_INVALID": "Run configuration is invalid.",
    "USAGE_ERROR": "Command line could not be parsed.",
    "PROFILE_INVALID": "Device profile failed validation.",
    "PROFILE_INCOMPLETE": "Device profile is missing LUT entries for reachable block keys.",
    "PROFILE_NOT_MONOTONE": "Device profile LUT is not monotone in r, h or bit-width.",
    "GENOME_OUT_OF_RANGE": "Genome index outside its gene menu.",
    "CHECKPOINT_INVALID": "Checkpoint file is malformed.",
    "CHECKPOINT_MISMATCH": "Checkpoint was written for a different search space.",
    "DEMOS_INVALID": "Demonstration file is malformed.",
    "ARTIFACT_MISSING": "A prerequisite artifact has not been produced yet.",
    "QUANTIZER_UNCALIBRATED": "A quantizer was used before calibration.",
    "NON_FINITE": "A numeric operation produced NaN or Inf.",
    "ENV_DIVERGED": "Closed-loop rollout diverged.",
    "TRAINING_ABORTED": "Training step aborted.",
    "EVAL_INVALID": "Evaluation request is invalid.",
    "SEARCH_FAILED": "Search failed.",
    "EMPTY_FRONT": "Pareto front is empty.",
}

RECOVERY_SUGGESTIONS = {
    "CONFIG_INVALID": "Check key names and value types against data/run_config.json.",
    "USAGE_ERROR": "Run `python app.py --help` or `python app.py <command> --help` for the accepted options.",
    "PROFILE_INCOMPLETE": "Regenerate the profile with profile-synth for the current search space.",
    "PROFILE_NOT_MONOTONE": "Fix the offending LUT keys so latency/memory never drop as r, h or bits grow.",
    "CHECKPOINT_MISMATCH": "Use the run config the checkpoint was trained with.",
    "ARTIFACT_MISSING": "Run the earlier pipeline stage first (gen-demos, profile-synth, train, search).",
    "NON_FINITE": "Lower the learning rate or inspect the last logged metrics row.",
    "TRAINING_ABORTED": "Inspect the logged diagnostics and lower the learning rate.",
}


def describe_error(error: DCQFAError) -> str:
    """Human-readable description with a recovery hint when one exists"""
    text = ERROR_MESSAGES.get(error.error_code, error.message)
    hint = RECOVERY_SUGGESTIONS.get(error.error_code)
    return f"{text} {hint}" if hint else text


def format_error_line(error: BaseException) -> str:
    """Single machine-parsable line for stderr"""
    code = getattr(error, 'error_code', 'INTERNAL_ERROR')
    message = str(error).replace('"', "'").replace('\n', ' ')
    return f'error code={code} type={type(error).__name__} message="{message}"'


def exit_code_for(error: BaseException) -> int:
    """0 ok, 1 user error, 2 internal error"""
    if isinstance(error, DCQFAError) and error.user_error:
        return 1
    return 2


def cli_error_handler(func):
    """
    Decorator for CLI commands: logs the failure and exits with 1 (user error)
    or 2 (internal error) after one machine-parsable stderr line
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except DCQFAError as e:
            logger.error(f"{type(e).__name__} in {func.__name__}: {e.message} details={e.details}")
            logger.info(describe_error(e))
            print(format_error_line(e), file=sys.stderr)
            sys.exit(exit_code_for(e))
        except Exception as e:
            logger.error(f"Unexpected error in {func.__name__}: {str(e)}\n{traceback.format_exc()}")
            print(format_error_line(e), file=sys.stderr)
            sys.exit(2)
    return wrapper


def safe_file_operation(operation, *args, error_cls=DatasetError, **kwargs):
    """
    Safely perform file operations with error handling
    """
    try:
        return operation(*args, **kwargs)
    except FileNotFoundError as e:
        raise error_cls(f"File not found: {e.filename}", error_code="ARTIFACT_MISSING")
    except PermissionError:
        raise error_cls("Permission denied accessing file")
    except IOError as e:
        raise error_cls(f"File operation failed: {str(e)}")


def log_activity(activity_type: str, details: Any):
    """
    Log pipeline activities
    """
    logger.info(f"Activity: {activity_type} - {details}")


__all__ = [
    'setup_logging',
    'DCQFAError',
    'ConfigError',
    'ProfileError',
    'ConfigSpaceError',
    'CheckpointError',
    'DatasetError',
    'QuantizerError',
    'NumericsError',
    'NonFiniteError',
    'EnvDivergenceError',
    'TrainingError',
    'EvaluationError',
    'SearchError',
    'ERROR_MESSAGES',
    'RECOVERY_SUGGESTIONS',
    'describe_error',
    'format_error_line',
    'exit_code_for',
    'cli_error_handler',
    'safe_file_operation',
    'log_activity',
]
