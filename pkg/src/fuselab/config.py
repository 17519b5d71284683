"""Runtime configuration: environment overrides and logging setup."""
import logging
import os
from typing import Optional

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = 'FUSELAB_THREADS'
DEFAULT_THREADS = 0  # 0 = one worker per available core
DEFAULT_LOG_LEVEL = 'INFO'


def load_environment(dotenv_path: Optional[str] = None) -> None:
    """Load variables from a ``.env`` file without overriding the real environment."""
    load_dotenv(dotenv_path=dotenv_path, override=False)


def get_thread_count(explicit: Optional[int] = None) -> int:
    """Resolve the worker count from an explicit value or ``FUSELAB_THREADS``."""
    value = explicit
    if value is None:
        raw = os.environ.get(THREADS_ENV_VAR, str(DEFAULT_THREADS)).strip()
        try:
            value = int(raw)
        except ValueError:
            logger.warning(f"Ignoring non-integer {THREADS_ENV_VAR}={raw!r}")
            value = DEFAULT_THREADS
    if value < 0:
        raise ValueError(f"thread count must be >= 0, got {value}")
    if value == 0:
        value = os.cpu_count() or 1
    return value


def configure_logging(level: Optional[str] = None) -> None:
    level_name = (level or os.environ.get('FUSELAB_LOG_LEVEL', DEFAULT_LOG_LEVEL)).upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.INFO))
