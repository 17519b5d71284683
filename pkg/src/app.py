import logging
import sys

try:
    # When imported as a package (tests import src.app), use relative imports
    from .fuselab.cli import run
    from .fuselab.config import configure_logging, load_environment
except ImportError:
    # Support running as a script (python src/app.py) where package-relative imports fail
    from fuselab.cli import run
    from fuselab.config import configure_logging, load_environment

# Load environment variables (FUSELAB_THREADS, FUSELAB_LOG_LEVEL) from .env, then set up logging
load_environment()
configure_logging()
logger = logging.getLogger(__name__)


def main(argv=None) -> int:
    code = run(sys.argv[1:] if argv is None else argv)
    if code:
        logger.debug(f"fuselab exited with code {code}")
    return code


if __name__ == '__main__':
    sys.exit(main())
