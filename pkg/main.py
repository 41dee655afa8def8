import logging
import os
import sys

from dotenv import load_dotenv

# Load environment variables before settings are read
load_dotenv(override=True)

from app.cli import run_command  # noqa: E402

# Configure logging
logging.basicConfig(
    level=os.environ.get("FLEETWATCH_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)


def main() -> int:
    return run_command(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
