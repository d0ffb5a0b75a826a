import os
import sys

from src.backend.config import is_frozen_exe
from src.cli.app_cli import main

if "APP_ENV" not in os.environ:
    os.environ["APP_ENV"] = "production" if is_frozen_exe() else "development"

if __name__ == "__main__":
    sys.exit(main())
