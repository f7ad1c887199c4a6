from __future__ import annotations

import os
from typing import Any, Dict

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        return default


class Settings:
    """Lightweight settings wrapper that reads from environment variables.

    Experiment parameters live in the TOML experiment config; this only
    carries process-level defaults (worker count, log level, directories).
    """

    def __init__(self) -> None:
        self.JOBS: int = _int_env('BASINSCOPE_JOBS', 1)
        self.LOG_LEVEL: str = os.getenv('BASINSCOPE_LOG_LEVEL', 'INFO').upper()
        self.DATA_DIR: str = os.getenv('BASINSCOPE_DATA_DIR', 'data')
        self.OUTPUT_DIR: str = os.getenv('BASINSCOPE_OUTPUT_DIR', 'results')

    @staticmethod
    def from_env() -> 'Settings':
        return Settings()

    def as_dict(self) -> Dict[str, Any]:
        return {
            'JOBS': self.JOBS,
            'LOG_LEVEL': self.LOG_LEVEL,
            'DATA_DIR': self.DATA_DIR,
            'OUTPUT_DIR': self.OUTPUT_DIR,
        }


# Convenience singleton
settings = Settings()
