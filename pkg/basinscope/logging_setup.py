from __future__ import annotations

import logging

LOG_FORMAT = '%(asctime)s | %(levelname)s | %(name)s | %(message)s'


def configure_logging(level: str | int = 'INFO') -> None:
    """Install the single root handler used by the CLI and scripts."""
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    # matplotlib is chatty at DEBUG (font manager lookups)
    logging.getLogger('matplotlib').setLevel(logging.WARNING)
