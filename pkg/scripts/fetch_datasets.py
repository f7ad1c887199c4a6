#!/usr/bin/env python3
"""Download the two public datasets into the data directory.

The library never touches the network; run this once before the first
experiment. WDBC ships without a header, so one is added here.
"""
from pathlib import Path
import argparse
import io
import logging
import sys

import requests

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))
from basinscope.config.settings import settings  # noqa: E402
from basinscope.logging_setup import configure_logging  # noqa: E402

logger = logging.getLogger('fetch_datasets')

WDBC_URL = 'https://archive.ics.uci.edu/ml/machine-learning-databases/breast-cancer-wisconsin/wdbc.data'
COMPAS_URL = 'https://raw.githubusercontent.com/propublica/compas-analysis/master/compas-scores-two-years.csv'

_MEASURES = ('radius', 'texture', 'perimeter', 'area', 'smoothness', 'compactness',
             'concavity', 'concave points', 'symmetry', 'fractal dimension')
WDBC_HEADER = (['id', 'diagnosis']
               + [f'mean {m}' for m in _MEASURES]
               + [f'{m} error' for m in _MEASURES]
               + [f'worst {m}' for m in _MEASURES])


def _download(url: str, timeout: int = 60) -> str:
    logger.info('downloading %s', url)
    resp = requests.get(url, timeout=timeout)
    resp.raise_for_status()
    return resp.text


def fetch_wdbc(target: Path) -> Path:
    body = _download(WDBC_URL)
    out = io.StringIO()
    out.write(','.join(WDBC_HEADER) + '\n')
    rows = [line.strip() for line in body.splitlines() if line.strip()]
    for line in rows:
        if line.count(',') != len(WDBC_HEADER) - 1:
            raise ValueError(f'unexpected WDBC row: {line[:60]}')
        out.write(line + '\n')
    target.write_text(out.getvalue(), encoding='utf-8')
    logger.info('wrote %s (%d rows)', target, len(rows))
    return target


def fetch_compas(target: Path) -> Path:
    target.write_text(_download(COMPAS_URL), encoding='utf-8')
    logger.info('wrote %s', target)
    return target


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument('--data-dir', type=Path, default=Path(settings.DATA_DIR))
    parser.add_argument('--force', action='store_true', help='overwrite existing files')
    args = parser.parse_args(argv)
    configure_logging(settings.LOG_LEVEL)

    args.data_dir.mkdir(parents=True, exist_ok=True)
    jobs = ((fetch_wdbc, args.data_dir / 'breast_cancer.csv'),
            (fetch_compas, args.data_dir / 'compas-scores-two-years.csv'))
    for fetch, target in jobs:
        if target.exists() and not args.force:
            logger.info('%s exists, skipping (use --force to refresh)', target)
            continue
        try:
            fetch(target)
        except (requests.RequestException, ValueError) as e:
            logger.error('failed to fetch %s: %s', target.name, e)
            return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
