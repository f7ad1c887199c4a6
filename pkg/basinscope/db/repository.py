"""Run records and their on-disk chunk files.

One chunk file holds the records of a contiguous run-id range of one split,
one JSON object per line with sorted keys. Files are written atomically so
an interrupted run never leaves a half-written chunk behind.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple
import json
import logging
import os
import re

import numpy as np

from basinscope.errors import AggregationError, DataError
from basinscope.services.landscape import ExplanationMatrix

logger = logging.getLogger(__name__)

CHUNK_PATTERN = re.compile(r'^split(?P<seed>-?\d+)_chunk(?P<start>\d+)-(?P<end>\d+)\.jsonl$')
TIMING_SUFFIX = '.timing.json'
FAILURES_SUFFIX = '.failures.json'


@dataclass(frozen=True)
class RunRecord:
    run_id: int
    split_seed: int
    model_class: str
    hyperparameters: Dict[str, Any]
    model_seed: int
    test_accuracy: float
    e: Tuple[float, ...]
    converged: bool = True

    def __post_init__(self) -> None:
        if self.run_id < 0:
            raise DataError(f'negative run id {self.run_id}')
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise DataError(f'run {self.run_id}: accuracy {self.test_accuracy} outside [0, 1]')
        object.__setattr__(self, 'e', tuple(float(v) for v in self.e))

    @property
    def C(self) -> Optional[float]:
        value = self.hyperparameters.get('C')
        return None if value is None else float(value)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'run_id': int(self.run_id),
            'split_seed': int(self.split_seed),
            'model_class': self.model_class,
            'hyperparameters': dict(self.hyperparameters),
            'model_seed': int(self.model_seed),
            'test_accuracy': float(self.test_accuracy),
            'e': list(self.e),
            'converged': bool(self.converged),
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'RunRecord':
        try:
            return RunRecord(
                run_id=int(data['run_id']),
                split_seed=int(data['split_seed']),
                model_class=str(data['model_class']),
                hyperparameters=dict(data['hyperparameters']),
                model_seed=int(data['model_seed']),
                test_accuracy=float(data['test_accuracy']),
                e=tuple(data['e']),
                converged=bool(data.get('converged', True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f'malformed run record: {exc}') from exc


@dataclass(frozen=True)
class ChunkFile:
    path: Path
    split_seed: int
    start: int
    end: int
    records: Tuple[RunRecord, ...]


@dataclass(frozen=True)
class SplitRuns:
    """Gap-checked records of one split with the aligned explanation matrix."""

    split_seed: int
    records: Tuple[RunRecord, ...]
    matrix: ExplanationMatrix

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.test_accuracy for r in self.records])

    @property
    def C_values(self) -> Optional[np.ndarray]:
        values = [r.C for r in self.records]
        if any(v is None for v in values):
            return None
        return np.array(values, dtype=np.float64)

    @property
    def model_class(self) -> str:
        return self.records[0].model_class


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def chunk_name(split_seed: int, start: int, end: int) -> str:
    return f'split{int(split_seed)}_chunk{int(start)}-{int(end)}.jsonl'


def parse_chunk_name(name: str) -> Optional[Tuple[int, int, int]]:
    match = CHUNK_PATTERN.match(name)
    if not match:
        return None
    return int(match['seed']), int(match['start']), int(match['end'])


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'w', encoding='utf-8', newline='\n') as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path, data: Any) -> Path:
    """Atomic JSON write with sorted keys; NaN and infinities become null."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(path, json.dumps(to_jsonable(data), sort_keys=True, indent=2, allow_nan=False) + '\n')
    return path


def to_jsonable(obj: Any) -> Any:
    """Plain JSON types; numpy values unwrapped, non-finite floats as None."""
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return to_jsonable(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def read_json(path) -> Any:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f'{path}: file not found') from exc
    except json.JSONDecodeError as exc:
        raise DataError(f'{path}: invalid JSON at line {exc.lineno}') from exc


def write_chunk(output_dir, split_seed: int, start: int, end: int,
                records: Iterable[RunRecord]) -> Path:
    """Write records sorted by run id; every id must lie in [start, end]."""
    ordered = sorted(records, key=lambda r: r.run_id)
    for rec in ordered:
        if not start <= rec.run_id <= end or rec.split_seed != split_seed:
            raise DataError(f'record (split {rec.split_seed}, run {rec.run_id}) does not belong '
                            f'to chunk split {split_seed} [{start}, {end}]')
    directory = Path(output_dir) / 'chunks'
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / chunk_name(split_seed, start, end)
    lines = ''.join(json.dumps(r.to_dict(), sort_keys=True, allow_nan=False) + '\n' for r in ordered)
    _atomic_write_text(path, lines)
    logger.debug('wrote %s (%d records)', path.name, len(ordered))
    return path


def sidecar_path(chunk_path: Path, suffix: str) -> Path:
    return chunk_path.with_name(chunk_path.name[:-len('.jsonl')] + suffix)


def read_chunk(path) -> ChunkFile:
    path = Path(path)
    parsed = parse_chunk_name(path.name)
    if parsed is None:
        raise DataError(f'{path.name}: not a chunk file name')
    seed, start, end = parsed
    records: List[RunRecord] = []
    with open(path, 'r', encoding='utf-8') as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(RunRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f'{path.name} line {lineno}: {exc}') from exc
    return ChunkFile(path=path, split_seed=seed, start=start, end=end, records=tuple(records))


def list_chunks(output_dir, split_seed: Optional[int] = None) -> List[Path]:
    directory = Path(output_dir) / 'chunks'
    if not directory.is_dir():
        return []
    found = []
    for p in directory.iterdir():
        parsed = parse_chunk_name(p.name)
        if parsed is None or (split_seed is not None and parsed[0] != split_seed):
            continue
        found.append((parsed, p))
    return [p for _, p in sorted(found)]


def load_chunks(output_dir, split_seed: int) -> List[ChunkFile]:
    return [read_chunk(p) for p in list_chunks(output_dir, split_seed)]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(chunks: Sequence[Sequence[RunRecord]], R: int, split_seed: int) -> SplitRuns:
    """Merge chunk contents into R run-ordered records; gaps and duplicates fail."""
    records = [r for chunk in chunks for r in (chunk.records if isinstance(chunk, ChunkFile) else chunk)]
    foreign = sorted({r.split_seed for r in records} - {split_seed})
    if foreign:
        raise AggregationError(f'split {split_seed}: records from other splits {foreign}')
    counts = Counter(r.run_id for r in records)
    duplicates = sorted(rid for rid, c in counts.items() if c > 1)
    missing = sorted(set(range(R)) - set(counts))
    extra = sorted(rid for rid in counts if rid >= R)
    if duplicates or missing or extra:
        parts = []
        if missing:
            parts.append(f'missing run ids {_abbrev(missing)}')
        if duplicates:
            parts.append(f'duplicate run ids {_abbrev(duplicates)}')
        if extra:
            parts.append(f'run ids beyond R={R}: {_abbrev(extra)}')
        raise AggregationError(f'split {split_seed}: ' + '; '.join(parts),
                               missing=missing, duplicates=duplicates)
    ordered = tuple(sorted(records, key=lambda r: r.run_id))
    widths = {len(r.e) for r in ordered}
    if len(widths) != 1:
        raise AggregationError(f'split {split_seed}: explanation vectors have mixed lengths {sorted(widths)}')
    matrix = ExplanationMatrix(
        E=np.array([r.e for r in ordered], dtype=np.float64),
        run_ids=np.arange(R),
        split_seed=split_seed,
    )
    return SplitRuns(split_seed=split_seed, records=ordered, matrix=matrix)


def _abbrev(ids: Sequence[int], limit: int = 20) -> str:
    shown = ', '.join(str(i) for i in ids[:limit])
    return f'[{shown}{", ..." if len(ids) > limit else ""}] ({len(ids)} total)'
