"""Dataset ingestion, stratified splitting and standardisation.

Both loaders read local CSV files only (comma separated, header row, UTF-8)
and return immutable values that every run of an experiment shares.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from basinscope.errors import IngestionError, SplitError

logger = logging.getLogger(__name__)

WDBC_COLUMN_COUNT = 32  # id, diagnosis, 30 features

COMPAS_NUMERIC = ('age', 'juv_fel_count', 'juv_misd_count', 'juv_other_count', 'priors_count')
COMPAS_CATEGORICAL = ('sex', 'age_cat', 'race', 'c_charge_degree')
# Feature blocks in output order; categoricals expand to contiguous one-hot columns.
COMPAS_FEATURE_SET = (
    'sex', 'age', 'age_cat', 'race', 'juv_fel_count', 'juv_misd_count',
    'juv_other_count', 'priors_count', 'c_charge_degree',
)
COMPAS_FILTER_COLUMNS = ('days_b_screening_arrest', 'is_recid', 'score_text')
COMPAS_TARGET = 'two_year_recid'
COMPAS_SCREENING_WINDOW = (-30, 30)

_STD_FLOOR = 1e-12


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureSchema:
    names: Tuple[str, ...]
    kinds: Tuple[str, ...]
    source_columns: Tuple[Optional[str], ...]

    def __post_init__(self) -> None:
        if len(set(self.names)) != len(self.names):
            raise IngestionError('feature names must be unique')
        if not (len(self.names) == len(self.kinds) == len(self.source_columns)):
            raise IngestionError('feature schema fields have different lengths')
        seen_closed = set()
        previous = None
        for kind, source in zip(self.kinds, self.source_columns):
            current = source if kind == 'one-hot' else None
            if current != previous and previous is not None:
                seen_closed.add(previous)
            if current is not None and current in seen_closed:
                raise IngestionError(f"one-hot columns of '{current}' are not contiguous")
            previous = current

    def __len__(self) -> int:
        return len(self.names)

    @staticmethod
    def numeric(names: Sequence[str]) -> 'FeatureSchema':
        names = tuple(str(n) for n in names)
        return FeatureSchema(names, ('numeric',) * len(names), (None,) * len(names))

    def as_dict(self) -> Dict[str, List]:
        return {
            'names': list(self.names),
            'kinds': list(self.kinds),
            'source_columns': list(self.source_columns),
        }


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    schema: FeatureSchema
    name: str
    notes: Dict[str, object] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y)
        if X.ndim != 2:
            raise IngestionError(f'{self.name}: feature matrix must be 2-D')
        if X.shape[0] != y.shape[0]:
            raise IngestionError(f'{self.name}: {X.shape[0]} rows but {y.shape[0]} labels')
        if X.shape[1] != len(self.schema):
            raise IngestionError(f'{self.name}: {X.shape[1]} columns but schema has {len(self.schema)}')
        if not np.all(np.isfinite(X)):
            raise IngestionError(f'{self.name}: missing or non-finite feature values')
        if not np.all(np.isin(y, (0, 1))):
            raise IngestionError(f'{self.name}: labels must be 0 or 1')
        object.__setattr__(self, 'X', _readonly(X))
        object.__setattr__(self, 'y', _readonly(y.astype(np.int64)))

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    @property
    def d(self) -> int:
        return int(self.X.shape[1])


@dataclass(frozen=True)
class SplitData:
    split_seed: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    test_fraction: float

    def __post_init__(self) -> None:
        for name in ('train_idx', 'test_idx'):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=np.int64)))
        for name in ('scaler_mean', 'scaler_std'):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), dtype=np.float64)))
        if np.any(self.scaler_std <= 0):
            raise SplitError('scaler standard deviations must be strictly positive')

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.scaler_mean) / self.scaler_std


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _read_csv(path, **kwargs) -> pd.DataFrame:
    p = Path(path)
    if not p.is_file():
        raise IngestionError(f'{p}: file not found')
    try:
        return pd.read_csv(p, sep=',', header=0, encoding='utf-8', **kwargs)
    except pd.errors.EmptyDataError as e:
        raise IngestionError(f'{p}: empty file') from e
    except pd.errors.ParserError as e:
        # pandas reports the offending line, e.g. "Expected 32 fields in line 7, saw 33"
        raise IngestionError(f'{p}: malformed row ({e})') from e
    except UnicodeDecodeError as e:
        raise IngestionError(f'{p}: not UTF-8 ({e})') from e


def _numeric_block(frame: pd.DataFrame, columns: Sequence[str], path) -> np.ndarray:
    """Convert columns to a float matrix, citing the first bad cell on failure."""
    block = frame.loc[:, list(columns)]
    values = block.apply(pd.to_numeric, errors='coerce').to_numpy(dtype=np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raw = block.iloc[r, c]
        line = int(frame.index[r]) + 2  # header is line 1
        raise IngestionError(
            f"{path}: line {line}, column '{columns[c]}': non-numeric or missing value {raw!r}"
        )
    return values


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

def load_breast_cancer(path) -> Dataset:
    """Load the WDBC CSV (id, diagnosis, 30 numeric features). Malignant is y=1."""
    frame = _read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    if frame.shape[1] != WDBC_COLUMN_COUNT:
        raise IngestionError(
            f'{path}: expected {WDBC_COLUMN_COUNT} columns (id, diagnosis, 30 features), '
            f'found {frame.shape[1]}'
        )
    if frame.shape[0] == 0:
        raise IngestionError(f'{path}: no data rows')

    diag_col = frame.columns[1]
    diagnosis = frame[diag_col].fillna('').astype(str).str.strip().str.upper()
    bad = ~diagnosis.isin(['M', 'B'])
    if bad.any():
        r = int(np.flatnonzero(bad.to_numpy())[0])
        raise IngestionError(
            f"{path}: line {r + 2}, column '{diag_col}': diagnosis must be M or B, "
            f'got {frame[diag_col].iloc[r]!r}'
        )

    feature_cols = [str(c).strip() for c in frame.columns[2:]]
    frame.columns = list(frame.columns[:2]) + feature_cols
    X = _numeric_block(frame, feature_cols, path)
    y = (diagnosis == 'M').to_numpy().astype(np.int64)
    logger.info('breast_cancer: loaded %d rows, %d features from %s', X.shape[0], X.shape[1], path)
    return Dataset(X=X, y=y, schema=FeatureSchema.numeric(feature_cols), name='breast_cancer')


def _compas_filter_mask(frame: pd.DataFrame) -> pd.Series:
    days = pd.to_numeric(frame['days_b_screening_arrest'], errors='coerce')
    is_recid = pd.to_numeric(frame['is_recid'], errors='coerce')
    charge = frame['c_charge_degree'].astype(str).str.strip()
    score = frame['score_text'].astype(str).str.strip()
    lo, hi = COMPAS_SCREENING_WINDOW
    return (
        days.between(lo, hi)
        & is_recid.notna()
        & (is_recid != -1)
        & (charge != 'O')
        & frame['score_text'].notna()
        & ~score.isin(['', 'N/A', 'nan'])
    )


def load_compas(path, apply_filters: bool = True) -> Dataset:
    """Load the ProPublica two-year COMPAS file.

    With ``apply_filters`` the standard screening-window, recidivism-flag,
    charge-degree and score-text filters are applied before encoding.
    """
    frame = _read_csv(path, low_memory=False)
    required = list(COMPAS_NUMERIC) + list(COMPAS_CATEGORICAL) + [COMPAS_TARGET]
    if apply_filters:
        required += list(COMPAS_FILTER_COLUMNS)
    missing = sorted(set(required) - set(frame.columns))
    if missing:
        raise IngestionError(f'{path}: missing required columns: {", ".join(missing)}')

    n_raw = len(frame)
    if apply_filters:
        frame = frame.loc[_compas_filter_mask(frame)]
    if frame.empty:
        raise IngestionError(f'{path}: empty dataset after filtering ({n_raw} rows read)')
    logger.info('compas: %d of %d rows retained (filters=%s)', len(frame), n_raw, apply_filters)

    blocks: List[np.ndarray] = []
    names: List[str] = []
    kinds: List[str] = []
    sources: List[Optional[str]] = []
    for col in COMPAS_FEATURE_SET:
        if col in COMPAS_NUMERIC:
            blocks.append(_numeric_block(frame, [col], path))
            names.append(col)
            kinds.append('numeric')
            sources.append(None)
            continue
        values = frame[col]
        if values.isna().any():
            r = int(np.flatnonzero(values.isna().to_numpy())[0])
            raise IngestionError(f"{path}: line {int(frame.index[r]) + 2}, column '{col}': missing category")
        values = values.astype(str).str.strip()
        dummies = pd.get_dummies(values, prefix=col, prefix_sep='=', dtype=np.float64)
        dummies = dummies.reindex(sorted(dummies.columns), axis=1)
        blocks.append(dummies.to_numpy(dtype=np.float64))
        names.extend(dummies.columns)
        kinds.extend(['one-hot'] * dummies.shape[1])
        sources.extend([col] * dummies.shape[1])

    y = _numeric_block(frame, [COMPAS_TARGET], path)[:, 0]
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise IngestionError(f"{path}: column '{COMPAS_TARGET}' must be 0 or 1")

    X = np.hstack(blocks)
    schema = FeatureSchema(tuple(names), tuple(kinds), tuple(sources))
    notes = {
        'feature_set': list(COMPAS_FEATURE_SET),
        'filters_applied': bool(apply_filters),
        'rows_read': int(n_raw),
    }
    return Dataset(X=X, y=y.astype(np.int64), schema=schema, name='compas', notes=notes)


def load_dataset(name: str, path, compas_filters: bool = True) -> Dataset:
    if name == 'breast_cancer':
        return load_breast_cancer(path)
    if name == 'compas':
        return load_compas(path, apply_filters=compas_filters)
    raise IngestionError(f'unknown dataset {name!r}')


# ---------------------------------------------------------------------------
# Splitting and scaling
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(
    ds: Dataset,
    split_seed: int,
    test_fraction: float = 0.3,
    standardize_features: bool = True,
) -> SplitData:
    """Per-class shuffled, proportionally allocated train/test partition.

    The scaler is fit on the train rows; ``standardize_features=False``
    yields the identity scaler used for tree models.
    """
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f'test_fraction must lie in (0, 1), got {test_fraction}')
    members = {c: np.flatnonzero(ds.y == c) for c in (0, 1)}
    for c, idx in members.items():
        if idx.size < 2:
            raise SplitError(f'class {c} has {idx.size} member(s); stratification needs at least 2')

    total = _round_half_up(test_fraction * ds.n)
    counts = {c: _round_half_up(test_fraction * idx.size) for c, idx in members.items()}
    largest = max(members, key=lambda c: (members[c].size, -c))
    counts[largest] += total - sum(counts.values())
    for c, idx in members.items():
        if not 0 <= counts[c] <= idx.size:
            raise SplitError(f'cannot allocate {counts[c]} test rows from class {c} ({idx.size} members)')

    rng = np.random.default_rng(split_seed)
    train_parts, test_parts = [], []
    for c in (0, 1):
        perm = rng.permutation(members[c])
        test_parts.append(perm[:counts[c]])
        train_parts.append(perm[counts[c]:])
    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts))

    if standardize_features:
        X_train = ds.X[train_idx]
        mean = X_train.mean(axis=0)
        std = X_train.std(axis=0)  # population convention
        std = np.where(std < _STD_FLOOR, 1.0, std)
    else:
        mean = np.zeros(ds.d)
        std = np.ones(ds.d)

    logger.debug('split %s: %d train / %d test rows', split_seed, train_idx.size, test_idx.size)
    return SplitData(
        split_seed=int(split_seed),
        train_idx=train_idx,
        test_idx=test_idx,
        scaler_mean=mean,
        scaler_std=std,
        test_fraction=float(test_fraction),
    )


def standardize(ds: Dataset, split: SplitData) -> Tuple[np.ndarray, np.ndarray]:
    """Apply the split's train-fit scaler to the train and test rows."""
    return split.transform(ds.X[split.train_idx]), split.transform(ds.X[split.test_idx])
