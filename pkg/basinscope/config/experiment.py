"""Experiment configuration loaded from TOML.

Each top-level table of the file is one named experiment::

    [bc_logreg_varied]
    dataset = "breast_cancer"
    data_path = "../data/breast_cancer.csv"
    model_class = "logreg"
    reg_mode = "varied"
    runs = 1000

A forest experiment may carry a ``[name.forest_grid]`` sub-table. Unknown
keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union
import logging
import math
import re
import tomllib

from basinscope.config.settings import Settings
from basinscope.errors import ConfigError

logger = logging.getLogger(__name__)

DATASETS = ('breast_cancer', 'compas')
MODEL_CLASSES = ('logreg', 'forest')
REG_MODES = ('fixed', 'varied', 'forest_grid')
DEFAULT_DATA_FILES = {
    'breast_cancer': 'breast_cancer.csv',
    'compas': 'compas-scores-two-years.csv',
}
DEFAULT_SPLIT_SEEDS = tuple(range(100, 110))
DEFAULT_FOREST_SPLIT_SEEDS = tuple(range(100, 105))

MaxFeatures = Union[str, float]


@dataclass(frozen=True)
class ForestGrid:
    n_estimators: Tuple[int, ...] = (50, 100, 200)
    max_depth: Tuple[Optional[int], ...] = (3, 5, 10, None)
    min_samples_leaf: Tuple[int, ...] = (1, 2, 5)
    max_features: Tuple[MaxFeatures, ...] = ('sqrt', 'log2', 0.5)

    def __post_init__(self) -> None:
        for name in ('n_estimators', 'max_depth', 'min_samples_leaf', 'max_features'):
            if not getattr(self, name):
                raise ConfigError(f'forest_grid.{name} must not be empty')
        if any(int(v) < 1 for v in self.n_estimators + self.min_samples_leaf):
            raise ConfigError('forest_grid counts must be positive')
        if any(v is not None and int(v) < 1 for v in self.max_depth):
            raise ConfigError('forest_grid.max_depth entries must be positive or "none"')
        for v in self.max_features:
            if isinstance(v, str):
                if v not in ('sqrt', 'log2'):
                    raise ConfigError(f'forest_grid.max_features: unknown rule {v!r}')
            elif not 0.0 < float(v) <= 1.0:
                raise ConfigError(f'forest_grid.max_features: fraction {v} outside (0, 1]')

    def combinations(self) -> List[Tuple[int, Optional[int], int, MaxFeatures]]:
        """Cartesian product in declaration order."""
        return list(product(self.n_estimators, self.max_depth, self.min_samples_leaf, self.max_features))

    def as_dict(self) -> Dict[str, Any]:
        return {
            'n_estimators': list(self.n_estimators),
            'max_depth': ['none' if v is None else v for v in self.max_depth],
            'min_samples_leaf': list(self.min_samples_leaf),
            'max_features': list(self.max_features),
        }

    @staticmethod
    def from_mapping(data: Mapping[str, Any]) -> 'ForestGrid':
        unknown = set(data) - {'n_estimators', 'max_depth', 'min_samples_leaf', 'max_features'}
        if unknown:
            raise ConfigError(f'unknown forest_grid keys: {sorted(unknown)}')
        defaults = ForestGrid()
        depth = data.get('max_depth', defaults.max_depth)
        try:
            return ForestGrid(
                n_estimators=tuple(int(v) for v in data.get('n_estimators', defaults.n_estimators)),
                max_depth=tuple(None if (v is None or str(v).lower() == 'none') else int(v) for v in depth),
                min_samples_leaf=tuple(int(v) for v in data.get('min_samples_leaf', defaults.min_samples_leaf)),
                max_features=tuple(v if isinstance(v, str) else float(v)
                                   for v in data.get('max_features', defaults.max_features)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f'invalid forest_grid: {exc}') from exc


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: str
    data_path: Path
    model_class: str = 'logreg'
    reg_mode: str = 'varied'
    C: float = 1.0
    C_min: float = 1e-2
    C_max: float = 1e2
    runs: int = 1000
    split_seeds: Tuple[int, ...] = DEFAULT_SPLIT_SEEDS
    test_fraction: float = 0.3
    k_min: int = 2
    k_max: int = 8
    clustering_seed: int = 0
    chunk_size: int = 100
    output_dir: Path = Path('results')
    top_disagreements: int = 10
    top_features: int = 5
    grad_tol: float = 1e-6
    max_iter: int = 1000
    degeneracy_tol: float = 1e-6
    normalize_eps: float = 1e-12
    compas_filters: bool = True
    disagreement_threshold: float = 0.4
    forest_grid: ForestGrid = field(default_factory=ForestGrid)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'data_path', Path(self.data_path))
        object.__setattr__(self, 'output_dir', Path(self.output_dir))
        object.__setattr__(self, 'split_seeds', tuple(int(s) for s in self.split_seeds))
        self._validate()

    def _validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ConfigError(f'{self.name}: dataset must be one of {DATASETS}, got {self.dataset!r}')
        if self.model_class not in MODEL_CLASSES:
            raise ConfigError(f'{self.name}: model_class must be one of {MODEL_CLASSES}')
        if self.reg_mode not in REG_MODES:
            raise ConfigError(f'{self.name}: reg_mode must be one of {REG_MODES}')
        if (self.model_class == 'forest') != (self.reg_mode == 'forest_grid'):
            raise ConfigError(f'{self.name}: reg_mode forest_grid goes with model_class forest and only with it')
        if self.runs < 2:
            raise ConfigError(f'{self.name}: runs must be at least 2, got {self.runs}')
        for key in ('C', 'C_min', 'C_max'):
            value = getattr(self, key)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f'{self.name}: {key} must be positive and finite, got {value}')
        if not self.C_min < self.C_max:
            raise ConfigError(f'{self.name}: C_min must be below C_max')
        if not self.split_seeds:
            raise ConfigError(f'{self.name}: split_seeds must not be empty')
        if len(set(self.split_seeds)) != len(self.split_seeds):
            raise ConfigError(f'{self.name}: split_seeds contain duplicates')
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f'{self.name}: test_fraction must lie in (0, 1)')
        if not 2 <= self.k_min <= self.k_max:
            raise ConfigError(f'{self.name}: need 2 <= k_min <= k_max')
        if self.chunk_size < 1:
            raise ConfigError(f'{self.name}: chunk_size must be positive')
        if self.top_disagreements < 1 or self.top_features < 1:
            raise ConfigError(f'{self.name}: top_disagreements and top_features must be positive')
        if self.grad_tol <= 0 or self.max_iter < 1:
            raise ConfigError(f'{self.name}: solver tolerances must be positive')
        if self.degeneracy_tol <= 0 or self.normalize_eps <= 0:
            raise ConfigError(f'{self.name}: degeneracy_tol and normalize_eps must be positive')
        if not 0.0 <= self.disagreement_threshold <= 1.0:
            raise ConfigError(f'{self.name}: disagreement_threshold must lie in [0, 1]')

    @property
    def k_range(self) -> Tuple[int, ...]:
        return tuple(range(self.k_min, self.k_max + 1))

    def with_overrides(self, **changes: Any) -> 'ExperimentConfig':
        """Copy with CLI overrides applied; ``None`` values are ignored."""
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes) if changes else self

    def as_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            'name': self.name,
            'dataset': self.dataset,
            'data_path': str(self.data_path),
            'model_class': self.model_class,
            'reg_mode': self.reg_mode,
            'runs': self.runs,
            'split_seeds': list(self.split_seeds),
            'test_fraction': self.test_fraction,
            'k_min': self.k_min,
            'k_max': self.k_max,
            'clustering_seed': self.clustering_seed,
            'chunk_size': self.chunk_size,
            'output_dir': str(self.output_dir),
            'top_disagreements': self.top_disagreements,
            'top_features': self.top_features,
            'degeneracy_tol': self.degeneracy_tol,
            'normalize_eps': self.normalize_eps,
            'compas_filters': self.compas_filters,
            'disagreement_threshold': self.disagreement_threshold,
        }
        if self.model_class == 'logreg':
            out.update({'C': self.C, 'C_min': self.C_min, 'C_max': self.C_max,
                        'grad_tol': self.grad_tol, 'max_iter': self.max_iter})
        else:
            out['forest_grid'] = self.forest_grid.as_dict()
        return out


_SCALAR_KEYS = {
    'dataset': str, 'data_path': str, 'model_class': str, 'reg_mode': str,
    'C': float, 'C_min': float, 'C_max': float, 'runs': int, 'test_fraction': float,
    'k_min': int, 'k_max': int, 'clustering_seed': int, 'chunk_size': int,
    'output_dir': str, 'top_disagreements': int, 'top_features': int,
    'grad_tol': float, 'max_iter': int, 'degeneracy_tol': float,
    'normalize_eps': float, 'compas_filters': bool, 'disagreement_threshold': float,
}
ALLOWED_KEYS = frozenset(_SCALAR_KEYS) | {'split_seeds', 'forest_grid'}


def _coerce(name: str, key: str, value: Any) -> Any:
    kind = _SCALAR_KEYS[key]
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f'{name}.{key}: expected true/false, got {value!r}')
        return value
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f'{name}.{key}: expected an integer, got {value!r}')
    if kind is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f'{name}.{key}: expected a number, got {value!r}')
    if kind is str and not isinstance(value, str):
        raise ConfigError(f'{name}.{key}: expected a string, got {value!r}')
    return kind(value)


def _resolve(base: Path, raw: str) -> Path:
    p = Path(raw).expanduser()
    return p if p.is_absolute() else (base / p)


def config_from_mapping(name: str, table: Mapping[str, Any], base_dir: Path) -> ExperimentConfig:
    unknown = set(table) - ALLOWED_KEYS
    if unknown:
        raise ConfigError(f'{name}: unknown keys {sorted(unknown)}')
    if 'dataset' not in table:
        raise ConfigError(f'{name}: missing required key "dataset"')

    env = Settings.from_env()
    kwargs: Dict[str, Any] = {k: _coerce(name, k, v) for k, v in table.items() if k in _SCALAR_KEYS}
    dataset = kwargs['dataset']

    if 'data_path' in kwargs:
        kwargs['data_path'] = _resolve(base_dir, kwargs['data_path'])
    else:
        kwargs['data_path'] = Path(env.DATA_DIR) / DEFAULT_DATA_FILES.get(dataset, f'{dataset}.csv')
    if 'output_dir' in kwargs:
        kwargs['output_dir'] = _resolve(base_dir, kwargs['output_dir'])
    else:
        kwargs['output_dir'] = Path(env.OUTPUT_DIR) / name

    if kwargs.get('model_class') == 'forest':
        kwargs.setdefault('reg_mode', 'forest_grid')
        kwargs.setdefault('split_seeds', DEFAULT_FOREST_SPLIT_SEEDS)

    if 'split_seeds' in table:
        seeds = table['split_seeds']
        if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError(f'{name}.split_seeds: expected a list of integers')
        kwargs['split_seeds'] = tuple(seeds)

    if 'forest_grid' in table:
        grid = table['forest_grid']
        if not isinstance(grid, dict):
            raise ConfigError(f'{name}.forest_grid must be a table')
        kwargs['forest_grid'] = ForestGrid.from_mapping(grid)

    return ExperimentConfig(name=name, **kwargs)


def load_config(path, name: Optional[str] = None) -> ExperimentConfig:
    """Read one experiment from a TOML file.

    ``name`` may be omitted when the file defines a single experiment.
    """
    path = Path(path)
    try:
        with open(path, 'rb') as fh:
            document = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f'config file not found: {path}') from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f'{path}: {exc}') from exc

    experiments = {k: v for k, v in document.items() if isinstance(v, dict)}
    stray = sorted(set(document) - set(experiments))
    if stray:
        raise ConfigError(f'{path}: keys outside an experiment table: {stray}')
    if not experiments:
        raise ConfigError(f'{path}: no experiment tables defined')
    if name is None:
        if len(experiments) > 1:
            raise ConfigError(f'{path}: several experiments defined {sorted(experiments)}; pick one with --experiment')
        name = next(iter(experiments))
    if name not in experiments:
        raise ConfigError(f'{path}: no experiment named {name!r} (have {sorted(experiments)})')

    config = config_from_mapping(name, experiments[name], path.resolve().parent)
    logger.info('loaded experiment %s from %s', name, path)
    return config


_RANGE = re.compile(r'^(\d+)\s*-\s*(\d+)$')


def parse_split_list(text: str) -> Tuple[int, ...]:
    """'100,101' or '100-104' or a mix of both."""
    seeds: List[int] = []
    try:
        for part in text.split(','):
            part = part.strip()
            if not part:
                continue
            span = _RANGE.match(part)
            if span:
                lo_i, hi_i = int(span[1]), int(span[2])
                if hi_i < lo_i:
                    raise ValueError(f'empty range {part}')
                seeds.extend(range(lo_i, hi_i + 1))
            else:
                seeds.append(int(part))
    except ValueError as exc:
        raise ConfigError(f'invalid split list {text!r}: {exc}') from exc
    if not seeds:
        raise ConfigError('split list is empty')
    return tuple(seeds)
