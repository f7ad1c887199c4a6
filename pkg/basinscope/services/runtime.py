"""Repeated-training runtime: scheduling, single runs and the chunk worker pool.

Every run's randomness derives from (split_seed, run_id) only, so records do
not depend on worker count or completion order. Each task owns one chunk
file; the parent process never writes records itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import concurrent.futures
import logging
import math
import time

import numpy as np

from basinscope.config.experiment import ExperimentConfig
from basinscope.db import repository
from basinscope.db.repository import RunRecord
from basinscope.errors import ConfigError
from basinscope.services.attribution import ShapMatrix, forest_shap, global_importance, linear_shap
from basinscope.services.data_ingest import Dataset, SplitData, load_dataset, standardize, stratified_split
from basinscope.services.model_zoo import (
    ForestHyper,
    ForestModel,
    LinearModel,
    LogRegHyper,
    accuracy,
    derive_rng,
    derive_seed,
    predict_proba_forest,
    predict_proba_linear,
    train_forest,
    train_logreg,
)

logger = logging.getLogger(__name__)

Hyper = Union[LogRegHyper, ForestHyper]
Model = Union[LinearModel, ForestModel]
# (start, end, run ids to compute, records kept from disk)
Task = Tuple[int, int, List[int], Tuple[RunRecord, ...]]

# Per-process caches; worker processes fill their own copies.
_DATASET_CACHE: Dict[Tuple[str, str, bool], Dataset] = {}
_SPLIT_CACHE: Dict[Tuple[str, str, bool, int, float, bool], SplitData] = {}


@dataclass(frozen=True)
class Scheduled:
    hyper: Hyper
    model_seed: int


@dataclass(frozen=True)
class FitResult:
    model: Model
    probabilities: np.ndarray
    shap: ShapMatrix
    accuracy: float


@dataclass
class ChunkOutcome:
    split_seed: int
    start: int
    end: int
    path: Optional[Path]
    computed: List[int] = field(default_factory=list)
    failures: Dict[int, str] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Datasets and splits
# ---------------------------------------------------------------------------

def get_dataset(config: ExperimentConfig) -> Dataset:
    key = (config.dataset, str(config.data_path), config.compas_filters)
    if key not in _DATASET_CACHE:
        _DATASET_CACHE[key] = load_dataset(config.dataset, config.data_path, compas_filters=config.compas_filters)
        ds = _DATASET_CACHE[key]
        logger.info('loaded %s: %d rows, %d features', ds.name, ds.n, ds.d)
    return _DATASET_CACHE[key]


def get_split(config: ExperimentConfig, split_seed: int) -> SplitData:
    """Split for this experiment; trees get the identity scaler."""
    standardize_features = config.model_class == 'logreg'
    key = (config.dataset, str(config.data_path), config.compas_filters, int(split_seed),
           float(config.test_fraction), standardize_features)
    if key not in _SPLIT_CACHE:
        _SPLIT_CACHE[key] = stratified_split(get_dataset(config), split_seed, config.test_fraction,
                                             standardize_features=standardize_features)
    return _SPLIT_CACHE[key]


def clear_caches() -> None:
    _DATASET_CACHE.clear()
    _SPLIT_CACHE.clear()


# ---------------------------------------------------------------------------
# Scheduling and single runs
# ---------------------------------------------------------------------------

def varied_C(config: ExperimentConfig, run_id: int) -> float:
    R = config.runs
    if R < 2:
        raise ConfigError('a varied C grid needs at least two runs')
    lo, hi = math.log10(config.C_min), math.log10(config.C_max)
    return float(10.0 ** (lo + (hi - lo) * run_id / (R - 1)))


def schedule_hyperparams(config: ExperimentConfig, split_seed: int, run_id: int) -> Scheduled:
    if not 0 <= run_id < config.runs:
        raise ConfigError(f'run id {run_id} outside 0..{config.runs - 1}')
    model_seed = derive_seed(split_seed, run_id)
    if config.model_class == 'logreg':
        C = varied_C(config, run_id) if config.reg_mode == 'varied' else float(config.C)
        return Scheduled(LogRegHyper(C=C, grad_tol=config.grad_tol, max_iter=config.max_iter), model_seed)

    combos = config.forest_grid.combinations()
    rng = derive_rng(split_seed, run_id)
    n_estimators, max_depth, min_leaf, max_features = combos[int(rng.integers(len(combos)))]
    hyper = ForestHyper(n_estimators=n_estimators, max_depth=max_depth, min_samples_leaf=min_leaf,
                        max_features=max_features, seed=model_seed)
    return Scheduled(hyper, model_seed)


def fit_and_explain(ds: Dataset, split: SplitData, hyper: Hyper) -> FitResult:
    """Train on the split's train rows and explain its test rows.

    Linear models see standardised features with the training mean as SHAP
    background; trees see the split's (identity) transform of raw features.
    """
    X_train, X_test = standardize(ds, split)
    y_train = ds.y[split.train_idx]
    y_test = ds.y[split.test_idx]
    if isinstance(hyper, LogRegHyper):
        model: Model = train_logreg(X_train, y_train, hyper)
        p = predict_proba_linear(model, X_test)
        shap = linear_shap(model, X_test, X_train.mean(axis=0))
    else:
        model = train_forest(X_train, y_train, hyper)
        p = predict_proba_forest(model, X_test)
        shap = forest_shap(model, X_test)
    return FitResult(model=model, probabilities=p, shap=shap, accuracy=accuracy(p, y_test))


def hyper_from_record(record: RunRecord) -> Hyper:
    if record.model_class == 'logreg':
        return LogRegHyper.from_dict(record.hyperparameters)
    return ForestHyper.from_dict(record.hyperparameters)


def execute_run(config: ExperimentConfig, split_seed: int, run_id: int) -> RunRecord:
    ds = get_dataset(config)
    split = get_split(config, split_seed)
    sched = schedule_hyperparams(config, split_seed, run_id)
    fit = fit_and_explain(ds, split, sched.hyper)
    e = global_importance(fit.shap, run_id)
    converged = fit.model.converged if isinstance(fit.model, LinearModel) else True
    return RunRecord(
        run_id=run_id,
        split_seed=split_seed,
        model_class=config.model_class,
        hyperparameters=sched.hyper.as_dict(),
        model_seed=sched.model_seed,
        test_accuracy=fit.accuracy,
        e=tuple(e.e.tolist()),
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Chunks and the worker pool
# ---------------------------------------------------------------------------

def chunk_ranges(R: int, chunk_size: int) -> List[Tuple[int, int]]:
    return [(start, min(start + chunk_size, R) - 1) for start in range(0, R, chunk_size)]


def run_chunk(config: ExperimentConfig, split_seed: int, start: int, end: int,
              run_ids: Sequence[int], existing: Sequence[RunRecord] = ()) -> ChunkOutcome:
    """Compute ``run_ids`` and write the chunk together with ``existing`` records."""
    outcome = ChunkOutcome(split_seed=split_seed, start=start, end=end, path=None)
    records = {r.run_id: r for r in existing}
    timing: Dict[str, float] = {}
    for run_id in run_ids:
        t0 = time.perf_counter()
        try:
            records[run_id] = execute_run(config, split_seed, run_id)
            outcome.computed.append(run_id)
        except Exception as exc:
            logger.exception('split %s run %s failed', split_seed, run_id)
            outcome.failures[run_id] = f'{type(exc).__name__}: {exc}'
        timing[str(run_id)] = round(time.perf_counter() - t0, 6)

    path = repository.write_chunk(config.output_dir, split_seed, start, end, records.values())
    repository.write_json(repository.sidecar_path(path, repository.TIMING_SUFFIX), timing)
    failures_path = repository.sidecar_path(path, repository.FAILURES_SUFFIX)
    if outcome.failures:
        repository.write_json(failures_path, {str(k): v for k, v in outcome.failures.items()})
    elif failures_path.exists():
        failures_path.unlink()
    outcome.path = path
    logger.info('split %s chunk %d-%d: %d computed, %d failed', split_seed, start, end,
                len(outcome.computed), len(outcome.failures))
    return outcome


def _remove_chunk(path: Path) -> None:
    for side in (repository.TIMING_SUFFIX, repository.FAILURES_SUFFIX):
        repository.sidecar_path(path, side).unlink(missing_ok=True)
    path.unlink()


def _clear_split_outputs(output_dir: Path, split_seed: int) -> None:
    stale = repository.list_chunks(output_dir, split_seed)
    if stale:
        logger.warning('split %s: replacing %d existing chunk file(s)', split_seed, len(stale))
    for path in stale:
        _remove_chunk(path)


def matches_schedule(config: ExperimentConfig, split_seed: int, record: RunRecord) -> bool:
    """True when ``record`` is what the current config would compute for its run id."""
    if record.split_seed != split_seed or record.model_class != config.model_class:
        return False
    if not 0 <= record.run_id < config.runs:
        return False
    sched = schedule_hyperparams(config, split_seed, record.run_id)
    return record.model_seed == sched.model_seed and record.hyperparameters == sched.hyper.as_dict()


def plan_tasks(config: ExperimentConfig, split_seed: int, resume: bool) -> List[Task]:
    """Chunks that still need work, each with the on-disk records it can keep.

    On resume only records matching the current schedule are kept; chunk
    files whose range no longer exists are harvested and removed.
    """
    ranges = chunk_ranges(config.runs, config.chunk_size)
    valid: Dict[int, RunRecord] = {}
    on_disk: Dict[Tuple[int, int], Tuple[RunRecord, ...]] = {}
    if resume:
        stale = 0
        for chunk in repository.load_chunks(config.output_dir, split_seed):
            on_disk[(chunk.start, chunk.end)] = chunk.records
            for record in chunk.records:
                if record.run_id not in valid and matches_schedule(config, split_seed, record):
                    valid[record.run_id] = record
                else:
                    stale += 1
            if (chunk.start, chunk.end) not in ranges:
                _remove_chunk(chunk.path)
        if stale:
            logger.warning('split %s: %d record(s) on disk do not match the current config and will be recomputed',
                           split_seed, stale)
    else:
        _clear_split_outputs(config.output_dir, split_seed)

    tasks = []
    for start, end in ranges:
        have = tuple(valid[rid] for rid in range(start, end + 1) if rid in valid)
        missing = [rid for rid in range(start, end + 1) if rid not in valid]
        if missing or on_disk.get((start, end)) != have:
            tasks.append((start, end, missing, have))
    return tasks


def run_experiment(config: ExperimentConfig, jobs: int = 1, resume: bool = False) -> List[ChunkOutcome]:
    """Execute every (split, run) pair not already on disk.

    With ``jobs`` > 1 chunks are spread over a process pool.
    """
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    get_dataset(config)  # fail fast on unreadable data before spawning workers

    tasks = []
    for split_seed in config.split_seeds:
        get_split(config, split_seed)
        planned = plan_tasks(config, split_seed, resume)
        skipped = len(chunk_ranges(config.runs, config.chunk_size)) - len(planned)
        if skipped:
            logger.info('split %s: %d chunk(s) already complete', split_seed, skipped)
        tasks.extend((split_seed,) + t for t in planned)

    outcomes: List[ChunkOutcome] = []
    if jobs <= 1 or len(tasks) <= 1:
        for split_seed, start, end, missing, have in tasks:
            outcomes.append(run_chunk(config, split_seed, start, end, missing, have))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as ex:
            future_map = {
                ex.submit(run_chunk, config, split_seed, start, end, missing, have): (split_seed, start)
                for split_seed, start, end, missing, have in tasks
            }
            for fut in concurrent.futures.as_completed(future_map):
                outcomes.append(fut.result())
    outcomes.sort(key=lambda o: (o.split_seed, o.start))

    n_failed = sum(len(o.failures) for o in outcomes)
    if n_failed:
        logger.error('%d run(s) failed; rerun with --resume after fixing the cause', n_failed)
    return outcomes


def load_split_runs(config: ExperimentConfig, split_seed: int) -> repository.SplitRuns:
    chunks = repository.load_chunks(config.output_dir, split_seed)
    return repository.aggregate(chunks, config.runs, split_seed)
