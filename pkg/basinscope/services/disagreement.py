"""Representative models per basin and their per-instance disagreement."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from basinscope.config.experiment import ExperimentConfig
from basinscope.db.repository import RunRecord
from basinscope.errors import IntegrityError, ModelError, NoRepresentativesError
from basinscope.services.attribution import global_importance
from basinscope.services.data_ingest import Dataset, SplitData
from basinscope.services.landscape import BasinReport, NormalizedMatrix
from basinscope.services.model_zoo import (
    ForestHyper,
    LinearModel,
    derive_seed,
    predict_proba_forest,
    predict_proba_linear,
)
from basinscope.services.runtime import Model, fit_and_explain, hyper_from_record

logger = logging.getLogger(__name__)

ATTRIBUTION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Representative:
    cluster: int
    run_id: int
    hyperparameters: Dict[str, Any]
    model_seed: int
    cosine_distance: float
    test_accuracy: float


@dataclass(frozen=True)
class RepresentativeSet:
    members: Tuple[Representative, ...]

    @property
    def run_ids(self) -> List[int]:
        return [m.run_id for m in self.members]

    def as_dict(self) -> List[Dict[str, Any]]:
        return [
            {'cluster': m.cluster, 'run_id': m.run_id, 'hyperparameters': m.hyperparameters,
             'model_seed': m.model_seed, 'cosine_distance': m.cosine_distance,
             'test_accuracy': m.test_accuracy}
            for m in self.members
        ]


@dataclass(frozen=True)
class ModelHandle:
    """A retrained model bound to the scaler of the split it was trained on."""

    run_id: int
    model: Model
    split: SplitData
    test_accuracy: float
    e: np.ndarray

    @property
    def n_features(self) -> int:
        return self.model.d if isinstance(self.model, LinearModel) else self.model.n_features

    def predict_proba(self, X_raw) -> np.ndarray:
        X = self.split.transform(X_raw)
        if isinstance(self.model, LinearModel):
            return predict_proba_linear(self.model, X)
        return predict_proba_forest(self.model, X)


@dataclass(frozen=True)
class DisagreementReport:
    instance_ids: np.ndarray
    y_true: np.ndarray
    probabilities: np.ndarray  # (n_instances, n_models)
    delta: np.ndarray
    model_run_ids: Tuple[int, ...]
    mean_delta: float
    max_delta: float
    threshold: float = 0.4
    above_threshold: int = 0
    pairwise: List[Dict[str, float]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({'instance_id': self.instance_ids, 'y_true': self.y_true})
        for i in range(self.probabilities.shape[1]):
            frame[f'p_model_{i}'] = self.probabilities[:, i]
        frame['delta'] = self.delta
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format='%.10g', lineterminator='\n')

    def as_dict(self) -> Dict[str, Any]:
        return {
            'model_run_ids': list(self.model_run_ids),
            'mean_delta': self.mean_delta,
            'max_delta': self.max_delta,
            'threshold': self.threshold,
            'above_threshold': self.above_threshold,
            'pairwise': self.pairwise,
            'top': [
                {'instance_id': int(i), 'y_true': int(y), 'probabilities': p.tolist(), 'delta': float(d)}
                for i, y, p, d in zip(self.instance_ids, self.y_true, self.probabilities, self.delta)
            ],
        }


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else v


def select_representatives(report: BasinReport, normalized: NormalizedMatrix,
                           records: Sequence[RunRecord]) -> RepresentativeSet:
    """Per basin, the member closest in cosine distance to the re-normalised centroid."""
    if report.k_star < 2:
        raise NoRepresentativesError('a single basin has nothing to disagree with')
    if len(report.labels) != normalized.Ehat.shape[0]:
        raise NoRepresentativesError('basin labels do not align with the normalised rows')
    by_run = {r.run_id: r for r in records}
    members = []
    for cluster in range(report.k_star):
        rows = np.flatnonzero(report.labels == cluster)
        direction = _unit(report.centroids[cluster])
        dist = 1.0 - normalized.Ehat[rows] @ direction
        # rows are in run order, so argmin keeps the smaller run id on ties
        best = rows[int(np.argmin(dist))]
        run_id = int(normalized.run_ids[best])
        record = by_run[run_id]
        members.append(Representative(
            cluster=cluster,
            run_id=run_id,
            hyperparameters=dict(record.hyperparameters),
            model_seed=record.model_seed,
            cosine_distance=float(dist.min()),
            test_accuracy=record.test_accuracy,
        ))
    return RepresentativeSet(members=tuple(members))


def retrain_representative(record: RunRecord, split: SplitData, ds: Dataset,
                           config: Optional[ExperimentConfig] = None) -> ModelHandle:
    """Rebuild a recorded run and check it reproduces accuracy and attributions.

    The solver constants come from the record itself; ``config`` only
    supplies the expected model class.
    """
    if config is not None and record.model_class != config.model_class:
        raise IntegrityError(f'run {record.run_id}: record is {record.model_class}, experiment is {config.model_class}')
    if record.split_seed != split.split_seed:
        raise IntegrityError(f'run {record.run_id}: recorded split {record.split_seed}, got split {split.split_seed}')
    expected_seed = derive_seed(record.split_seed, record.run_id)
    if record.model_seed != expected_seed:
        raise IntegrityError(f'run {record.run_id}: model seed {record.model_seed} does not derive from '
                             f'(split {record.split_seed}, run {record.run_id})')
    try:
        hyper = hyper_from_record(record)
    except (KeyError, TypeError, ValueError, ModelError) as exc:
        raise IntegrityError(f'run {record.run_id}: unusable hyperparameters: {exc}') from exc
    if isinstance(hyper, ForestHyper) and hyper.seed != record.model_seed:
        raise IntegrityError(f'run {record.run_id}: forest seed {hyper.seed} differs from model seed')

    fit = fit_and_explain(ds, split, hyper)
    e = global_importance(fit.shap, record.run_id).e
    if fit.accuracy != record.test_accuracy:
        raise IntegrityError(f'run {record.run_id}: accuracy {fit.accuracy} != recorded {record.test_accuracy}')
    recorded_e = np.asarray(record.e)
    if e.shape != recorded_e.shape or float(np.max(np.abs(e - recorded_e))) > ATTRIBUTION_TOLERANCE:
        raise IntegrityError(f'run {record.run_id}: attribution vector drifted from the recorded one')
    logger.debug('run %s retrained and verified', record.run_id)
    return ModelHandle(run_id=record.run_id, model=fit.model, split=split,
                       test_accuracy=fit.accuracy, e=e)


def _probability_matrix(models: Sequence[ModelHandle], X_test) -> np.ndarray:
    if len(models) < 2:
        raise ModelError('disagreement needs at least two models')
    X = np.asarray(X_test, dtype=np.float64)
    widths = {m.n_features for m in models}
    if X.ndim != 2 or len(widths) != 1 or X.shape[1] not in widths:
        raise ModelError(f'dimension mismatch: X {X.shape}, models expect {sorted(widths)} features')
    return np.column_stack([m.predict_proba(X) for m in models])


def disagreement_from_probabilities(P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] < 2:
        raise ModelError('need an (instances, models) probability matrix with at least two models')
    return P.max(axis=1) - P.min(axis=1)


def disagreement_scores(models: Sequence[ModelHandle], X_test) -> np.ndarray:
    """Per-row max minus min of the models' positive-class probabilities."""
    return disagreement_from_probabilities(_probability_matrix(models, X_test))


def pairwise_disagreement(P, run_ids: Sequence[int]) -> List[Dict[str, float]]:
    P = np.asarray(P, dtype=np.float64)
    out = []
    for i, j in combinations(range(P.shape[1]), 2):
        gap = np.abs(P[:, i] - P[:, j])
        out.append({'run_i': int(run_ids[i]), 'run_j': int(run_ids[j]),
                    'mean_abs_diff': float(gap.mean()), 'max_abs_diff': float(gap.max())})
    return out


def top_disagreements(delta, y_test, probs, n: int = 10, run_ids: Optional[Sequence[int]] = None,
                      threshold: float = 0.4) -> DisagreementReport:
    """The ``n`` largest-Δ instances (ties by index) with mean and max Δ summaries."""
    delta = np.asarray(delta, dtype=np.float64)
    y_test = np.asarray(y_test)
    P = np.asarray(probs, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if not (delta.shape[0] == y_test.shape[0] == P.shape[0]):
        raise ModelError('Δ, labels and probabilities must have the same number of rows')
    if run_ids is None:
        run_ids = list(range(P.shape[1]))
    order = np.lexsort((np.arange(delta.size), -delta))[:max(0, n)]
    return DisagreementReport(
        instance_ids=order,
        y_true=y_test[order],
        probabilities=P[order],
        delta=delta[order],
        model_run_ids=tuple(int(r) for r in run_ids),
        mean_delta=float(delta.mean()) if delta.size else 0.0,
        max_delta=float(delta.max()) if delta.size else 0.0,
        threshold=float(threshold),
        above_threshold=int(np.sum(delta > threshold)),
        pairwise=pairwise_disagreement(P, run_ids) if P.shape[1] >= 2 else [],
    )


def disagreement_report(models: Sequence[ModelHandle], X_test, y_test, n: int = 10,
                        threshold: float = 0.4) -> DisagreementReport:
    P = _probability_matrix(models, X_test)
    return top_disagreements(disagreement_from_probabilities(P), y_test, P, n=n,
                             run_ids=[m.run_id for m in models], threshold=threshold)
