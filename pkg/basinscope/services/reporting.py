"""Per-split and experiment-level analysis, the JSON envelope and CSV tables.

All tables are written from the envelope alone so ``report`` can rebuild
them without touching chunks or datasets.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import logging

import numpy as np
import pandas as pd

from basinscope import __version__
from basinscope.config.experiment import ExperimentConfig
from basinscope.db import repository
from basinscope.db.repository import SplitRuns
from basinscope.errors import DataError, LandscapeError, NoRepresentativesError
from basinscope.services import disagreement as dis
from basinscope.services import landscape, model_zoo, runtime
from basinscope.services.data_ingest import Dataset, SplitData

logger = logging.getLogger(__name__)

ENVELOPE_NAME = 'envelope.json'
SPLIT_COLUMNS = ['split', 'k_star', 'silhouette', 'H_norm', 'acc_mean', 'acc_std',
                 'n_runs', 'dropped_runs', 'degenerate', 'acc_gap', 'mean_offset_score',
                 'mean_delta', 'max_delta']
CLUSTER_COLUMNS = ['split', 'cluster', 'size', 'support', 'C_mean', 'C_std', 'C_min', 'C_max',
                   'acc_mean', 'acc_std']
FOREST_CLUSTER_COLUMNS = ['split', 'cluster', 'size', 'support', 'acc_mean', 'acc_std']
FLOAT_FORMAT = '%.10g'


@dataclass
class SplitAnalysis:
    split_seed: int
    report: landscape.BasinReport
    labels: np.ndarray  # length R; -1 marks runs dropped by normalisation
    profiles: List[landscape.CentroidProfile]
    embedding: Optional[landscape.Embedding2D]
    mean_offset: Optional[float]
    accuracies: np.ndarray
    C_values: Optional[np.ndarray]
    dropped_runs: List[int]
    disagreement: Optional[dis.DisagreementReport] = None
    representatives: Optional[dis.RepresentativeSet] = None

    def cluster_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for j in range(self.report.k_star):
            members = self.labels == j
            acc = self.accuracies[members]
            row: Dict[str, Any] = {
                'split': self.split_seed,
                'cluster': j,
                'size': int(members.sum()),
                'support': float(self.report.supports[j]),
                'acc_mean': float(acc.mean()),
                'acc_std': float(acc.std()),
            }
            if self.C_values is not None:
                C = self.C_values[members]
                row.update({'C_mean': float(C.mean()), 'C_std': float(C.std()),
                            'C_min': float(C.min()), 'C_max': float(C.max())})
            rows.append(row)
        return rows

    def split_row(self) -> Dict[str, Any]:
        cluster_acc = [r['acc_mean'] for r in self.cluster_rows()]
        return {
            'split': self.split_seed,
            'k_star': self.report.k_star,
            'silhouette': self.report.silhouette,
            'H_norm': self.report.entropy_norm,
            'acc_mean': float(self.accuracies.mean()),
            'acc_std': float(self.accuracies.std()),
            'n_runs': int(self.accuracies.size),
            'dropped_runs': len(self.dropped_runs),
            'degenerate': self.report.degenerate,
            'acc_gap': float(max(cluster_acc) - min(cluster_acc)),
            'mean_offset_score': self.mean_offset,
            'mean_delta': self.disagreement.mean_delta if self.disagreement else None,
            'max_delta': self.disagreement.max_delta if self.disagreement else None,
        }


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

def _cluster_split(runs: SplitRuns, config: ExperimentConfig):
    E = runs.matrix
    if landscape.detect_degenerate(E, config.degeneracy_tol):
        logger.info('split %s: explanations collapse to one point (k*=1)', runs.split_seed)
        report = landscape.collapsed_report(E.R, E.E.shape[1])
        return report, np.zeros(E.R, dtype=np.int64), np.zeros_like(E.E), E.E, None
    normalized = landscape.normalize(E, config.normalize_eps)
    report = landscape.select_k(normalized.Ehat, config.clustering_seed, config.k_range)
    labels = np.full(E.R, -1, dtype=np.int64)
    labels[normalized.run_ids] = report.labels
    logger.info('split %s: k*=%d silhouette=%.3f H_norm=%.3f', runs.split_seed, report.k_star,
                report.silhouette, report.entropy_norm)
    return report, labels, normalized.Ehat, E.E[normalized.run_ids], normalized


def analyze_split(runs: SplitRuns, config: ExperimentConfig, ds: Dataset,
                  split: Optional[SplitData] = None) -> SplitAnalysis:
    """Cluster, profile, embed and (for two or more basins) compare representatives."""
    report, labels, Ehat, E_kept, normalized = _cluster_split(runs, config)
    kept = labels >= 0
    profiles = landscape.centroid_profiles(Ehat, labels[kept], E_kept, ds.schema.names, config.top_features)

    try:
        embedding: Optional[landscape.Embedding2D] = landscape.pca_embed(runs.matrix.E, landscape.PER_SPLIT)
    except LandscapeError as exc:
        logger.warning('split %s: no embedding (%s)', runs.split_seed, exc)
        embedding = None
    try:
        mean_offset: Optional[float] = landscape.mean_offset_score(runs.matrix)
    except LandscapeError as exc:
        logger.warning('split %s: no mean offset score (%s)', runs.split_seed, exc)
        mean_offset = None

    analysis = SplitAnalysis(
        split_seed=runs.split_seed,
        report=report,
        labels=labels,
        profiles=profiles,
        embedding=embedding,
        mean_offset=mean_offset,
        accuracies=runs.accuracies,
        C_values=runs.C_values,
        dropped_runs=list(normalized.dropped_rows) if normalized is not None else [],
    )

    if normalized is None:
        return analysis
    try:
        reps = dis.select_representatives(report, normalized, runs.records)
    except NoRepresentativesError:
        logger.warning('split %s: single basin, disagreement analysis skipped', runs.split_seed)
        return analysis

    split = split or runtime.get_split(config, runs.split_seed)
    by_run = {r.run_id: r for r in runs.records}
    handles = [dis.retrain_representative(by_run[m.run_id], split, ds, config) for m in reps.members]
    export_representatives(config.output_dir, split.split_seed, handles, reps)
    X_test = ds.X[split.test_idx]
    analysis.representatives = reps
    analysis.disagreement = dis.disagreement_report(handles, X_test, ds.y[split.test_idx],
                                                    n=config.top_disagreements,
                                                    threshold=config.disagreement_threshold)
    logger.info('split %s: mean delta %.4f, max delta %.4f', runs.split_seed,
                analysis.disagreement.mean_delta, analysis.disagreement.max_delta)
    return analysis


def export_representatives(output_dir, split_seed: int, handles: Sequence[dis.ModelHandle],
                           reps: dis.RepresentativeSet) -> List[Path]:
    paths = []
    for handle, member in zip(handles, reps.members):
        payload = {'cluster': member.cluster, 'run_id': member.run_id, 'split_seed': split_seed,
                   'model_seed': member.model_seed, 'hyperparameters': member.hyperparameters,
                   'test_accuracy': handle.test_accuracy, 'model': handle.model.to_dict(),
                   'scaler_mean': handle.split.scaler_mean, 'scaler_std': handle.split.scaler_std}
        path = Path(output_dir) / 'representatives' / f'split{split_seed}_run{member.run_id}.json'
        paths.append(repository.write_json(path, payload))
    return paths


def analyze_experiment(config: ExperimentConfig) -> Dict[str, Any]:
    """Aggregate every split's chunks, analyse them and build the envelope."""
    ds = runtime.get_dataset(config)
    split_runs = [runtime.load_split_runs(config, seed) for seed in config.split_seeds]
    analyses = [analyze_split(runs, config, ds) for runs in split_runs]

    stacked = np.vstack([runs.matrix.E for runs in split_runs])
    try:
        universal: Optional[landscape.Embedding2D] = landscape.pca_embed(stacked, landscape.UNIVERSAL)
    except LandscapeError as exc:
        logger.warning('no universal embedding (%s)', exc)
        universal = None
    return build_envelope(config, ds, analyses, split_runs, universal)


# ---------------------------------------------------------------------------
# Envelope
# ---------------------------------------------------------------------------

def decision_constants(config: ExperimentConfig) -> Dict[str, Any]:
    return {
        'prng': model_zoo.PRNG_NAME,
        'lbfgs_memory': model_zoo.LBFGS_MEMORY,
        'armijo_c1': model_zoo.ARMIJO_C1,
        'max_backtracks': model_zoo.MAX_BACKTRACKS,
        'grad_tol': config.grad_tol,
        'max_iter': config.max_iter,
        'degeneracy_tol': config.degeneracy_tol,
        'normalize_eps': config.normalize_eps,
        'kmeans_restarts': landscape.KMEANS_RESTARTS,
        'kmeans_max_iter': landscape.KMEANS_MAX_ITER,
        'k_range': list(config.k_range),
        'attribution_tolerance': dis.ATTRIBUTION_TOLERANCE,
    }


def _embedding_dict(emb: Optional[landscape.Embedding2D]) -> Optional[Dict[str, Any]]:
    if emb is None:
        return None
    return {'mode': emb.mode, 'coords': emb.coords, 'explained_variance_ratio': emb.explained_variance_ratio,
            'mean_point': emb.mean_point}


def _split_block(a: SplitAnalysis) -> Dict[str, Any]:
    block: Dict[str, Any] = {
        'labels': a.labels,
        'silhouette_by_k': {str(k): v for k, v in sorted(a.report.silhouette_by_k.items())},
        'supports': a.report.supports,
        'dropped_runs': a.dropped_runs,
        'accuracies': a.accuracies,
        'C': a.C_values,
        'centroid_profiles': [p.as_dict() for p in a.profiles],
        'embedding': _embedding_dict(a.embedding),
        'mean_offset_score': a.mean_offset,
        'disagreement': a.disagreement.as_dict() if a.disagreement else None,
        'representatives': a.representatives.as_dict() if a.representatives else None,
    }
    if a.embedding is not None and a.report.k_star >= 2:
        block['embedding']['centroid_points'] = a.embedding.project(
            np.array([p.raw_profile for p in a.profiles]))
    return block


def build_envelope(config: ExperimentConfig, ds: Dataset, analyses: Sequence[SplitAnalysis],
                   split_runs: Sequence[SplitRuns],
                   universal: Optional[landscape.Embedding2D]) -> Dict[str, Any]:
    universal_block = None
    if universal is not None:
        offsets = np.cumsum([0] + [r.matrix.R for r in split_runs])
        universal_block = _embedding_dict(universal)
        universal_block['split_offsets'] = offsets
        universal_block['accuracies'] = np.concatenate([r.accuracies for r in split_runs])
    return {
        'tool': {'name': 'basinscope', 'version': __version__},
        'constants': decision_constants(config),
        'config': config.as_dict(),
        'dataset': {'name': ds.name, 'n': ds.n, 'd': ds.d, 'feature_names': list(ds.schema.names),
                    'notes': dict(ds.notes)},
        'split_summary': [a.split_row() for a in analyses],
        'cluster_summary': [row for a in analyses for row in a.cluster_rows()],
        'splits': {str(a.split_seed): _split_block(a) for a in analyses},
        'universal': universal_block,
    }


def write_envelope(envelope: Dict[str, Any], output_dir) -> Path:
    path = repository.write_json(Path(output_dir) / ENVELOPE_NAME, envelope)
    logger.info('wrote %s', path)
    return path


def read_envelope(output_dir) -> Dict[str, Any]:
    path = Path(output_dir)
    if path.is_dir():
        path = path / ENVELOPE_NAME
    envelope = repository.read_json(path)
    for key in ('config', 'split_summary', 'cluster_summary', 'splits'):
        if key not in envelope:
            raise DataError(f'{path}: envelope lacks "{key}"')
    return envelope


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def _write_frame(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    return path


def split_summary_frame(envelope: Dict[str, Any]) -> pd.DataFrame:
    return pd.DataFrame(envelope['split_summary'], columns=SPLIT_COLUMNS)


def cluster_summary_frame(envelope: Dict[str, Any]) -> pd.DataFrame:
    is_forest = envelope['config'].get('model_class') == 'forest'
    return pd.DataFrame(envelope['cluster_summary'], columns=FOREST_CLUSTER_COLUMNS if is_forest else CLUSTER_COLUMNS)


def disagreement_frame(block: Dict[str, Any]) -> pd.DataFrame:
    top = block['top']
    n_models = len(block['model_run_ids'])
    frame = pd.DataFrame({
        'instance_id': [row['instance_id'] for row in top],
        'y_true': [row['y_true'] for row in top],
    })
    for i in range(n_models):
        frame[f'p_model_{i}'] = [row['probabilities'][i] for row in top]
    frame['delta'] = [row['delta'] for row in top]
    return frame


def centroid_frame(block: Dict[str, Any], feature_names: Sequence[str]) -> pd.DataFrame:
    rows = []
    for profile in block['centroid_profiles']:
        row: Dict[str, Any] = {'cluster': profile['cluster'], 'size': profile['size']}
        row.update(dict(zip(feature_names, profile['raw_profile'])))
        rows.append(row)
    return pd.DataFrame(rows, columns=['cluster', 'size'] + list(feature_names))


def write_tables(envelope: Dict[str, Any], output_dir) -> List[Path]:
    envelope = repository.to_jsonable(envelope)
    out = Path(output_dir)
    written = [
        _write_frame(split_summary_frame(envelope), out / 'split_summary.csv'),
        _write_frame(cluster_summary_frame(envelope), out / 'cluster_summary.csv'),
    ]
    names = envelope.get('dataset', {}).get('feature_names') or []
    for seed, block in sorted(envelope['splits'].items(), key=lambda kv: int(kv[0])):
        if block.get('disagreement'):
            written.append(_write_frame(disagreement_frame(block['disagreement']),
                                        out / f'disagreement_split{seed}.csv'))
        written.append(_write_frame(centroid_frame(block, names), out / f'centroids_split{seed}.csv'))
    logger.info('wrote %d tables to %s', len(written), out)
    return written
