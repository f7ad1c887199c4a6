"""SVG figures rendered from a report envelope.

Figures are built on bare ``Figure`` objects with the Agg canvas, so no
pyplot state is shared between calls. The SVG hash salt and the date stamp
are pinned, which makes output bytes a function of the envelope alone.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import logging

import matplotlib

matplotlib.use('Agg')

from matplotlib import colors as mcolors  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
import numpy as np  # noqa: E402

from basinscope.db.repository import to_jsonable  # noqa: E402

logger = logging.getLogger(__name__)

SVG_METADATA = {'Date': None, 'Creator': None}
CLUSTER_CMAP = 'tab10'
ACCURACY_CMAP = 'viridis'
C_CMAP = 'coolwarm'
DROPPED_COLOR = '#b0b0b0'
STAR_COLOR = 'red'


def _save(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({'svg.hashsalt': 'basinscope', 'svg.fonttype': 'path'}):
        fig.savefig(path, format='svg', metadata=SVG_METADATA, bbox_inches='tight')
    return path


def _arr(value) -> np.ndarray:
    return np.asarray(value if value is not None else [], dtype=np.float64)


def _mark_mean(ax, point) -> None:
    if point is None:
        return
    x, y = np.asarray(point, dtype=np.float64)[:2]
    ax.scatter([x], [y], marker='x', s=120, c='black', linewidths=2.5, zorder=5, gid='mean-vector')


def _axis_labels(ax, ratio: Sequence[float]) -> None:
    ratio = list(ratio) + [0.0, 0.0]
    ax.set_xlabel(f'PC1 ({100 * ratio[0]:.1f}%)')
    ax.set_ylabel(f'PC2 ({100 * ratio[1]:.1f}%)')


def embedding_figure(block: Dict[str, Any], split_seed: str) -> Optional[Figure]:
    """Cluster panel, accuracy panel and (for logistic runs) a log10 C panel."""
    emb = block.get('embedding')
    if not emb:
        return None
    coords = _arr(emb['coords'])
    labels = np.asarray(block['labels'], dtype=np.int64)
    acc = _arr(block['accuracies'])
    C = block.get('C')
    n_panels = 3 if C is not None else 2

    fig = Figure(figsize=(5.2 * n_panels, 4.6))
    axes = fig.subplots(1, n_panels, squeeze=False)[0]

    ax = axes[0]
    k = int(labels.max()) + 1 if labels.size else 0
    cmap = matplotlib.colormaps[CLUSTER_CMAP]
    if np.any(labels < 0):
        dropped = labels < 0
        ax.scatter(coords[dropped, 0], coords[dropped, 1], s=8, c=DROPPED_COLOR, gid='dropped', label='dropped')
    for j in range(k):
        members = labels == j
        ax.scatter(coords[members, 0], coords[members, 1], s=8, color=cmap(j % cmap.N),
                   alpha=0.75, gid=f'cluster-{j}', label=f'basin {j} (n={int(members.sum())})')
    centroids = emb.get('centroid_points')
    if centroids is not None and k >= 2:
        pts = _arr(centroids)
        ax.scatter(pts[:, 0], pts[:, 1], marker='*', s=260, c=STAR_COLOR, edgecolors='black',
                   linewidths=0.6, zorder=6, gid='centroids')
    _mark_mean(ax, emb.get('mean_point'))
    ax.set_title(f'split {split_seed}: basins')
    ax.legend(loc='best', fontsize=7, frameon=False)

    ax = axes[1]
    sc = ax.scatter(coords[:, 0], coords[:, 1], s=8, c=acc, cmap=ACCURACY_CMAP, gid='accuracy')
    fig.colorbar(sc, ax=ax, label='test accuracy')
    _mark_mean(ax, emb.get('mean_point'))
    ax.set_title(f'split {split_seed}: accuracy')

    if C is not None:
        ax = axes[2]
        logC = np.log10(_arr(C))
        sc = ax.scatter(coords[:, 0], coords[:, 1], s=8, c=logC, cmap=C_CMAP, gid='log10-C')
        fig.colorbar(sc, ax=ax, label='log10 C')
        _mark_mean(ax, emb.get('mean_point'))
        ax.set_title(f'split {split_seed}: regularisation')

    for ax in axes:
        _axis_labels(ax, _arr(emb.get('explained_variance_ratio')))
    fig.tight_layout()
    return fig


def universal_figure(universal: Dict[str, Any]) -> Figure:
    coords = _arr(universal['coords'])
    acc = _arr(universal['accuracies'])
    fig = Figure(figsize=(6.4, 5.2))
    ax = fig.subplots()
    norm = mcolors.Normalize(vmin=float(acc.min()), vmax=float(acc.max())) if acc.size else None
    sc = ax.scatter(coords[:, 0], coords[:, 1], s=6, c=acc, cmap=ACCURACY_CMAP, norm=norm, gid='accuracy')
    fig.colorbar(sc, ax=ax, label='test accuracy')
    _mark_mean(ax, universal.get('mean_point'))
    _axis_labels(ax, _arr(universal.get('explained_variance_ratio')))
    ax.set_title('all splits')
    fig.tight_layout()
    return fig


def centroid_figure(block: Dict[str, Any], split_seed: str) -> Optional[Figure]:
    """Top-feature bar chart per basin."""
    profiles = block.get('centroid_profiles') or []
    if not profiles:
        return None
    fig = Figure(figsize=(4.2 * len(profiles), 3.6))
    axes = fig.subplots(1, len(profiles), squeeze=False)[0]
    for ax, profile in zip(axes, profiles):
        names = [name for name, _ in profile['top_features']][::-1]
        values = [value for _, value in profile['top_features']][::-1]
        ax.barh(names, values, color=matplotlib.colormaps[CLUSTER_CMAP](profile['cluster'] % 10),
                gid=f'bars-{profile["cluster"]}')
        ax.set_title(f'split {split_seed} basin {profile["cluster"]} (n={profile["size"]})', fontsize=9)
        ax.set_xlabel('mean |SHAP|')
        ax.tick_params(axis='y', labelsize=7)
    fig.tight_layout()
    return fig


def render_figures(envelope: Dict[str, Any], output_dir) -> List[Path]:
    envelope = to_jsonable(envelope)
    out = Path(output_dir) / 'figures'
    written: List[Path] = []
    for seed, block in sorted(envelope['splits'].items(), key=lambda kv: int(kv[0])):
        fig = embedding_figure(block, seed)
        if fig is not None:
            written.append(_save(fig, out / f'split{seed}_embedding.svg'))
        fig = centroid_figure(block, seed)
        if fig is not None:
            written.append(_save(fig, out / f'split{seed}_centroids.svg'))
    if envelope.get('universal'):
        written.append(_save(universal_figure(envelope['universal']), out / 'universal.svg'))
    logger.info('wrote %d figure(s) to %s', len(written), out)
    return written
