"""Geometry of a population of explanation vectors.

Normalisation, collapse detection, k-means with silhouette-based choice of
k, basin supports and entropy, centroid profiles and 2-D PCA embeddings.
Every function here is deterministic for fixed inputs and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np

from basinscope.errors import LandscapeError, TotalDegeneracyError
from basinscope.services.model_zoo import derive_rng

logger = logging.getLogger(__name__)

DEFAULT_K_RANGE = tuple(range(2, 9))
DEFAULT_DEGENERACY_TOL = 1e-6
DEFAULT_NORMALIZE_EPS = 1e-12
KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 300
PER_SPLIT = 'per-split'
UNIVERSAL = 'universal'
_COSINE_SNAP = 1e-12


def _frozen(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ExplanationMatrix:
    E: np.ndarray
    run_ids: np.ndarray
    split_seed: int

    def __post_init__(self) -> None:
        E = _frozen(self.E)
        run_ids = _frozen(self.run_ids, np.int64)
        if E.ndim != 2 or E.shape[0] != run_ids.shape[0]:
            raise LandscapeError(f'explanation matrix {E.shape} does not match {run_ids.shape[0]} run ids')
        if not np.array_equal(run_ids, np.arange(run_ids.shape[0])):
            raise LandscapeError('run ids must be 0..R-1 in order')
        if not np.all(np.isfinite(E)) or np.any(E < 0):
            raise LandscapeError('explanation vectors must be finite and non-negative')
        object.__setattr__(self, 'E', E)
        object.__setattr__(self, 'run_ids', run_ids)

    @property
    def R(self) -> int:
        return int(self.E.shape[0])


@dataclass(frozen=True)
class NormalizedMatrix:
    Ehat: np.ndarray
    mu: np.ndarray
    dropped_rows: Tuple[int, ...]
    run_ids: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, 'Ehat', _frozen(self.Ehat))
        object.__setattr__(self, 'mu', _frozen(self.mu))
        object.__setattr__(self, 'run_ids', _frozen(self.run_ids, np.int64))
        object.__setattr__(self, 'dropped_rows', tuple(int(r) for r in self.dropped_rows))


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float


@dataclass(frozen=True)
class BasinReport:
    k_star: int
    labels: np.ndarray
    silhouette_by_k: Dict[int, float]
    supports: np.ndarray
    entropy_norm: float
    centroids: np.ndarray
    degenerate: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, 'labels', _frozen(self.labels, np.int64))
        object.__setattr__(self, 'supports', _frozen(self.supports))
        object.__setattr__(self, 'centroids', _frozen(self.centroids))
        if self.k_star < 1:
            raise LandscapeError('k* must be at least 1')
        if abs(float(self.supports.sum()) - 1.0) > 1e-12:
            raise LandscapeError('basin supports must sum to 1')
        if not 0.0 <= self.entropy_norm <= 1.0:
            raise LandscapeError('normalised entropy outside [0, 1]')
        if self.k_star == 1 and (self.entropy_norm != 0.0 or not self.degenerate):
            raise LandscapeError('k*=1 requires zero entropy and the degenerate flag')
        if self.labels.size and set(np.unique(self.labels).tolist()) != set(range(self.k_star)):
            raise LandscapeError('every basin must have at least one member')

    @property
    def silhouette(self) -> Optional[float]:
        return self.silhouette_by_k.get(self.k_star)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k_star)


@dataclass(frozen=True)
class CentroidProfile:
    cluster: int
    size: int
    centroid: np.ndarray
    raw_profile: np.ndarray
    top_features: List[Tuple[str, float]] = field(default_factory=list)

    def as_dict(self) -> Dict[str, object]:
        return {
            'cluster': self.cluster,
            'size': self.size,
            'centroid': self.centroid.tolist(),
            'raw_profile': self.raw_profile.tolist(),
            'top_features': [[name, float(v)] for name, v in self.top_features],
        }


@dataclass(frozen=True)
class Embedding2D:
    coords: np.ndarray
    explained_variance_ratio: np.ndarray
    mode: str
    mean_point: np.ndarray
    components: np.ndarray
    center: np.ndarray

    def project(self, vectors) -> np.ndarray:
        return (np.atleast_2d(np.asarray(vectors, dtype=np.float64)) - self.center) @ self.components.T


def _as_matrix(X) -> np.ndarray:
    if isinstance(X, ExplanationMatrix):
        return X.E
    if isinstance(X, NormalizedMatrix):
        return X.Ehat
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise LandscapeError(f'expected a 2-D matrix, got shape {X.shape}')
    return X


# ---------------------------------------------------------------------------
# Normalisation and collapse detection
# ---------------------------------------------------------------------------

def normalize(E: ExplanationMatrix, eps: float = DEFAULT_NORMALIZE_EPS) -> NormalizedMatrix:
    """Centre on the across-run mean and scale every row to unit l2 norm.

    Rows whose centred norm is below ``eps`` are dropped and listed.
    """
    if E.R < 2:
        raise LandscapeError('normalisation needs at least two runs')
    mu = E.E.mean(axis=0)
    centred = E.E - mu
    norms = np.linalg.norm(centred, axis=1)
    keep = norms >= eps
    dropped = E.run_ids[~keep]
    if not keep.any():
        raise TotalDegeneracyError(f'split {E.split_seed}: all {E.R} explanation vectors coincide with their mean')
    if dropped.size:
        logger.warning('split %s: dropped %d near-mean rows during normalisation', E.split_seed, dropped.size)
    return NormalizedMatrix(
        Ehat=centred[keep] / norms[keep, None],
        mu=mu,
        dropped_rows=tuple(dropped.tolist()),
        run_ids=E.run_ids[keep],
    )


def detect_degenerate(E, tol: float = DEFAULT_DEGENERACY_TOL) -> bool:
    """True when every run lies within a relative ``tol`` of the column mean."""
    X = _as_matrix(E)
    if X.shape[0] < 2:
        raise LandscapeError('degeneracy check needs at least two runs')
    mean = X.mean(axis=0)
    spread = float(np.max(np.linalg.norm(X - mean, axis=1)))
    return spread / max(float(np.linalg.norm(mean)), tol) < tol


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

def canonicalize_labels(labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Renumber clusters by descending size, ties by smallest member index.

    Returns (new_labels, order) where ``order[new] = old``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    sizes = np.array([np.sum(labels == c) for c in present])
    first = np.array([int(np.flatnonzero(labels == c)[0]) for c in present])
    order = present[np.lexsort((first, -sizes))]
    remap = np.empty(int(present.max()) + 1, dtype=np.int64)
    remap[order] = np.arange(order.size)
    return remap[labels], order


def _sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total > 0:
            u = rng.random() * total
            pick = int(min(np.searchsorted(np.cumsum(d2), u, side='right'), n - 1))
        else:
            pick = next(i for i in range(n) if i not in chosen)
        chosen.append(pick)
        d2 = np.minimum(d2, ((X - X[pick]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int) -> Tuple[np.ndarray, np.ndarray, float]:
    n, k = X.shape[0], centers.shape[0]
    labels: Optional[np.ndarray] = None
    for _ in range(max_iter):
        D = _sq_distances(X, centers)
        new = np.argmin(D, axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # reseed from the point farthest from its centre, never emptying another cluster
            own = D[np.arange(n), new]
            movable = counts[new] > 1
            p = int(np.argmax(np.where(movable, own, -np.inf)))
            counts[new[p]] -= 1
            new[p] = j
            counts[j] = 1
            centers[j] = X[p]
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centers = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
    inertia = float(((X - centers[labels]) ** 2).sum())
    return labels, centers, inertia


def kmeans(Ehat, k: int, seed: int, n_init: int = KMEANS_RESTARTS,
           max_iter: int = KMEANS_MAX_ITER) -> KMeansResult:
    """k-means++ seeded Lloyd iterations; best of ``n_init`` restarts by inertia."""
    X = _as_matrix(Ehat)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise LandscapeError(f'k={k} is invalid for {n} rows')
    best: Optional[Tuple[np.ndarray, np.ndarray, float]] = None
    for restart in range(n_init):
        rng = derive_rng(seed, restart)
        result = _lloyd(X, _kmeans_pp(X, k, rng), max_iter)
        if best is None or result[2] < best[2]:
            best = result
    labels, centers, inertia = best
    labels, order = canonicalize_labels(labels)
    return KMeansResult(labels=labels, centroids=centers[order], inertia=inertia)


# ---------------------------------------------------------------------------
# Silhouette and k selection
# ---------------------------------------------------------------------------

def _pairwise_euclidean(X: np.ndarray, block: int = 128) -> np.ndarray:
    n = X.shape[0]
    D = np.empty((n, n))
    for start in range(0, n, block):
        diff = X[start:start + block, None, :] - X[None, :, :]
        D[start:start + block] = np.sqrt((diff ** 2).sum(axis=2))
    return D


def silhouette_samples(X, labels) -> np.ndarray:
    X = _as_matrix(X)
    labels = np.asarray(labels, dtype=np.int64)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise LandscapeError('silhouette is undefined for a single cluster')
    onehot = (labels[:, None] == clusters[None, :]).astype(np.float64)
    counts = onehot.sum(axis=0)
    sums = _pairwise_euclidean(X) @ onehot
    own = np.searchsorted(clusters, labels)
    n = X.shape[0]
    own_count = counts[own]
    a = np.divide(sums[np.arange(n), own], own_count - 1,
                  out=np.zeros(n), where=own_count > 1)
    means = sums / counts
    means[np.arange(n), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(n), where=denom > 0)
    s[own_count <= 1] = 0.0
    return s


def silhouette(X, labels) -> float:
    """Mean silhouette with Euclidean distance; singleton members score 0."""
    return float(np.mean(silhouette_samples(X, labels)))


def basin_supports(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return np.bincount(labels, minlength=k) / labels.size


def mechanistic_entropy(supports) -> float:
    """Shannon entropy of the basin supports divided by log(k*)."""
    p = np.asarray(supports, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise LandscapeError('supports must be a non-empty vector')
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise LandscapeError('supports must be non-negative and sum to 1')
    if p.size == 1:
        return 0.0
    nz = p[p > 0]
    H = float(-(nz * np.log(nz)).sum())
    return float(min(1.0, max(0.0, H / math.log(p.size))))


def collapsed_report(n_rows: int, d: int) -> BasinReport:
    return BasinReport(
        k_star=1,
        labels=np.zeros(n_rows, dtype=np.int64),
        silhouette_by_k={},
        supports=np.ones(1),
        entropy_norm=0.0,
        centroids=np.zeros((1, d)),
        degenerate=True,
    )


def select_k(Ehat, seed: int, k_range: Iterable[int] = DEFAULT_K_RANGE,
             degenerate: bool = False) -> BasinReport:
    """Pick k* by maximum silhouette (ties toward smaller k).

    A degenerate population short-circuits to a single basin.
    """
    X = _as_matrix(Ehat)
    n, d = X.shape
    if degenerate:
        return collapsed_report(n, d)
    if n < 2:
        raise LandscapeError(f'need at least 2 rows to cluster, got {n}')
    candidates = sorted(k for k in set(k_range) if 2 <= k <= n - 1)
    if not candidates:
        raise LandscapeError(f'no admissible k in {sorted(set(k_range))} for {n} rows')

    scores: Dict[int, float] = {}
    fits: Dict[int, KMeansResult] = {}
    for k in candidates:
        fits[k] = kmeans(X, k, seed)
        scores[k] = silhouette(X, fits[k].labels)
        logger.debug('k=%d silhouette=%.4f inertia=%.6g', k, scores[k], fits[k].inertia)
    k_star = candidates[0]
    for k in candidates[1:]:
        if scores[k] > scores[k_star]:
            k_star = k

    labels = fits[k_star].labels
    supports = basin_supports(labels, k_star)
    centroids = np.stack([X[labels == j].mean(axis=0) for j in range(k_star)])
    return BasinReport(
        k_star=k_star,
        labels=labels,
        silhouette_by_k=scores,
        supports=supports,
        entropy_norm=mechanistic_entropy(supports),
        centroids=centroids,
        degenerate=False,
    )


# ---------------------------------------------------------------------------
# Profiles, embeddings, off-manifold score
# ---------------------------------------------------------------------------

def centroid_profiles(Ehat, labels, E_raw, feature_names: Optional[Sequence[str]] = None,
                      top_m: int = 5) -> List[CentroidProfile]:
    """Normalised centroid and raw mean |SHAP| profile per cluster, with top features."""
    X = _as_matrix(Ehat)
    raw = np.asarray(E_raw, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if raw.shape[0] != X.shape[0] or labels.shape[0] != X.shape[0]:
        raise LandscapeError('normalised rows, raw rows and labels must align')
    names = list(feature_names) if feature_names is not None else [f'f{j}' for j in range(raw.shape[1])]
    k = int(labels.max()) + 1 if labels.size else 0
    profiles = []
    for j in range(k):
        members = labels == j
        if not members.any():
            raise LandscapeError(f'cluster {j} is empty')
        profile = raw[members].mean(axis=0)
        order = np.lexsort((np.arange(profile.size), -profile))[:top_m]
        profiles.append(CentroidProfile(
            cluster=j,
            size=int(members.sum()),
            centroid=X[members].mean(axis=0),
            raw_profile=profile,
            top_features=[(names[i], float(profile[i])) for i in order],
        ))
    return profiles


def pca_embed(E_stack, mode: str = PER_SPLIT, reference_mean=None) -> Embedding2D:
    """Project onto the top two principal directions after mean-centring.

    ``reference_mean`` (default: the row mean) is projected into
    ``mean_point`` with the same transform.
    """
    if mode not in (PER_SPLIT, UNIVERSAL):
        raise LandscapeError(f'unknown embedding mode {mode!r}')
    X = _as_matrix(E_stack)
    n, d = X.shape
    if n < 3 or d < 2:
        raise LandscapeError(f'PCA embedding needs at least 3 rows and 2 columns, got {X.shape}')
    center = X.mean(axis=0)
    Xc = X - center
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    if S[0] <= 1e-12 * max(float(np.linalg.norm(X)), 1e-300):
        raise LandscapeError('rank-0 input: all rows coincide')
    V = Vt[:2].copy()
    for c in range(2):
        pivot = int(np.argmax(np.abs(V[c])))
        if V[c, pivot] < 0:
            V[c] = -V[c]
    ratio = S[:2] ** 2 / float((S ** 2).sum())
    ref = center if reference_mean is None else np.asarray(reference_mean, dtype=np.float64)
    return Embedding2D(
        coords=Xc @ V.T,
        explained_variance_ratio=ratio,
        mode=mode,
        mean_point=(ref - center) @ V.T,
        components=V,
        center=center,
    )


def _cosine_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    ua = np.divide(A, na[:, None], out=np.zeros_like(A), where=na[:, None] > 0)
    ub = np.divide(B, nb[:, None], out=np.zeros_like(B), where=nb[:, None] > 0)
    dist = 1.0 - ua @ ub.T
    zero_a = na == 0
    zero_b = nb == 0
    # a zero vector is at distance 1 from everything except another zero vector
    dist[zero_a, :] = 1.0
    dist[:, zero_b] = 1.0
    dist[np.ix_(zero_a, zero_b)] = 0.0
    dist = np.clip(dist, 0.0, 2.0)
    dist[dist < _COSINE_SNAP] = 0.0
    return dist


def mean_offset_score(E) -> float:
    """How far the average vector sits from the populated runs.

    Cosine distance from the mean vector to its nearest run, divided by the
    median nearest-neighbour cosine distance among runs. 0/0 is 0.
    """
    X = _as_matrix(E)
    n = X.shape[0]
    if n < 10:
        raise LandscapeError(f'mean offset score needs at least 10 runs, got {n}')
    to_mean = float(_cosine_distances(X.mean(axis=0)[None, :], X).min())
    pair = _cosine_distances(X, X)
    np.fill_diagonal(pair, np.inf)
    typical = float(np.median(pair.min(axis=1)))
    if to_mean == 0.0:
        return 0.0
    if typical == 0.0:
        return math.inf
    return to_mean / typical
