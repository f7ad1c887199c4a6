"""SHAP attributions for the two model classes and the per-run global vector.

Linear models are explained exactly on the log-odds with a training-mean
background (feature independence). Trees use path-dependent TreeSHAP on the
positive-class probability, where node covers define the conditional
expectations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import factorial
from typing import List, Tuple
import logging

import numpy as np

from basinscope.errors import AttributionError
from basinscope.services.model_zoo import DecisionTree, ForestModel, LinearModel

logger = logging.getLogger(__name__)

LOG_ODDS = 'log-odds'
PROBABILITY = 'probability'


@dataclass(frozen=True)
class ShapMatrix:
    values: np.ndarray
    base_value: float
    output_space: str

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise AttributionError('SHAP values must form a 2-D matrix')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)
        if self.output_space not in (LOG_ODDS, PROBABILITY):
            raise AttributionError(f'unknown output space {self.output_space!r}')


@dataclass(frozen=True)
class GlobalImportance:
    e: np.ndarray
    run_id: int

    def __post_init__(self) -> None:
        e = np.array(self.e, dtype=np.float64)
        if e.ndim != 1 or np.any(e < 0):
            raise AttributionError('global importance must be a non-negative vector')
        e.setflags(write=False)
        object.__setattr__(self, 'e', e)


def linear_shap(m: LinearModel, X_test, background_mean) -> ShapMatrix:
    """phi_j(x) = w_j (x_j - mu_j); base value w.mu + b."""
    X = np.asarray(X_test, dtype=np.float64)
    mu = np.asarray(background_mean, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.d or mu.shape != (m.d,):
        raise AttributionError(
            f'dimension mismatch: model has {m.d} features, X {X.shape}, background {mu.shape}'
        )
    return ShapMatrix(values=(X - mu) * m.w, base_value=float(m.w @ mu + m.b), output_space=LOG_ODDS)


# ---------------------------------------------------------------------------
# Path-dependent TreeSHAP
# ---------------------------------------------------------------------------
#
# For a leaf with value v reached through unique features F (|F| = D), let
# z_k be the product of cover ratios of the splits on k along the path and
# o_k(x) in {0, 1} whether x satisfies all of them. The leaf adds to feature j
#
#     v (o_j - z_j) sum_{S subset F\{j}} |S|! (D-|S|-1)! / D!  prod_S o_k  prod_{F\S\{j}} z_k
#
# which is the leaf term of the recursive TreeSHAP algorithm written in closed
# form. The subset sum is read off the coefficients of prod_{k != j}(z_k + o_k t),
# built from prefix and suffix products so every row is handled at once.


@dataclass(frozen=True)
class _LeafPath:
    value: float
    features: Tuple[int, ...]
    zero_fraction: np.ndarray
    conditions: Tuple[Tuple[Tuple[float, bool], ...], ...]


def _leaf_paths(tree: DecisionTree) -> List[_LeafPath]:
    if tree.n_nodes == 0:
        raise AttributionError('tree has no nodes')
    if np.any(tree.cover <= 0):
        bad = int(np.flatnonzero(tree.cover <= 0)[0])
        raise AttributionError(f'invalid tree: node {bad} has zero cover')

    paths: List[_LeafPath] = []
    stack = [(0, ())]
    while stack:
        node, path = stack.pop()
        if tree.left[node] < 0:
            order: List[int] = []
            zero = {}
            conds = {}
            for f, thr, went_left, ratio in path:
                if f not in zero:
                    order.append(f)
                    zero[f] = 1.0
                    conds[f] = []
                zero[f] *= ratio
                conds[f].append((thr, went_left))
            paths.append(_LeafPath(
                value=float(tree.value[node, 1]),
                features=tuple(order),
                zero_fraction=np.array([zero[f] for f in order]),
                conditions=tuple(tuple(conds[f]) for f in order),
            ))
            continue
        f = int(tree.feature[node])
        thr = float(tree.threshold[node])
        parent_cover = float(tree.cover[node])
        lo, hi = int(tree.left[node]), int(tree.right[node])
        stack.append((hi, path + ((f, thr, False, float(tree.cover[hi]) / parent_cover),)))
        stack.append((lo, path + ((f, thr, True, float(tree.cover[lo]) / parent_cover),)))
    return paths


@lru_cache(maxsize=64)
def _subset_weights(D: int) -> np.ndarray:
    """W[a, b] = (a+b)! (D-1-a-b)! / D! for a + b <= D - 1, else 0."""
    w = np.array([factorial(m) * factorial(D - 1 - m) / factorial(D) for m in range(D)])
    a = np.arange(D)
    idx = a[:, None] + a[None, :]
    W = np.where(idx <= D - 1, w[np.minimum(idx, D - 1)], 0.0)
    W.setflags(write=False)
    return W


def _shift(poly: np.ndarray) -> np.ndarray:
    out = np.zeros_like(poly)
    out[..., 1:] = poly[..., :-1]
    return out


def tree_base_value(tree: DecisionTree) -> float:
    """Cover-weighted mean of the leaf values."""
    leaves = tree.leaves()
    return float(tree.value[leaves, 1] @ tree.cover[leaves] / tree.cover[0])


def tree_shap_matrix(tree: DecisionTree, X) -> np.ndarray:
    """Path-dependent TreeSHAP for every row of X (positive-class probability)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise AttributionError('X must be a 2-D matrix')
    used = tree.feature[tree.feature >= 0]
    if used.size and int(used.max()) >= X.shape[1]:
        raise AttributionError(f'tree splits on feature {int(used.max())} but X has {X.shape[1]} columns')

    n = X.shape[0]
    phi = np.zeros((n, X.shape[1]))
    for leaf in _leaf_paths(tree):
        D = len(leaf.features)
        if D == 0 or leaf.value == 0.0:
            continue
        one = np.ones((n, D))
        for k, (f, conds) in enumerate(zip(leaf.features, leaf.conditions)):
            column = X[:, f]
            ok = np.ones(n, dtype=bool)
            for thr, went_left in conds:
                ok &= (column <= thr) if went_left else (column > thr)
            one[:, k] = ok
        z = leaf.zero_fraction

        prefix = np.zeros((D, n, D))
        prefix[0, :, 0] = 1.0
        for j in range(1, D):
            prefix[j] = prefix[j - 1] * z[j - 1] + _shift(prefix[j - 1]) * one[:, j - 1:j]
        suffix = np.zeros((D, n, D))
        suffix[D - 1, :, 0] = 1.0
        for j in range(D - 2, -1, -1):
            suffix[j] = suffix[j + 1] * z[j + 1] + _shift(suffix[j + 1]) * one[:, j + 1:j + 2]

        weighted = np.einsum('jra,ab,jrb->jr', prefix, _subset_weights(D), suffix)
        phi[:, list(leaf.features)] += leaf.value * (one - z[None, :]) * weighted.T
    return phi


def tree_shap(tree: DecisionTree, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise AttributionError('x must be a vector')
    return tree_shap_matrix(tree, x[None, :])[0]


def forest_shap(m: ForestModel, X_test) -> ShapMatrix:
    """Mean of per-tree TreeSHAP values; base value is the mean tree base value."""
    if not m.trees:
        raise AttributionError('cannot explain an empty forest')
    X = np.asarray(X_test, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.n_features:
        raise AttributionError(f'expected {m.n_features} columns, got shape {X.shape}')
    total = np.zeros(X.shape)
    base = 0.0
    for tree in m.trees:
        total += tree_shap_matrix(tree, X)
        base += tree_base_value(tree)
    k = len(m.trees)
    return ShapMatrix(values=total / k, base_value=base / k, output_space=PROBABILITY)


def global_importance(s: ShapMatrix, run_id: int) -> GlobalImportance:
    """Mean absolute attribution per feature over the explained rows."""
    if s.values.shape[0] == 0:
        raise AttributionError('cannot summarise attributions of an empty test set')
    return GlobalImportance(e=np.abs(s.values).mean(axis=0), run_id=int(run_id))
