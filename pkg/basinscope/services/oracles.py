"""Brute-force references and property checks behind the ``verify`` command.

The references are exponential in the number of features or points and
are only meant for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import factorial
from typing import Callable, Dict, List, Sequence, Tuple
import logging
import time

import numpy as np

from basinscope.services import attribution, landscape, model_zoo
from basinscope.services.disagreement import disagreement_from_probabilities
from basinscope.services.model_zoo import DecisionTree, ForestHyper, LogRegHyper

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# References
# ---------------------------------------------------------------------------

def _shapley_from_game(value: Callable[[frozenset], float], d: int) -> np.ndarray:
    phi = np.zeros(d)
    weights = [factorial(s) * factorial(d - s - 1) / factorial(d) for s in range(d)]
    for j in range(d):
        others = [k for k in range(d) if k != j]
        for size in range(d):
            for S in combinations(others, size):
                S = frozenset(S)
                phi[j] += weights[size] * (value(S | {j}) - value(S))
    return phi


def tree_conditional_expectation(tree: DecisionTree, x: np.ndarray, S: frozenset) -> float:
    """Follow x on features in S; average children by cover elsewhere."""
    def walk(node: int) -> float:
        if tree.left[node] < 0:
            return float(tree.value[node, 1])
        f = int(tree.feature[node])
        lo, hi = int(tree.left[node]), int(tree.right[node])
        if f in S:
            return walk(lo) if x[f] <= tree.threshold[node] else walk(hi)
        return (tree.cover[lo] * walk(lo) + tree.cover[hi] * walk(hi)) / tree.cover[node]
    return walk(0)


def brute_force_tree_shap(tree: DecisionTree, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _shapley_from_game(lambda S: tree_conditional_expectation(tree, x, S), x.shape[0])


def brute_force_linear_shap(w, b: float, x, mu) -> np.ndarray:
    """Shapley values of the log-odds with absent features imputed to mu."""
    w, x, mu = (np.asarray(v, dtype=np.float64) for v in (w, x, mu))

    def value(S: frozenset) -> float:
        z = mu.copy()
        idx = list(S)
        z[idx] = x[idx]
        return float(w @ z + b)
    return _shapley_from_game(value, x.shape[0])


def _partitions(n: int, k: int):
    """Restricted growth strings: every partition of n items into exactly k blocks."""
    labels = [0] * n

    def rec(i: int, used: int):
        if n - i < k - used:
            return
        if i == n:
            if used == k:
                yield list(labels)
            return
        for c in range(min(used + 1, k)):
            labels[i] = c
            yield from rec(i + 1, max(used, c + 1))
    yield from rec(1, 1) if n else iter(())


def exhaustive_kmeans_inertia(X, k: int) -> float:
    X = np.asarray(X, dtype=np.float64)
    best = np.inf
    for labels in _partitions(X.shape[0], k):
        lab = np.asarray(labels)
        sse = 0.0
        for c in range(k):
            block = X[lab == c]
            sse += float(((block - block.mean(axis=0)) ** 2).sum())
            if sse >= best:
                break
        best = min(best, sse)
    return best


def scalar_logreg_root(C: float, tol: float = 1e-12) -> float:
    """Root of w = 2C * sigmoid(-w) by bisection."""
    lo, hi = 0.0, 2.0 * C
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid - 2.0 * C / (1.0 + np.exp(mid)) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def random_tree(rng: np.random.Generator, d: int, max_leaves: int = 16) -> DecisionTree:
    """Random binary tree with consistent covers and leaf probabilities."""
    n_leaves = int(rng.integers(1, max_leaves + 1))
    feature, threshold, left, right, cover = [-1], [0.0], [-1], [-1], [float(rng.integers(50, 500))]
    leaves = [0]
    while len(leaves) < n_leaves:
        splittable = [i for i in leaves if cover[i] >= 2]
        if not splittable:
            break
        node = splittable[int(rng.integers(len(splittable)))]
        leaves.remove(node)
        lo_cover = float(rng.integers(1, int(cover[node])))
        feature[node] = int(rng.integers(d))
        threshold[node] = float(np.round(rng.normal(), 3))
        for child_cover in (lo_cover, cover[node] - lo_cover):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            cover.append(child_cover)
            leaves.append(len(cover) - 1)
        left[node], right[node] = len(cover) - 2, len(cover) - 1
    p = rng.random(len(cover))
    return DecisionTree(feature=feature, threshold=threshold, left=left, right=right,
                        value=np.column_stack([1.0 - p, p]), cover=cover)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_tree_shap(n_trees: int = 200, seed: int = 0) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trees):
        d = int(rng.integers(1, 11))
        tree = random_tree(rng, d)
        x = rng.normal(size=d)
        got = attribution.tree_shap(tree, x)
        worst = max(worst, float(np.max(np.abs(got - brute_force_tree_shap(tree, x)))))
    return worst <= 1e-8, f'max |TreeSHAP - subset Shapley| = {worst:.2e} over {n_trees} trees'


def check_efficiency(n_models: int = 100, seed: int = 1) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_models):
        d = int(rng.integers(2, 8))
        X = rng.normal(size=(20, d))
        w, b, mu = rng.normal(size=d), float(rng.normal()), rng.normal(size=d)
        m = model_zoo.LinearModel(w=w, b=b, converged=True, final_grad_norm=0.0)
        s = attribution.linear_shap(m, X, mu)
        worst = max(worst, float(np.max(np.abs(s.values.sum(axis=1) - (X @ w + b - s.base_value)))))

        X = rng.normal(size=(40, d))
        y = (X[:, 0] + 0.5 * rng.normal(size=40) > 0).astype(int)
        y[:2] = (0, 1)
        h = ForestHyper(n_estimators=3, max_depth=int(rng.integers(1, 5)), min_samples_leaf=1,
                        max_features='sqrt', seed=i)
        forest = model_zoo.train_forest(X, y, h)
        s = attribution.forest_shap(forest, X[:10])
        p = model_zoo.predict_proba_forest(forest, X[:10])
        worst = max(worst, float(np.max(np.abs(s.values.sum(axis=1) - (p - s.base_value)))))
    return worst <= 1e-8, f'max efficiency gap {worst:.2e} over {n_models} linear + {n_models} forest models'


def check_kmeans(n_instances: int = 100, seed: int = 2) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        k = int(rng.integers(2, 4))
        n = int(rng.integers(k + 1, 13 if k == 2 else 10))
        centers = rng.normal(scale=5.0, size=(k, 2))
        X = centers[np.arange(n) % k] + rng.normal(scale=0.3, size=(n, 2))
        got = landscape.kmeans(X, k, int(rng.integers(1_000_000))).inertia
        worst = max(worst, got - exhaustive_kmeans_inertia(X, k))
    return worst <= 1e-9, f'max inertia excess over exhaustive optimum {worst:.2e}'


def check_logreg(n_instances: int = 50, seed: int = 3) -> Tuple[bool, str]:
    X = np.array([[1.0], [-1.0]])
    y = np.array([1, 0])
    m = model_zoo.train_logreg(X, y, LogRegHyper(C=1.0, fit_intercept=False))
    w_err = abs(float(m.w[0]) - scalar_logreg_root(1.0))

    rng = np.random.default_rng(seed)
    worst = 0.0
    step = 1e-5
    for _ in range(n_instances):
        n, d = int(rng.integers(5, 30)), int(rng.integers(1, 6))
        Xr = rng.normal(size=(n, d))
        yr = rng.integers(0, 2, size=n)
        C = float(10 ** rng.uniform(-2, 1))
        theta = rng.normal(size=d + 1)

        def J(t):
            return model_zoo.logistic_objective(t[:d], t[d], Xr, yr, C)[0]
        _, gw, gb = model_zoo.logistic_objective(theta[:d], theta[d], Xr, yr, C)
        g = np.append(gw, gb)
        fd = np.array([(J(theta + step * e) - J(theta - step * e)) / (2 * step) for e in np.eye(d + 1)])
        worst = max(worst, float(np.max(np.abs(fd - g)) / max(1.0, float(np.max(np.abs(g))))))
    ok = w_err <= 1e-6 and worst <= 1e-4
    return ok, f'scalar w={float(m.w[0]):.6f} (|err|={w_err:.1e}); max relative gradient error {worst:.1e}'


def check_entropy() -> Tuple[bool, str]:
    a = landscape.mechanistic_entropy([0.866, 0.134])
    b = landscape.mechanistic_entropy([0.556, 0.444])
    ok = abs(a - 0.568) <= 1e-3 and abs(b - 0.991) <= 1e-3 and landscape.mechanistic_entropy([0.5, 0.5]) == 1.0
    return ok, f'H(866/134)={a:.4f}, H(556/444)={b:.4f}'


def check_disagreement(n_sets: int = 200, seed: int = 4) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for _ in range(n_sets):
        P = rng.random((int(rng.integers(1, 30)), int(rng.integers(2, 6))))
        delta = disagreement_from_probabilities(P)
        if np.any(delta < 0) or np.any(delta > 1):
            return False, 'delta outside [0, 1]'
        if not np.array_equal(delta, disagreement_from_probabilities(P[:, rng.permutation(P.shape[1])])):
            return False, 'delta depends on model order'
        extra = np.column_stack([P, rng.random(P.shape[0])])
        if np.any(disagreement_from_probabilities(extra) < delta):
            return False, 'adding a model decreased delta'
    return True, f'bounds, permutation invariance and monotonicity on {n_sets} random model sets'


SUITES: Dict[str, Callable[..., Tuple[bool, str]]] = {
    'entropy': check_entropy,
    'efficiency': check_efficiency,
    'tree_shap': check_tree_shap,
    'kmeans': check_kmeans,
    'logreg': check_logreg,
    'disagreement': check_disagreement,
}


def run_verify_suite(names: Sequence[str] = ()) -> List[CheckResult]:
    results = []
    for name in (names or SUITES):
        t0 = time.perf_counter()
        try:
            passed, detail = SUITES[name]()
        except Exception as exc:
            logger.exception('verify suite %s raised', name)
            passed, detail = False, f'{type(exc).__name__}: {exc}'
        results.append(CheckResult(name, passed, detail, round(time.perf_counter() - t0, 3)))
        log = logger.info if passed else logger.error
        log('%-12s %s  %s', name, 'ok' if passed else 'FAILED', detail)
    return results
