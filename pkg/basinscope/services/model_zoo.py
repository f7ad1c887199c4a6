"""The two model classes: l2-regularised logistic regression and random forests.

Training is a pure function of its inputs. The logistic solver never touches
an RNG; forests draw bootstrap samples and split features from a PCG64
stream derived from ``(seed, tree_index)``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np

from basinscope.errors import ModelError

logger = logging.getLogger(__name__)

LBFGS_MEMORY = 10
ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 60
DEFAULT_GRAD_TOL = 1e-6
DEFAULT_MAX_ITER = 1000
PRNG_NAME = f'numpy.random.PCG64 via SeedSequence (numpy {np.__version__})'


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------

def derive_rng(*keys: int) -> np.random.Generator:
    """PCG64 generator whose stream depends only on the integer keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed derived from the integer keys."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)
    return int(state[0])


def _check_matrix(X, name: str = 'X') -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ModelError(f'{name} must be a 2-D matrix, got shape {X.shape}')
    if X.shape[0] == 0:
        raise ModelError(f'{name} has zero rows')
    if not np.all(np.isfinite(X)):
        raise ModelError(f'{name} contains non-finite values')
    return X


def _check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ModelError(f'expected {n} labels, got shape {y.shape}')
    if not np.all(np.isin(y, (0, 1))):
        raise ModelError('labels must be 0 or 1')
    return y.astype(np.int64)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-log(1 + e^-z)) keeps full relative precision in both tails
    return np.exp(-np.logaddexp(0.0, -z))


# ---------------------------------------------------------------------------
# Logistic regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogRegHyper:
    C: float
    grad_tol: float = DEFAULT_GRAD_TOL
    max_iter: int = DEFAULT_MAX_ITER
    fit_intercept: bool = True

    def __post_init__(self) -> None:
        if not (self.C > 0 and math.isfinite(self.C)):
            raise ModelError(f'C must be positive, got {self.C}')
        if not self.grad_tol > 0:
            raise ModelError(f'grad_tol must be positive, got {self.grad_tol}')
        if int(self.max_iter) < 1:
            raise ModelError(f'max_iter must be positive, got {self.max_iter}')

    def as_dict(self) -> Dict[str, Any]:
        return {'C': float(self.C), 'grad_tol': float(self.grad_tol),
                'max_iter': int(self.max_iter), 'fit_intercept': bool(self.fit_intercept)}

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'LogRegHyper':
        return LogRegHyper(C=float(data['C']), grad_tol=float(data['grad_tol']),
                           max_iter=int(data['max_iter']), fit_intercept=bool(data['fit_intercept']))


@dataclass(frozen=True)
class LinearModel:
    w: np.ndarray
    b: float
    converged: bool
    final_grad_norm: float
    n_iter: int = 0

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, 'w', w)

    @property
    def d(self) -> int:
        return int(self.w.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': 'logreg', 'w': self.w.tolist(), 'b': float(self.b),
                'converged': bool(self.converged), 'final_grad_norm': float(self.final_grad_norm),
                'n_iter': int(self.n_iter)}


def logistic_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray,
                       C: float) -> Tuple[float, np.ndarray, float]:
    """J(w, b) = 0.5 ||w||^2 + C * sum log(1 + exp(-y~ (w.x + b))) and its gradient."""
    ysign = 2.0 * np.asarray(y, dtype=np.float64) - 1.0
    margin = ysign * (X @ w + b)
    value = 0.5 * float(w @ w) + C * float(np.logaddexp(0.0, -margin).sum())
    coef = -C * ysign * _sigmoid(-margin)
    return value, w + X.T @ coef, float(coef.sum())


def _lbfgs(fun, x0: np.ndarray, grad_tol: float, max_iter: int):
    """Limited-memory BFGS with backtracking (sufficient decrease) line search.

    Accepted iterates never increase the objective. Returns
    (x, f, g, converged, n_iter).
    """
    x = x0.copy()
    f, g = fun(x)
    s_hist: deque = deque(maxlen=LBFGS_MEMORY)
    y_hist: deque = deque(maxlen=LBFGS_MEMORY)
    it = 0
    while it < max_iter:
        gnorm = float(np.max(np.abs(g)))
        if gnorm <= grad_tol:
            return x, f, g, True, it
        it += 1

        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, yv in zip(reversed(s_hist), reversed(y_hist)):
            rho = 1.0 / float(yv @ s)
            a = rho * float(s @ q)
            q -= a * yv
            alphas.append((rho, a))
        if s_hist:
            gamma = float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1])
        else:
            gamma = 1.0 / max(1.0, float(np.linalg.norm(g)))
        r = gamma * q
        for (s, yv), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
            beta = rho * float(yv @ r)
            r += s * (a - beta)
        direction = -r
        gd = float(g @ direction)
        if not gd < 0:
            s_hist.clear()
            y_hist.clear()
            direction = -g * gamma
            gd = float(g @ direction)

        step = 1.0
        accepted = None
        fallback = None
        for _ in range(MAX_BACKTRACKS):
            x_new = x + step * direction
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new):
                if f_new <= f + ARMIJO_C1 * step * gd:
                    accepted = (x_new, f_new, g_new)
                    break
                # near the optimum the decrease can fall below float resolution of J
                if fallback is None and f_new <= f and np.max(np.abs(g_new)) < gnorm:
                    fallback = (x_new, f_new, g_new)
            step *= 0.5
        if accepted is None:
            accepted = fallback
        if accepted is None:
            if s_hist:
                s_hist.clear()
                y_hist.clear()
                continue
            break

        x_new, f_new, g_new = accepted
        s = x_new - x
        yv = g_new - g
        if float(s @ yv) > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            s_hist.append(s)
            y_hist.append(yv)
        x, f, g = x_new, f_new, g_new

    gnorm = float(np.max(np.abs(g)))
    return x, f, g, gnorm <= grad_tol, it


def train_logreg(X, y, h: LogRegHyper, initial: Optional[Tuple[np.ndarray, float]] = None) -> LinearModel:
    """Minimise the l2-regularised logistic objective (intercept unpenalised)."""
    X = _check_matrix(X)
    y = _check_labels(y, X.shape[0])
    if np.unique(y).size < 2:
        raise ModelError('logistic regression needs both classes in the training data')
    d = X.shape[1]
    C = float(h.C)

    def fun(theta: np.ndarray):
        w = theta[:d]
        b = theta[d] if h.fit_intercept else 0.0
        value, gw, gb = logistic_objective(w, b, X, y, C)
        grad = np.empty_like(theta)
        grad[:d] = gw
        if h.fit_intercept:
            grad[d] = gb
        return value, grad

    size = d + 1 if h.fit_intercept else d
    theta0 = np.zeros(size)
    if initial is not None:
        w0, b0 = initial
        theta0[:d] = np.asarray(w0, dtype=np.float64)
        if h.fit_intercept:
            theta0[d] = float(b0)

    theta, _, grad, converged, n_iter = _lbfgs(fun, theta0, float(h.grad_tol), int(h.max_iter))
    gnorm = float(np.max(np.abs(grad)))
    if not converged:
        logger.warning('logreg C=%.6g did not converge in %d iterations (|grad|_inf=%.3g)',
                       C, n_iter, gnorm)
    b = float(theta[d]) if h.fit_intercept else 0.0
    return LinearModel(w=theta[:d], b=b, converged=bool(converged), final_grad_norm=gnorm, n_iter=n_iter)


def predict_proba_linear(m: LinearModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.d:
        raise ModelError(f'expected {m.d} columns, got shape {X.shape}')
    return _sigmoid(X @ m.w + m.b)


# ---------------------------------------------------------------------------
# Random forests
# ---------------------------------------------------------------------------

MaxFeatures = Union[str, float]


@dataclass(frozen=True)
class ForestHyper:
    n_estimators: int
    max_depth: Optional[int]
    min_samples_leaf: int
    max_features: MaxFeatures
    seed: int

    def __post_init__(self) -> None:
        if int(self.n_estimators) < 1:
            raise ModelError('n_estimators must be positive')
        if self.max_depth is not None and int(self.max_depth) < 1:
            raise ModelError('max_depth must be positive or None')
        if int(self.min_samples_leaf) < 1:
            raise ModelError('min_samples_leaf must be positive')
        if isinstance(self.max_features, str):
            if self.max_features not in ('sqrt', 'log2'):
                raise ModelError(f'unknown max_features rule {self.max_features!r}')
        elif not 0.0 < float(self.max_features) <= 1.0:
            raise ModelError('max_features fraction must lie in (0, 1]')
        if int(self.seed) < 0:
            raise ModelError('seed must be non-negative')

    def features_per_split(self, d: int) -> int:
        if self.max_features == 'sqrt':
            m = int(math.sqrt(d))
        elif self.max_features == 'log2':
            m = int(math.log2(d)) if d > 0 else 0
        else:
            m = int(float(self.max_features) * d)
        return min(d, max(1, m))

    def as_dict(self) -> Dict[str, Any]:
        return {'n_estimators': int(self.n_estimators), 'max_depth': self.max_depth,
                'min_samples_leaf': int(self.min_samples_leaf),
                'max_features': self.max_features if isinstance(self.max_features, str) else float(self.max_features),
                'seed': int(self.seed)}

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'ForestHyper':
        depth = data.get('max_depth')
        mf = data['max_features']
        return ForestHyper(n_estimators=int(data['n_estimators']),
                           max_depth=None if depth is None else int(depth),
                           min_samples_leaf=int(data['min_samples_leaf']),
                           max_features=mf if isinstance(mf, str) else float(mf),
                           seed=int(data['seed']))


class TreeNode(NamedTuple):
    feature: int
    threshold: float
    left: int
    right: int
    proba: Tuple[float, float]
    cover: float

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass(frozen=True)
class DecisionTree:
    """Node table of a binary CART tree; node 0 is the root.

    Rows with ``x[feature] <= threshold`` go left. Leaves have
    ``left == right == -1``. ``value[i]`` is the (negative, positive) class
    frequency among the training samples covering node ``i``.
    """
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    def __post_init__(self) -> None:
        for name, dtype in (('feature', np.int64), ('left', np.int64), ('right', np.int64),
                            ('threshold', np.float64), ('value', np.float64), ('cover', np.float64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.value.ndim != 2 or self.value.shape[1] != 2:
            raise ModelError('tree values must be an (n_nodes, 2) matrix')

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    def node(self, i: int) -> TreeNode:
        return TreeNode(int(self.feature[i]), float(self.threshold[i]), int(self.left[i]),
                        int(self.right[i]), (float(self.value[i, 0]), float(self.value[i, 1])),
                        float(self.cover[i]))

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):  # parents precede children
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            active = np.flatnonzero(self.left[node] >= 0)
            if active.size == 0:
                return node
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X), 1]

    def to_dict(self) -> Dict[str, Any]:
        return {'feature': self.feature.tolist(), 'threshold': self.threshold.tolist(),
                'left': self.left.tolist(), 'right': self.right.tolist(),
                'value': self.value.tolist(), 'cover': self.cover.tolist()}

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'DecisionTree':
        return DecisionTree(**{k: data[k] for k in ('feature', 'threshold', 'left', 'right', 'value', 'cover')})


@dataclass(frozen=True)
class ForestModel:
    trees: Tuple[DecisionTree, ...]
    hyper: ForestHyper
    n_features: int

    def to_dict(self) -> Dict[str, Any]:
        return {'kind': 'forest', 'hyper': self.hyper.as_dict(), 'n_features': int(self.n_features),
                'trees': [t.to_dict() for t in self.trees]}


def _best_split(Xn: np.ndarray, yn: np.ndarray, features: Sequence[int], min_leaf: int):
    """Lowest weighted Gini split over the candidate features.

    Ties prefer the lower feature index, then the lower threshold.
    """
    n = yn.shape[0]
    total_pos = float(yn.sum())
    best: Optional[Tuple[float, int, float]] = None
    n_left_all = np.arange(1, n, dtype=np.float64)
    for f in sorted(features):
        order = np.argsort(Xn[:, f], kind='stable')
        xs = Xn[order, f]
        ys = yn[order].astype(np.float64)
        valid = (xs[1:] > xs[:-1]) & (n_left_all >= min_leaf) & (n - n_left_all >= min_leaf)
        if not valid.any():
            continue
        pos_left = np.cumsum(ys)[:-1][valid]
        nl = n_left_all[valid]
        nr = n - nl
        pos_right = total_pos - pos_left
        # n * weighted Gini impurity of the two children
        score = (nl - (pos_left ** 2 + (nl - pos_left) ** 2) / nl
                 + nr - (pos_right ** 2 + (nr - pos_right) ** 2) / nr)
        i = int(np.argmin(score))
        if best is None or score[i] < best[0]:
            k = int(np.flatnonzero(valid)[i])
            thr = 0.5 * (xs[k] + xs[k + 1])
            if not xs[k] <= thr < xs[k + 1]:
                thr = float(xs[k])
            best = (float(score[i]), int(f), float(thr))
    return best


def _grow_tree(X: np.ndarray, y: np.ndarray, h: ForestHyper, rng: np.random.Generator) -> DecisionTree:
    n, d = X.shape
    draw = rng.integers(0, n, size=n)
    Xb = X[draw]
    yb = y[draw]
    m = h.features_per_split(d)
    min_leaf = int(h.min_samples_leaf)

    feature: List[int] = [-1]
    threshold: List[float] = [0.0]
    left: List[int] = [-1]
    right: List[int] = [-1]
    value: List[Tuple[float, float]] = [(0.0, 0.0)]
    cover: List[float] = [0.0]

    stack = [(0, np.arange(n), 0)]
    while stack:
        node_id, idx, depth = stack.pop()
        yn = yb[idx]
        pos = float(yn.sum())
        size = float(idx.size)
        value[node_id] = ((size - pos) / size, pos / size)
        cover[node_id] = size

        if pos == 0 or pos == size:
            continue
        if h.max_depth is not None and depth >= h.max_depth:
            continue
        if idx.size < 2 * min_leaf:
            continue
        candidates = rng.choice(d, size=m, replace=False)
        split = _best_split(Xb[idx], yn, candidates, min_leaf)
        if split is None:
            continue
        _, f, thr = split
        go_left = Xb[idx, f] <= thr
        ids = []
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append((0.0, 0.0))
            cover.append(0.0)
            ids.append(len(feature) - 1)
        feature[node_id] = f
        threshold[node_id] = thr
        left[node_id], right[node_id] = ids
        # right pushed first so the left subtree is grown first
        stack.append((ids[1], idx[~go_left], depth + 1))
        stack.append((ids[0], idx[go_left], depth + 1))

    return DecisionTree(feature=feature, threshold=threshold, left=left, right=right,
                        value=value, cover=cover)


def train_forest(X, y, h: ForestHyper) -> ForestModel:
    """Bootstrap-aggregated CART trees with per-split feature subsampling."""
    X = _check_matrix(X)
    y = _check_labels(y, X.shape[0])
    trees = tuple(_grow_tree(X, y, h, derive_rng(h.seed, t)) for t in range(int(h.n_estimators)))
    logger.debug('forest seed=%s: %d trees, mean depth %.1f', h.seed, len(trees),
                 float(np.mean([t.depth() for t in trees])))
    return ForestModel(trees=trees, hyper=h, n_features=X.shape[1])


def predict_proba_forest(m: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.n_features:
        raise ModelError(f'expected {m.n_features} columns, got shape {X.shape}')
    if not m.trees:
        raise ModelError('forest has no trees')
    total = np.zeros(X.shape[0])
    for tree in m.trees:
        total += tree.predict_proba(X)
    return total / len(m.trees)


def accuracy(p, y) -> float:
    """Share of rows where (p >= 0.5) matches the label; p = 0.5 counts as positive."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if p.shape != y.shape:
        raise ModelError(f'probability and label lengths differ: {p.shape} vs {y.shape}')
    if p.size == 0:
        raise ModelError('accuracy of an empty prediction set')
    return float(np.mean((p >= 0.5).astype(np.int64) == y))
