"""Random forest of gini-split binary decision trees."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import DimensionError

LEAF = -1


@dataclass
class Tree:
    """Array-encoded binary tree.  Internal node j sends ``x[feature[j]] <= threshold[j]``
    to ``left[j]``; leaves have ``feature == -1`` and carry their positive fraction."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X):
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] != LEAF
        return node

    def predict_proba(self, X):
        return self.value[self.apply(X)]

    @property
    def n_nodes(self):
        return len(self.feature)

    def __eq__(self, other):
        return isinstance(other, Tree) and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("feature", "threshold", "left", "right", "value"))


@dataclass
class RandomForestModel:
    n_features: int
    trees: list
    seed: int = 0
    min_leaf: int = 2
    max_features: str = "sqrt"
    bootstrap: bool = True

    kind = "rf"

    @property
    def n_trees(self):
        return len(self.trees)

    @property
    def input_dim(self):
        return self.n_features

    def predict_proba(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionError(f"expected (batch, {self.n_features}) input, got {X.shape}")
        return np.mean([t.predict_proba(X) for t in self.trees], axis=0)

    def predict(self, x) -> float:
        return float(self.predict_proba(np.asarray(x, dtype=float)[None])[0])

    def hyperparams(self):
        return {"n_features": self.n_features, "n_trees": self.n_trees, "seed": self.seed,
                "min_leaf": self.min_leaf, "max_features": self.max_features, "bootstrap": self.bootstrap}


def _n_split_features(rule, d):
    if rule == "sqrt":
        return max(1, math.ceil(math.sqrt(d)))
    if rule == "all":
        return d
    return max(1, min(d, int(rule)))


def _best_split(xs, ys, min_leaf):
    """Best gini split of one feature; returns (weighted impurity, threshold) or None."""
    order = np.argsort(xs, kind="stable")
    x = xs[order]
    pos = np.cumsum(ys[order])
    n = len(x)
    # candidate split after position i-1 (left has i samples)
    i = np.arange(min_leaf, n - min_leaf + 1)
    if len(i) == 0:
        return None
    valid = x[i - 1] < x[i]
    if not valid.any():
        return None
    i = i[valid]
    nl = i.astype(float)
    nr = n - nl
    pl = pos[i - 1]
    pr = pos[-1] - pl
    # n * weighted gini = nl*(1-(pl/nl)^2-((nl-pl)/nl)^2) + same for right
    cost = 2 * pl * (nl - pl) / nl + 2 * pr * (nr - pr) / nr
    k = int(np.argmin(cost))
    j = i[k]
    return cost[k], 0.5 * (x[j - 1] + x[j])


def _grow(X, y, rng, min_leaf, n_split):
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, LEAF), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            lst.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y)))]
    d = X.shape[1]
    while stack:
        node, idx = stack.pop()
        yy = y[idx]
        npos = yy.sum()
        value[node] = float(npos / len(idx))
        if npos == 0 or npos == len(idx) or len(idx) < 2 * min_leaf:
            continue
        best = None
        # sampled features first; fall back to the rest if none of them can split
        perm = rng.permutation(d)
        for start in range(0, d, n_split):
            for f in perm[start:start + n_split]:
                r = _best_split(X[idx, f], yy, min_leaf)
                if r is not None and (best is None or r[0] < best[0]):
                    best = (r[0], r[1], f)
            if best is not None:
                break
        if best is None:
            continue
        _, thr, f = best
        mask = X[idx, f] <= thr
        li, ri = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = int(f), float(thr), li, ri
        stack.append((ri, idx[~mask]))
        stack.append((li, idx[mask]))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value))


def rf_train(data, n_trees=56, seed=0, min_leaf=2, max_features="sqrt", bootstrap=True) -> RandomForestModel:
    """Grow ``n_trees`` unpruned gini trees on bootstrap resamples.

    Each tree draws from its own generator seeded by ``(seed, tree index)``, so
    results do not depend on training order.
    """
    X, y = data
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(X) == 0:
        raise ValueError("expected a non-empty (n, d) feature array with n labels")
    classes = set(np.unique(y).tolist())
    if not classes <= {0.0, 1.0}:
        raise ValueError("labels must be 0/1")
    if len(classes) < 2:
        raise ValueError("random forest needs both classes present; got a single-class dataset")
    n, d = X.shape
    n_split = _n_split_features(max_features, d)
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        trees.append(_grow(X[idx], y[idx], rng, min_leaf, n_split))
    return RandomForestModel(d, trees, seed, min_leaf, str(max_features), bootstrap)


def rf_predict(m: RandomForestModel, x) -> float:
    return m.predict(x)
