"""Gradient-boosted regression trees on architecture encodings.

Squared-error stagewise boosting: start from the target mean and fit each
depth-limited tree to the current residuals. Split search is exhaustive
over midpoints between sorted distinct feature values; ties keep the first
candidate in (feature, threshold) order, so fitting is fully deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_ARCHIVE = 8


class ArchiveTooSmallError(ValueError):
    pass


@dataclass
class RegressionTree:
    # node arrays; leaves have feature == -1
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def _add(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.empty(len(X))
        for i, x in enumerate(X):
            node = 0
            while self.feature[node] >= 0:
                node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
            out[i] = self.value[node]
        return out

    def to_dict(self) -> dict:
        return {k: list(getattr(self, k)) for k in ("feature", "threshold", "left", "right", "value")}


def _best_split(X: np.ndarray, r: np.ndarray, min_leaf: int):
    n, d = X.shape
    total, total_sq = r.sum(), (r * r).sum()
    parent_sse = total_sq - total * total / n
    best = None  # (gain, feature, threshold)
    for f in range(d):
        order = np.argsort(X[:, f], kind="stable")
        xs, rs = X[order, f], r[order]
        csum = np.cumsum(rs)
        for i in range(min_leaf - 1, n - min_leaf):
            if xs[i] == xs[i + 1]:
                continue
            nl = i + 1
            sl = csum[i]
            sr = total - sl
            sse = total_sq - sl * sl / nl - sr * sr / (n - nl)
            gain = parent_sse - sse
            if best is None or gain > best[0] + 1e-12:
                best = (gain, f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def fit_tree(X: np.ndarray, r: np.ndarray, max_depth: int, min_leaf: int = 1) -> RegressionTree:
    tree = RegressionTree()

    def grow(idx: np.ndarray, depth: int) -> int:
        node = tree._add(value=float(r[idx].mean()))
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            return node
        split = _best_split(X[idx], r[idx], min_leaf)
        if split is None or split[0] <= 1e-12:
            return node
        _, f, thr = split
        mask = X[idx, f] <= thr
        tree.feature[node] = f
        tree.threshold[node] = float(thr)
        tree.left[node] = grow(idx[mask], depth + 1)
        tree.right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(len(r)), 0)
    return tree


@dataclass
class GradientBoostedTrees:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 1
    init: float = 0.0
    trees: list[RegressionTree] = field(default_factory=list)
    n_features: int = 0

    def fit(self, X, y) -> "GradientBoostedTrees":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.n_features = X.shape[1]
        self.init = float(y.mean())
        self.trees = []
        F = np.full(len(y), self.init)
        for _ in range(self.n_trees):
            tree = fit_tree(X, y - F, self.max_depth, self.min_leaf)
            self.trees.append(tree)
            F = F + self.learning_rate * tree.predict(X)
        return self

    def _check(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        out = np.full(len(X), self.init)
        for t in self.trees:
            out = out + self.learning_rate * t.predict(X)
        return out

    def staged_predict(self, X) -> np.ndarray:
        """(n_trees + 1, n) predictions after 0..n_trees boosting stages."""
        X = self._check(X)
        stages = [np.full(len(X), self.init)]
        for t in self.trees:
            stages.append(stages[-1] + self.learning_rate * t.predict(X))
        return np.array(stages)

    def disagreement(self, X) -> np.ndarray:
        """Spread of the later half of the stage predictions, a cheap uncertainty proxy."""
        st = self.staged_predict(X)
        return st[len(st) // 2:].std(axis=0)


def fit_surrogates(X, targets: dict[str, np.ndarray], n_trees: int = 100, max_depth: int = 3,
                   learning_rate: float = 0.1) -> dict[str, GradientBoostedTrees]:
    X = np.asarray(X, dtype=np.float64)
    if len(X) < MIN_ARCHIVE:
        raise ArchiveTooSmallError(f"need at least {MIN_ARCHIVE} evaluated architectures, have {len(X)}")
    return {name: GradientBoostedTrees(n_trees, max_depth, learning_rate).fit(X, y)
            for name, y in targets.items()}
