"""CART regression trees with a random candidate-feature subset at every split."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels, _rng

TREE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeParams:
    """Growth controls.

    ``mtry=None`` resolves to ``max(1, p // 3)`` for the dataset being fit.
    ``min_node_size`` is the smallest (bag-weighted) node that may be split.
    """

    mtry: Optional[int] = None
    min_node_size: int = 5
    max_depth: Optional[int] = None
    seed: int = 0

    def resolve_mtry(self, p):
        mtry = max(1, p // 3) if self.mtry is None else int(self.mtry)
        if not 1 <= mtry <= p:
            raise ValueError(f"mtry must be in [1, {p}], got {mtry}")
        return mtry

    def validate(self):
        if self.min_node_size < 2:
            raise ValueError(f"min_node_size must be >= 2, got {self.min_node_size}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError(f"mtry must be >= 1, got {self.mtry}")
        _rng.check_seed(self.seed)

    def to_dict(self):
        return {"mtry": self.mtry, "min_node_size": self.min_node_size,
                "max_depth": self.max_depth, "seed": self.seed}


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    score: float


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Array-backed binary tree; node 0 is the root, leaves have feature -1.

    For a split node ``x[feature] <= threshold`` routes left. ``value`` holds
    the bag-weighted mean response of the node and ``count`` its bag-weighted
    sample count.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    root: int = 0

    @property
    def n_nodes(self):
        return self.feature.size

    def is_leaf(self, node):
        return self.feature[node] < 0

    def leaves(self):
        return np.flatnonzero(self.feature < 0)

    def used_features(self):
        return np.unique(self.feature[self.feature >= 0])

    def depth(self):
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[node] + 1
                depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def apply(self, X):
        """Leaf id reached by each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.empty(X.shape[0], dtype=np.int64)
        for i, x in enumerate(X):
            out[i] = self._leaf(x)
        return out

    def _leaf(self, x):
        node = self.root
        while self.feature[node] >= 0:
            f = self.feature[node]
            if f >= x.shape[0]:
                raise IndexError(f"tree splits on feature {f} but x has {x.shape[0]} entries")
            node = self.left[node] if x[f] <= self.threshold[node] else self.right[node]
        return node

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] and self.feature.max(initial=-1) >= X.shape[1]:
            raise IndexError(
                f"tree splits on feature {self.feature.max()} but X has {X.shape[1]} columns")
        return _kernels.predict_packed(np.ascontiguousarray(X), self.feature, self.threshold,
                                       self.left, self.right, self.value,
                                       np.array([self.root], dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, RegressionTree):
            return NotImplemented
        return self.to_json() == other.to_json()

    __hash__ = None

    # --------------------------------------------------------- persistence
    def to_dict(self):
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                nodes.append({"id": i, "feature": int(self.feature[i]),
                              "threshold": float(self.threshold[i]),
                              "left": int(self.left[i]), "right": int(self.right[i])})
            else:
                nodes.append({"id": i, "prediction": float(self.value[i]),
                              "count": int(self.count[i])})
        return {"version": TREE_FORMAT_VERSION, "root": int(self.root), "nodes": nodes}

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj):
        if obj.get("version") != TREE_FORMAT_VERSION:
            raise ValueError(f"unsupported tree format version {obj.get('version')!r}")
        nodes = obj["nodes"]
        k = len(nodes)
        feature = np.full(k, -1, dtype=np.int64)
        threshold = np.zeros(k)
        left = np.full(k, -1, dtype=np.int64)
        right = np.full(k, -1, dtype=np.int64)
        value = np.zeros(k)
        count = np.zeros(k, dtype=np.int64)
        for node in nodes:
            i = node["id"]
            if "feature" in node:
                feature[i] = node["feature"]
                threshold[i] = node["threshold"]
                left[i] = node["left"]
                right[i] = node["right"]
            else:
                value[i] = node["prediction"]
                count[i] = node["count"]
        tree = cls(feature, threshold, left, right, value, count, int(obj["root"]))
        tree.check_structure()
        return tree

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def check_structure(self):
        """Raise ValueError unless every node is reached exactly once from the root."""
        seen = np.zeros(self.n_nodes, dtype=np.int64)
        stack = [self.root]
        while stack:
            node = stack.pop()
            if not 0 <= node < self.n_nodes:
                raise ValueError(f"child id {node} out of range")
            seen[node] += 1
            if seen[node] > 1:
                raise ValueError(f"node {node} reached twice")
            if self.feature[node] >= 0:
                stack.extend((self.right[node], self.left[node]))
        if not np.all(seen == 1):
            raise ValueError(f"unreachable nodes: {np.flatnonzero(seen == 0).tolist()}")


def _weights(n, rows):
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("rows must be non-empty")
    if rows.min() < 0 or rows.max() >= n:
        raise IndexError("row index out of range")
    return np.bincount(rows, minlength=n).astype(np.int64)


def best_split(X, y, rows, candidate_features):
    """Best variance-reduction split of ``rows`` over ``candidate_features``.

    ``rows`` may repeat indices (bootstrap bags); repeats count as separate
    samples. Thresholds are midpoints between consecutive distinct values,
    ties go to the lowest feature index and then the lowest threshold.
    Returns None when no candidate separates distinct values or the best
    reduction is zero.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = _weights(X.shape[0], rows)
    if w.sum() < 2:
        raise ValueError("best_split needs at least 2 samples")
    idx = np.flatnonzero(w)
    mean = np.dot(w[idx], y[idx]) / w.sum()
    yc = np.zeros_like(y)
    yc[idx] = y[idx] - mean
    cands = np.asarray(candidate_features, dtype=np.int64)
    m = idx.size
    XT = np.ascontiguousarray(X.T)
    where = np.where(w > 0, 0, -1).astype(np.int64)
    f, t, s = _kernels.node_best_split(XT, _kernels.presort(XT), where, 0,
                                       _kernels.reciprocals(int(w.sum())), yc, w, idx, 0, m,
                                       cands, cands.size, np.empty(m),
                                       np.empty(m + 1, dtype=np.int64))
    ss = float(np.dot(w[idx], yc[idx] ** 2))
    if f < 0 or s <= 1e-12 * ss:
        return None
    return SplitCandidate(int(f), float(t), float(max(s, 0.0)))


def fit_tree(d, rows, params=TreeParams()):
    """Grow a tree on the (possibly repeated) ``rows`` of dataset ``d``.

    Each node draws ``mtry`` candidate features without replacement from a
    stream keyed by ``params.seed`` and the node's path from the root, so the
    tree is a pure function of its inputs.
    """
    params.validate()
    mtry = params.resolve_mtry(d.p)
    w = _weights(d.n, rows)
    XT = np.ascontiguousarray(d.X.T)
    return _grow(XT, _kernels.presort(XT), d.y, w, params, mtry)


def _grow(XT, order, y, w, params, mtry):
    max_depth = -1 if params.max_depth is None else int(params.max_depth)
    arrays = _kernels.grow_tree(XT, order, y, w, int(params.seed), int(mtry),
                                int(params.min_node_size), max_depth)
    return RegressionTree(*arrays)


def predict_tree(t, x):
    """Prediction of tree ``t`` for one length-p vector ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    return float(t.value[t._leaf(x)])
