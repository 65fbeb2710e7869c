"""Random-forest regression: bagged CART ensembles, out-of-bag estimates and
permutation importance."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels, _rng
from ._parallel import chunks, ordered_map, resolve_threads
from .data import DegenerateDataError, bootstrap_indices, BagSample
from .tree import RegressionTree, TreeParams, _grow

FOREST_FORMAT_VERSION = 1

PROFILES = {"b1k": 1000, "b10k": 10000}


class ModelMismatchError(ValueError):
    """A forest was applied to a dataset it was not trained on."""


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 1000
    tree: TreeParams = field(default_factory=TreeParams)
    seed: int = 0

    def validate(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        self.tree.validate()
        _rng.check_seed(self.seed)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def to_dict(self):
        return {"n_trees": self.n_trees, "tree": self.tree.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, obj):
        tree = TreeParams(**obj.get("tree", {}))
        return cls(n_trees=int(obj.get("n_trees", 1000)), tree=tree, seed=int(obj.get("seed", 0)))

    @classmethod
    def profile(cls, name, seed=0, **tree_kw):
        try:
            n_trees = PROFILES[name.lower()]
        except KeyError:
            raise ValueError(f"unknown forest profile {name!r}; expected one of {sorted(PROFILES)}")
        return cls(n_trees=n_trees, tree=TreeParams(**tree_kw), seed=seed)


def tree_seed(seed, i):
    """Seed used for both the bag and the node streams of tree ``i``."""
    return _rng.derive_seed(seed, _rng.TREE, i)


@dataclass(eq=False)
class Forest:
    trees: list
    bags: list
    params: ForestParams
    trained_on: dict
    tree_seeds: list

    def __post_init__(self):
        if not len(self.trees) == len(self.bags) == self.params.n_trees:
            raise ValueError("trees, bags and n_trees disagree")
        self._packed = None

    @property
    def n_trees(self):
        return len(self.trees)

    @property
    def p(self):
        return self.trained_on["p"]

    def packed(self):
        """Concatenated node arrays with global child ids plus root/end offsets."""
        if self._packed is None:
            sizes = np.array([t.n_nodes for t in self.trees], dtype=np.int64)
            ends = np.cumsum(sizes)
            roots = ends - sizes
            left = np.concatenate([t.left for t in self.trees])
            right = np.concatenate([t.right for t in self.trees])
            offs = np.repeat(roots, sizes)
            left = np.where(left >= 0, left + offs, -1)
            right = np.where(right >= 0, right + offs, -1)
            self._packed = dict(
                feature=np.concatenate([t.feature for t in self.trees]),
                threshold=np.concatenate([t.threshold for t in self.trees]),
                left=left, right=right,
                value=np.concatenate([t.value for t in self.trees]),
                roots=roots, ends=ends)
        return self._packed

    def bag_counts(self):
        n = self.trained_on["n"]
        return np.stack([b.counts(n) for b in self.bags]).astype(np.int32)

    def used_features(self):
        used = np.zeros(self.p, dtype=bool)
        for t in self.trees:
            used[t.used_features()] = True
        return used

    def check_dataset(self, d):
        if d.fingerprint() != self.trained_on:
            raise ModelMismatchError(
                f"dataset fingerprint {d.fingerprint()} does not match the forest's "
                f"training data {self.trained_on}")

    def check_features(self, d):
        """Descriptor columns of ``d`` must match training (rows may differ)."""
        fp = d.fingerprint()
        if fp["p"] != self.trained_on["p"] or fp["names_sha256"] != self.trained_on["names_sha256"]:
            raise ModelMismatchError(
                f"dataset has {fp['p']} descriptors (names {fp['names_sha256']}); the forest "
                f"expects {self.trained_on['p']} (names {self.trained_on['names_sha256']})")

    # --------------------------------------------------------- persistence
    def to_dict(self):
        return {
            "format": "rfqsrr-forest",
            "version": FOREST_FORMAT_VERSION,
            "params": self.params.to_dict(),
            "fingerprint": self.trained_on,
            "tree_seeds": list(self.tree_seeds),
            "bags": [b.indices.tolist() for b in self.bags],
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, obj):
        if obj.get("format") != "rfqsrr-forest" or obj.get("version") != FOREST_FORMAT_VERSION:
            raise ValueError("not a version-1 rfqsrr forest document")
        n = obj["fingerprint"]["n"]
        bags = []
        for idx in obj["bags"]:
            idx = np.asarray(idx, dtype=np.int64)
            present = np.zeros(n, dtype=bool)
            present[idx] = True
            bags.append(BagSample(idx, np.flatnonzero(~present)))
        return cls([RegressionTree.from_dict(t) for t in obj["trees"]], bags,
                   ForestParams.from_dict(obj["params"]), dict(obj["fingerprint"]),
                   list(obj["tree_seeds"]))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def fit_forest(d, params=ForestParams(), threads=1):
    """Fit ``params.n_trees`` trees, tree i on its own bootstrap bag.

    Tree i uses seed ``tree_seed(params.seed, i)`` for its bag and its node
    streams, so the result does not depend on ``threads``.
    """
    params.validate()
    if d.n < 2:
        raise ValueError(f"need at least 2 rows to fit a forest, got {d.n}")
    mtry = params.tree.resolve_mtry(d.p)
    XT = np.ascontiguousarray(d.X.T)
    order = _kernels.presort(XT)
    y = np.ascontiguousarray(d.y)
    seeds = [tree_seed(params.seed, i) for i in range(params.n_trees)]

    def build(block):
        out = []
        for i in block:
            bag = bootstrap_indices(d.n, seeds[i])
            w = np.bincount(bag.indices, minlength=d.n).astype(np.int64)
            tree = _grow(XT, order, y, w, replace(params.tree, seed=seeds[i]), mtry)
            out.append((tree, bag))
        return out

    threads = resolve_threads(threads)
    blocks = chunks(params.n_trees, threads * 4 if threads > 1 else 1)
    results = [item for block in ordered_map(build, blocks, threads) for item in block]
    return Forest([r[0] for r in results], [r[1] for r in results], params,
                  d.fingerprint(), seeds)


def _as_matrix(f, X):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != f.p:
        raise ModelMismatchError(f"expected {f.p} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs must be finite")
    return np.ascontiguousarray(X), single


def predict(f, X):
    """Mean of the per-tree predictions; a float for one vector, else an array."""
    X, single = _as_matrix(f, X)
    pk = f.packed()
    out = _kernels.predict_packed(X, pk["feature"], pk["threshold"], pk["left"], pk["right"],
                                  pk["value"], pk["roots"])
    return float(out[0]) if single else out


def predict_each(f, X):
    """Per-tree predictions, shape (n_trees, n_rows)."""
    X, _ = _as_matrix(f, X)
    pk = f.packed()
    return _kernels.predict_each(X, pk["feature"], pk["threshold"], pk["left"], pk["right"],
                                 pk["value"], pk["roots"])


def oob_counts(f):
    """Number of trees whose bag excludes each training row."""
    return (f.bag_counts() == 0).sum(axis=0)


def oob_predict(f, d):
    """Out-of-bag prediction per training row; NaN where every bag holds the row."""
    f.check_dataset(d)
    pk = f.packed()
    sums, counts = _kernels.oob_sums(np.ascontiguousarray(d.X), f.bag_counts(), pk["feature"],
                                     pk["threshold"], pk["left"], pk["right"], pk["value"],
                                     pk["roots"])
    out = np.full(d.n, np.nan)
    has = counts > 0
    out[has] = sums[has] / counts[has]
    return out


def r2_score(y, pred):
    """1 - MSE / Var(y), with the population variance of ``y``; may be negative."""
    y = np.asarray(y, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if y.size < 2:
        raise ValueError("R^2 needs at least 2 rows")
    var = np.var(y)
    if var == 0:
        raise DegenerateDataError("response has zero variance on the evaluated rows")
    return float(1.0 - np.mean((y - pred) ** 2) / var)


def oob_diagnostics(f, d):
    pred = oob_predict(f, d)
    has = ~np.isnan(pred)
    return {"rows_used": int(has.sum()), "rows_without_oob_tree": int((~has).sum())}


def oob_r2(f, d):
    """Fraction of variance explained by OOB predictions over rows that have one."""
    pred = oob_predict(f, d)
    has = ~np.isnan(pred)
    if has.sum() < 2:
        raise ValueError("fewer than 2 rows have an out-of-bag prediction")
    return r2_score(d.y[has], pred[has])


def test_r2(f, test):
    """Fraction of variance explained on held-out rows."""
    if test.p != f.p:
        raise ModelMismatchError(f"expected {f.p} features, got {test.p}")
    return r2_score(test.y, predict(f, test.X))


test_r2.__test__ = False


@dataclass(frozen=True)
class ImportanceReport:
    names: tuple
    raw_importance: np.ndarray
    z_score: np.ndarray
    used_in_forest: np.ndarray
    sd: np.ndarray

    def ranking(self):
        """Feature indices by descending z-score, then raw importance, then index."""
        return np.lexsort((np.arange(self.z_score.size), -self.raw_importance, -self.z_score))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "raw_importance", "z_score", "used"])
        for nm, raw, z, used in zip(self.names, self.raw_importance, self.z_score,
                                    self.used_in_forest):
            w.writerow([nm, repr(float(raw)), repr(float(z)), int(bool(used))])
        return buf.getvalue()


_IMPORTANCE_BLOCK = 128


def permutation_importance(f, d, seed=0, threads=1):
    """OOB-MSE increase after permuting each feature, per tree, then averaged.

    The z-score is the mean over trees divided by its standard error
    ``sd / sqrt(n_trees)`` (sample sd); it is 0 whenever the sd is 0, which
    covers features no tree splits on.
    """
    f.check_dataset(d)
    pk = f.packed()
    X = np.ascontiguousarray(d.X)
    y = np.ascontiguousarray(d.y)
    W = f.bag_counts()
    keys = np.array([_rng.derive_seed(seed, _rng.IMPORTANCE, t) for t in range(f.n_trees)],
                    dtype=np.uint64)

    def block(rng_):
        sl = slice(rng_.start, rng_.stop)
        imp = _kernels.importance_matrix(X, y, W[sl], pk["feature"], pk["threshold"],
                                         pk["left"], pk["right"], pk["value"], pk["roots"][sl],
                                         pk["ends"][sl], keys[sl])
        return imp.shape[0], imp.mean(axis=0), ((imp - imp.mean(axis=0)) ** 2).sum(axis=0)

    n_blocks = max(1, math.ceil(f.n_trees / _IMPORTANCE_BLOCK))
    parts = ordered_map(block, chunks(f.n_trees, n_blocks), threads)
    # pairwise combination of block means and squared deviations
    count, mean, m2 = parts[0]
    for cnt_b, mean_b, m2_b in parts[1:]:
        tot = count + cnt_b
        delta = mean_b - mean
        mean = mean + delta * (cnt_b / tot)
        m2 = m2 + m2_b + delta ** 2 * (count * cnt_b / tot)
        count = tot
    T = f.n_trees
    sd = np.sqrt(m2 / (T - 1)) if T > 1 else np.zeros_like(mean)
    used = f.used_features()
    mean = np.where(used, mean, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, mean / (sd / math.sqrt(T)), 0.0)
    return ImportanceReport(d.descriptor_names, mean, z, used, sd)
