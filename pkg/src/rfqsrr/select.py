"""Feature-selection schemes: TopN by forest importance and bagged Boruta consensus."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _rng
from ._parallel import ordered_map
from .boruta import BorutaParams, boruta_run, important_set
from .data import bootstrap_indices
from .forest import ForestParams, fit_forest, permutation_importance


@dataclass(frozen=True)
class SelectionOutcome:
    method: str
    selected: frozenset
    scores: np.ndarray = None
    provenance: dict = field(default_factory=dict)

    def to_csv(self, names, header=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["method", "feature", "score", "selected"])
        for j, nm in enumerate(names):
            score = "" if self.scores is None else repr(float(self.scores[j]))
            w.writerow([self.method, nm, score, int(j in self.selected)])
        return buf.getvalue()


@dataclass(frozen=True)
class ConsensusParams:
    n_bags: int = 50
    threshold: float = 0.5
    boruta: BorutaParams = field(default_factory=BorutaParams)
    seed: int = 0

    def validate(self):
        if self.n_bags < 1:
            raise ValueError(f"n_bags must be >= 1, got {self.n_bags}")
        check_threshold(self.threshold)
        self.boruta.validate()
        _rng.check_seed(self.seed)


def check_threshold(x):
    if not 0 < x <= 1:
        raise ValueError(f"consensus threshold must be in (0, 1], got {x}")


def topn_label(n_keep):
    return f"TOP{n_keep}"


def consensus_label(x):
    return f"C_{x:g}"


def importance_ranking(d, params, threads=1):
    """Forest on all features, then permutation importance; returns (ranking, report)."""
    forest = fit_forest(d, params, threads=threads)
    report = permutation_importance(forest, d, seed=_rng.derive_seed(params.seed, _rng.IMPORTANCE),
                                    threads=threads)
    return report.ranking(), report


def top_n(d, n_keep, params=ForestParams(), threads=1, ranking=None):
    """Keep the ``n_keep`` features with the highest importance z-score.

    Ties fall back to raw importance, then feature index. Pass a precomputed
    ``(ranking, report)`` to reuse one ranking across several sizes.
    """
    if not 1 <= n_keep <= d.p:
        raise ValueError(f"n_keep must be in [1, {d.p}], got {n_keep}")
    order, report = ranking if ranking is not None else importance_ranking(d, params, threads)
    return SelectionOutcome(topn_label(n_keep), frozenset(int(j) for j in order[:n_keep]),
                            report.z_score, {"forest_seed": params.seed,
                                             "n_trees": params.n_trees})


def _bag_boruta(d, params, b, threads):
    bag = bootstrap_indices(d.n, _rng.derive_seed(params.seed, _rng.CONSENSUS, b))
    bp = replace(params.boruta, seed=_rng.derive_seed(params.seed, _rng.CONSENSUS, b, 1))
    res = boruta_run(d.rows(bag.indices), bp, threads=threads)
    return important_set(res)


def consensus_counts(d, params, threads=1):
    """Boruta on each of ``n_bags`` bootstrap samples; returns per-bag Confirmed
    indicator matrix of shape (n_bags, p)."""
    params.validate()
    # parallelize over bags; each inner run is then single threaded
    inner = 1 if params.n_bags > 1 else threads
    sets = ordered_map(lambda b: _bag_boruta(d, params, b, inner), range(params.n_bags),
                       threads)
    M = np.zeros((params.n_bags, d.p), dtype=bool)
    for b, s in enumerate(sets):
        M[b, sorted(s)] = True
    return M


def required_hits(x, n_bags):
    # ceil(x * N) with a guard against 0.3 * 10 = 3.0000000000000004
    return max(1, math.ceil(round(x * n_bags, 9)))


def consensus_from_counts(M, x, provenance=None):
    check_threshold(x)
    counts = M.sum(axis=0)
    need = required_hits(x, M.shape[0])
    selected = frozenset(int(j) for j in np.flatnonzero(counts >= need))
    prov = dict(provenance or {})
    prov.update({"n_bags": int(M.shape[0]), "required_hits": need})
    return SelectionOutcome(consensus_label(x), selected, counts.astype(float), prov)


def consensus(d, params, threads=1):
    """Features confirmed in at least ceil(x * N) of N bagged Boruta runs."""
    M = consensus_counts(d, params, threads)
    return consensus_from_counts(M, params.threshold, {"seed": params.seed})


def consensus_curve(d, params, thresholds, threads=1):
    """One bagged Boruta pass shared by every threshold; outcomes sorted by threshold."""
    thresholds = sorted(float(x) for x in thresholds)
    for x in thresholds:
        check_threshold(x)
    M = consensus_counts(d, params, threads)
    return [consensus_from_counts(M, x, {"seed": params.seed}) for x in thresholds]


def consensus_audit_csv(M, names):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature", "confirm_count"])
    for nm, c in zip(names, M.sum(axis=0)):
        w.writerow([nm, int(c)])
    return buf.getvalue()
