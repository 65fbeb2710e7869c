"""All-relevant feature selection against shuffled shadow copies.

Each iteration appends a permuted copy of every undecided feature, fits a
forest, and counts a hit for each undecided real feature whose importance
z-score beats the best shadow. A two-sided binomial test on the hit counts,
Bonferroni-corrected over the undecided features, confirms or rejects.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from . import _rng
from .data import Dataset, DegenerateDataError
from .forest import ForestParams, fit_forest, permutation_importance

CONFIRMED = "Confirmed"
REJECTED = "Rejected"
TENTATIVE = "Tentative"

SHADOW_PREFIX = "SHADOW_"


@dataclass(frozen=True)
class BorutaParams:
    forest: ForestParams = field(default_factory=lambda: ForestParams(n_trees=1000))
    max_iterations: int = 100
    alpha: float = 0.01
    min_shadows: int = 5
    seed: int = 0
    correction: str = "all"  # Bonferroni divisor: "all" features or "undecided" ones

    def validate(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.min_shadows < 1:
            raise ValueError(f"min_shadows must be >= 1, got {self.min_shadows}")
        if self.correction not in ("all", "undecided"):
            raise ValueError(f"correction must be 'all' or 'undecided', got {self.correction!r}")
        self.forest.validate()
        _rng.check_seed(self.seed)

    def to_dict(self):
        return {"forest": self.forest.to_dict(), "max_iterations": self.max_iterations,
                "alpha": self.alpha, "min_shadows": self.min_shadows, "seed": self.seed,
                "correction": self.correction}


@dataclass
class BorutaResult:
    names: tuple
    status: list
    hits: np.ndarray
    trials: np.ndarray
    decision_iteration: list
    importance_history: np.ndarray  # (iterations, p); NaN once a feature is rejected
    shadow_max_history: np.ndarray
    iterations: int
    params: BorutaParams

    def indices(self, status):
        return [j for j, s in enumerate(self.status) if s == status]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "status", "hits", "trials", "decision_iteration"])
        for j, nm in enumerate(self.names):
            it = self.decision_iteration[j]
            w.writerow([nm, self.status[j], int(self.hits[j]), int(self.trials[j]),
                        "" if it is None else it])
        return buf.getvalue()

    def history_json(self):
        hist = []
        for k in range(self.iterations):
            row = self.importance_history[k]
            hist.append({
                "iteration": k + 1,
                "shadow_max_z": float(self.shadow_max_history[k]),
                "z_score": {self.names[j]: float(row[j])
                            for j in range(len(self.names)) if not np.isnan(row[j])},
            })
        return json.dumps({"params": self.params.to_dict(), "iterations": hist}, indent=1)


def add_shadows(d, seed, columns=None, min_shadows=5):
    """Append a row-permuted copy of each column in ``columns`` (default: all).

    When fewer than ``min_shadows`` columns are given, copies cycle through
    them until ``min_shadows`` shadows exist. Shadow k is shuffled by its own
    stream ``(seed, k)``. Returns the extended dataset and the source column
    of each shadow.
    """
    columns = np.arange(d.p) if columns is None else np.asarray(columns, dtype=np.int64)
    if columns.size == 0:
        return d, np.empty(0, dtype=np.int64)
    n_shadow = max(columns.size, min_shadows)
    sources = columns[np.arange(n_shadow) % columns.size]
    S = np.empty((d.n, n_shadow))
    names = []
    for k, j in enumerate(sources):
        S[:, k] = d.X[_rng.generator(seed, _rng.SHADOW, k).permutation(d.n), j]
        lap = k // columns.size
        suffix = "" if lap == 0 else f"#{lap}"
        names.append(f"{SHADOW_PREFIX}{d.descriptor_names[j]}{suffix}")
    ext = Dataset(d.compound_ids, d.descriptor_names + tuple(names), np.hstack([d.X, S]), d.y)
    return ext, sources


def binomial_two_sided(hits, trials):
    """Two-sided p-value of ``hits`` under Binomial(trials, 1/2)."""
    hits = np.asarray(hits)
    trials = np.asarray(trials)
    extreme = np.maximum(hits, trials - hits)
    return np.minimum(1.0, 2.0 * stats.binom.sf(extreme - 1, trials, 0.5))


def boruta_run(d, params=BorutaParams(), threads=1, log=None):
    """Run the shadow-feature selection loop on ``d``.

    Rejected features leave the dataset for later iterations; confirmed ones
    stay as predictors but are no longer shadowed or tested. Features still
    undecided after ``max_iterations`` are Tentative.
    """
    params.validate()
    if d.response_variance() == 0:
        raise DegenerateDataError("response has zero variance")
    p = d.p
    state = np.zeros(p, dtype=np.int8)  # 0 undecided, 1 confirmed, -1 rejected
    hits = np.zeros(p, dtype=np.int64)
    trials = np.zeros(p, dtype=np.int64)
    decided_at = [None] * p
    history = []
    shadow_max = []

    it = 0
    while it < params.max_iterations and np.any(state == 0):
        it += 1
        undecided = np.flatnonzero(state == 0)
        active = np.flatnonzero(state >= 0)
        it_seed = _rng.derive_seed(params.seed, _rng.BORUTA, it)
        real = d.columns(active)
        pos = np.searchsorted(active, undecided)
        ext, _ = add_shadows(real, it_seed, columns=pos, min_shadows=params.min_shadows)
        forest = fit_forest(ext, replace(params.forest, seed=_rng.derive_seed(it_seed, 1)),
                            threads=threads)
        imp = permutation_importance(forest, ext, seed=_rng.derive_seed(it_seed, 2),
                                     threads=threads)
        z_real = imp.z_score[:active.size]
        mzsa = float(np.max(imp.z_score[active.size:]))

        row = np.full(p, np.nan)
        row[active] = z_real
        history.append(row)
        shadow_max.append(mzsa)

        hits[undecided] += z_real[pos] > mzsa
        trials[undecided] += 1
        pvals = binomial_two_sided(hits[undecided], trials[undecided])
        n_tests = p if params.correction == "all" else undecided.size
        significant = pvals < params.alpha / n_tests
        for j, sig in zip(undecided, significant):
            if sig:
                state[j] = 1 if 2 * hits[j] > trials[j] else -1
                decided_at[j] = it
        if log is not None:
            log(f"boruta iteration {it}: {int(np.sum(state == 1))} confirmed, "
                f"{int(np.sum(state == -1))} rejected, {int(np.sum(state == 0))} undecided")

    status = [CONFIRMED if s == 1 else REJECTED if s == -1 else TENTATIVE for s in state]
    hist = np.vstack(history) if history else np.empty((0, p))
    return BorutaResult(d.descriptor_names, status, hits, trials, decided_at, hist,
                        np.asarray(shadow_max), it, params)


def important_set(r, include_tentative=False):
    """Confirmed feature indices, plus Tentative ones when requested."""
    keep = {CONFIRMED, TENTATIVE} if include_tentative else {CONFIRMED}
    return {j for j, s in enumerate(r.status) if s in keep}
