"""Repeated 2:1 split -> feature selection -> forest model -> evaluation, plus
selection-stability tables and an ordinary least-squares baseline."""

from __future__ import annotations

import csv
import io
import math
import re
import time
import zlib
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _rng
from ._parallel import resolve_threads
from .boruta import BorutaParams, boruta_run, important_set
from .data import split_2to1
from .forest import ForestParams, fit_forest, oob_r2, r2_score, test_r2
from .select import (ConsensusParams, consensus_counts, consensus_from_counts,
                     consensus_label, importance_ranking, top_n, topn_label)

MIN_ROWS = 10
FRACTIONS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)

DEFAULT_METHODS = tuple(
    [topn_label(k) for k in range(100, 0, -10)] + ["B1K", "B10K"]
    + [consensus_label(k / 10) for k in range(1, 11)])

_TOP = re.compile(r"^TOP(\d+)$", re.IGNORECASE)
_BORUTA = re.compile(r"^B(\d+)K$", re.IGNORECASE)
_CONS = re.compile(r"^(?:C_?|BAGGING)(\d*\.?\d+)$", re.IGNORECASE)


@dataclass(frozen=True)
class MethodSpec:
    kind: str  # "topn" | "boruta" | "consensus"
    label: str
    keep: int = 0
    profile: str = ""
    threshold: float = 0.0


def parse_method(text):
    """Parse labels such as ``TOP50``, ``B1K``, ``B10K``, ``C_0.3`` or ``Bagging0.3``."""
    s = text.strip()
    if m := _TOP.match(s):
        k = int(m.group(1))
        if k < 1:
            raise ValueError(f"{text!r}: TopN size must be >= 1")
        return MethodSpec("topn", topn_label(k), keep=k)
    if m := _BORUTA.match(s):
        return MethodSpec("boruta", f"B{m.group(1)}K", profile=f"B{m.group(1)}K")
    if m := _CONS.match(s):
        x = float(m.group(1))
        if not 0 < x <= 1:
            raise ValueError(f"{text!r}: consensus threshold must be in (0, 1]")
        return MethodSpec("consensus", consensus_label(x), threshold=x)
    raise ValueError(f"unrecognised method {text!r}")


@dataclass(frozen=True)
class ProtocolConfig:
    """Experiment settings.

    ``forest`` is used for the final model and for the TopN ranking run.
    ``profiles`` maps Boruta profile labels to tree counts; ``consensus_profile``
    names the profile used inside each consensus bag.
    """

    repetitions: int = 30
    methods: tuple = DEFAULT_METHODS
    forest: ForestParams = field(default_factory=ForestParams)
    seed: int = 0
    max_iterations: int = 100
    alpha: float = 0.01
    min_shadows: int = 5
    correction: str = "all"
    profiles: dict = field(default_factory=lambda: {"B1K": 1000, "B10K": 10000})
    consensus_bags: int = 50
    consensus_profile: str = "B1K"
    include_tentative: bool = False
    reference_baseline: float | None = None

    def method_specs(self):
        return [parse_method(m) for m in self.methods]

    def validate(self):
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if not self.methods:
            raise ValueError("methods must be non-empty")
        specs = self.method_specs()
        labels = [s.label for s in specs]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate methods in {labels}")
        for s in specs:
            if s.kind == "boruta" and s.profile not in self.profiles:
                raise ValueError(f"no tree count configured for profile {s.profile}")
        if any(s.kind == "consensus" for s in specs):
            if self.consensus_profile not in self.profiles:
                raise ValueError(f"no tree count for consensus profile {self.consensus_profile}")
            if self.consensus_bags < 1:
                raise ValueError("consensus_bags must be >= 1")
        self.forest.validate()
        self.boruta_params(next(iter(self.profiles))).validate()

    def boruta_params(self, profile, seed=0):
        forest = replace(self.forest, n_trees=int(self.profiles[profile]))
        return BorutaParams(forest=forest, max_iterations=self.max_iterations, alpha=self.alpha,
                            min_shadows=self.min_shadows, seed=seed,
                            correction=self.correction)

    def to_dict(self):
        return {
            "repetitions": self.repetitions, "methods": list(self.methods),
            "forest": self.forest.to_dict(), "seed": self.seed,
            "max_iterations": self.max_iterations, "alpha": self.alpha,
            "min_shadows": self.min_shadows, "correction": self.correction,
            "profiles": dict(self.profiles),
            "consensus_bags": self.consensus_bags, "consensus_profile": self.consensus_profile,
            "include_tentative": self.include_tentative,
            "reference_baseline": self.reference_baseline,
        }

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "forest" in obj:
            obj["forest"] = ForestParams.from_dict(obj["forest"])
        if "methods" in obj:
            obj["methods"] = tuple(obj["methods"])
        if "profiles" in obj:
            obj["profiles"] = {str(k).upper(): int(v) for k, v in obj["profiles"].items()}
        if "consensus_profile" in obj:
            obj["consensus_profile"] = str(obj["consensus_profile"]).upper()
        cfg = cls(**obj)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class RepetitionRecord:
    repetition: int
    method: str
    selected: tuple
    n_selected: int
    oob_r2: float
    test_r2: float
    baseline_r2: float
    seconds: float
    error: str = ""


def repetition_seed(seed, r):
    return _rng.derive_seed(seed, _rng.REPETITION, r)


def linear_baseline(train, test, features):
    """Test R^2 of ordinary least squares with intercept on ``features``.

    Rank-deficient designs get the minimum-norm solution.
    """
    cols = sorted(int(j) for j in features)
    A = np.hstack([np.ones((train.n, 1)), train.X[:, cols]])
    coef, *_ = np.linalg.lstsq(A, train.y, rcond=None)
    B = np.hstack([np.ones((test.n, 1)), test.X[:, cols]])
    return r2_score(test.y, B @ coef)


def _label_key(label):
    return zlib.crc32(label.encode())


def _evaluate(train, test, selected, forest_params):
    if not selected:
        mean = float(np.mean(train.y))
        return (r2_score(train.y, np.full(train.n, mean)),
                r2_score(test.y, np.full(test.n, mean)))
    sub_train = train.columns(selected)
    model = fit_forest(sub_train, forest_params)
    return oob_r2(model, sub_train), test_r2(model, test.columns(selected))


def run_repetition(d, cfg, r, threads=1, log=None):
    """All methods of repetition ``r`` on one shared 2:1 split."""
    seed_r = repetition_seed(cfg.seed, r)
    split = split_2to1(d, seed_r)
    train, test = split.train, split.test
    shared = {}

    def cached(key, compute):
        # first method to need a shared step pays for it
        if key not in shared:
            t0 = time.perf_counter()
            try:
                shared[key] = (compute(), None, time.perf_counter() - t0)
            except Exception as exc:  # noqa: BLE001
                shared[key] = (None, exc, time.perf_counter() - t0)
            value, exc, cost = shared[key]
        else:
            value, exc, _ = shared[key]
            cost = 0.0
        if exc is not None:
            raise exc
        return value, cost

    records = []
    for spec in cfg.method_specs():
        t0 = time.perf_counter()
        shared_cost = 0.0
        selected = ()
        try:
            if spec.kind == "topn":
                if spec.keep > train.p:
                    raise ValueError(f"{spec.label}: only {train.p} features available")
                ranking, shared_cost = cached("ranking", lambda: importance_ranking(
                    train, cfg.forest.with_seed(_rng.derive_seed(seed_r, 11)), threads))
                sel = top_n(train, spec.keep, ranking=ranking).selected
            elif spec.kind == "boruta":
                res, shared_cost = cached(("boruta", spec.profile), lambda: boruta_run(
                    train, cfg.boruta_params(spec.profile, _rng.derive_seed(
                        seed_r, 12, _label_key(spec.profile))), threads=threads))
                sel = important_set(res, cfg.include_tentative)
            else:
                params = ConsensusParams(
                    n_bags=cfg.consensus_bags, threshold=spec.threshold,
                    boruta=cfg.boruta_params(cfg.consensus_profile),
                    seed=_rng.derive_seed(seed_r, 13))
                M, shared_cost = cached("consensus", lambda: consensus_counts(
                    train, params, threads))
                sel = consensus_from_counts(M, spec.threshold).selected
            selected = tuple(sorted(sel))
            fp = cfg.forest.with_seed(_rng.derive_seed(seed_r, 14, _label_key(spec.label)))
            oob, test_score = _evaluate(train, test, selected, fp)
            base = linear_baseline(train, test, selected)
            err = ""
        except Exception as exc:  # noqa: BLE001
            oob = test_score = base = float("nan")
            err = f"{type(exc).__name__}: {exc}"
        # a shared step is charged to the first method that triggered it
        seconds = time.perf_counter() - t0
        records.append(RepetitionRecord(r, spec.label, selected, len(selected), oob, test_score,
                                        base, seconds, err))
        if log is not None:
            log(f"repetition {r + 1}/{cfg.repetitions} {spec.label}: "
                f"n={len(selected)} oob_r2={oob:.3f} test_r2={test_score:.3f}"
                + (f" error={err}" if err else ""))
    return records


def run_protocol(d, cfg, threads=1, log=None, on_repetition=None):
    """Run every repetition; records come back ordered by (repetition, method).

    Repetitions run concurrently when ``threads > 1``. ``on_repetition`` is
    called with each repetition's records in repetition order as soon as they
    are available.
    """
    cfg.validate()
    if d.n < MIN_ROWS:
        raise ValueError(f"protocol needs at least {MIN_ROWS} rows, got {d.n}")
    threads = resolve_threads(threads)
    out = []

    def emit(recs):
        out.extend(recs)
        if on_repetition is not None:
            on_repetition(recs)

    if threads == 1 or cfg.repetitions == 1:
        for r in range(cfg.repetitions):
            emit(run_repetition(d, cfg, r, threads, log))
    else:
        with ThreadPoolExecutor(max_workers=min(threads, cfg.repetitions)) as pool:
            for recs in pool.map(lambda r: run_repetition(d, cfg, r, 1, log),
                                 range(cfg.repetitions)):
                emit(recs)
    return out


# ------------------------------------------------------------------ stability

def noise_limit(repetitions):
    """Largest selection count still treated as noise: max(1, round-half-up(R / 6))."""
    return max(1, (repetitions + 3) // 6)


def k_threshold(fraction, repetitions):
    return max(1, math.ceil(round(fraction * repetitions, 9)))


@dataclass(frozen=True)
class StabilityRow:
    method: str
    repetitions: int
    counts: tuple  # one per FRACTIONS entry
    at_least_once: int
    noise: int
    average: float


@dataclass(frozen=True)
class StabilityTable:
    rows: tuple
    fractions: tuple = FRACTIONS

    def row(self, method):
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def header(self):
        return (["method"] + [f"frac_{x:.1f}" for x in self.fractions]
                + ["at_least_once", "noise", "average"])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.rows:
            w.writerow([r.method, *r.counts, r.at_least_once, r.noise, f"{r.average:.2f}"])
        return buf.getvalue()


def stability_row(method, sets, repetitions=None):
    """Selection-frequency summary of one method's per-repetition selected sets."""
    sets = [frozenset(s) for s in sets]
    if not sets:
        raise ValueError("no selection records")
    R = len(sets) if repetitions is None else int(repetitions)
    freq = Counter(j for s in sets for j in s)
    values = np.array(list(freq.values()), dtype=np.int64)
    counts = tuple(int(np.sum(values >= k_threshold(x, R))) for x in FRACTIONS)
    noise = int(np.sum((values >= 1) & (values <= noise_limit(R))))
    return StabilityRow(method, R, counts, len(freq), noise,
                        float(np.mean([len(s) for s in sets])))


def stability_table(sets_by_method, repetitions=None):
    """Rows for each method of a ``{method: [selected set per repetition]}`` mapping."""
    if not sets_by_method:
        raise ValueError("no selection records")
    return StabilityTable(tuple(stability_row(m, s, repetitions)
                                for m, s in sets_by_method.items()))


def stability_from_records(records):
    by_method = {}
    for rec in records:
        if not rec.error:
            by_method.setdefault(rec.method, []).append(rec.selected)
    reps = len({rec.repetition for rec in records})
    return stability_table(by_method, reps)


# ------------------------------------------------------------------------ I/O

RECORD_COLUMNS = ["repetition", "method", "n_selected", "oob_r2", "test_r2", "seconds",
                  "baseline_r2", "error"]


def _fmt(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def records_csv(records, deterministic=False, header=True):
    """Record table; wall time is left blank when ``deterministic``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([r.repetition, r.method, r.n_selected, _fmt(r.oob_r2), _fmt(r.test_r2),
                    "" if deterministic else f"{r.seconds:.3f}", _fmt(r.baseline_r2), r.error])
    return buf.getvalue()


def selections_csv(records, names, header=True):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(["repetition", "method", "feature"])
    for r in records:
        for j in r.selected:
            w.writerow([r.repetition, r.method, names[j]])
    return buf.getvalue()


def summarize(records):
    """Per-method means of test R^2, OOB R^2, OLS baseline R^2 and selected size."""
    out = {}
    for rec in records:
        if rec.error:
            continue
        out.setdefault(rec.method, []).append(rec)
    summary = {}
    for m, recs in out.items():
        summary[m] = {
            "test_r2": float(np.mean([r.test_r2 for r in recs])),
            "oob_r2": float(np.mean([r.oob_r2 for r in recs])),
            "baseline_r2": float(np.mean([r.baseline_r2 for r in recs])),
            "n_selected": float(np.mean([r.n_selected for r in recs])),
            "repetitions": len(recs),
        }
    return summary
