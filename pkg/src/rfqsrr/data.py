"""Descriptor datasets: loading, validation, 2:1 splits, bootstrap bags and a
synthetic QSRR-like generator with planted relevant features."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _rng

RELEVANT_PREFIX = "REL_"
IRRELEVANT_PREFIX = "IRR_"


class DatasetError(ValueError):
    """Invalid dataset content (parse failure, missing cell, bad shape)."""


class DegenerateDataError(ValueError):
    """The response has zero variance, so nothing can be modelled."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Numeric descriptor matrix ``X`` (n x p) with response ``y`` (length n)."""

    compound_ids: tuple
    descriptor_names: tuple
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.array(self.X, dtype=float, copy=True)
        y = np.array(self.y, dtype=float, copy=True).reshape(-1)
        ids = tuple(str(c) for c in self.compound_ids)
        names = tuple(str(c) for c in self.descriptor_names)
        if X.ndim != 2:
            raise DatasetError(f"X must be 2-dimensional, got shape {X.shape}")
        if X.shape[0] != y.size or y.size != len(ids):
            raise DatasetError(
                f"row counts disagree: X has {X.shape[0]}, y has {y.size}, ids has {len(ids)}")
        if X.shape[1] != len(names):
            raise DatasetError(
                f"X has {X.shape[1]} columns but {len(names)} descriptor names were given")
        if len(set(names)) != len(names):
            seen, dup = set(), None
            for nm in names:
                if nm in seen:
                    dup = nm
                    break
                seen.add(nm)
            raise DatasetError(f"duplicate descriptor name {dup!r}")
        if not np.all(np.isfinite(X)):
            i, j = np.argwhere(~np.isfinite(X))[0]
            raise DatasetError(f"non-finite descriptor value at row {i}, column {names[j]!r}")
        if not np.all(np.isfinite(y)):
            raise DatasetError(f"non-finite response at row {int(np.argmax(~np.isfinite(y)))}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "compound_ids", ids)
        object.__setattr__(self, "descriptor_names", names)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.compound_ids == other.compound_ids
                and self.descriptor_names == other.descriptor_names
                and np.array_equal(self.X, other.X) and np.array_equal(self.y, other.y))

    __hash__ = None

    def rows(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(tuple(self.compound_ids[i] for i in indices), self.descriptor_names,
                       self.X[indices], self.y[indices])

    def columns(self, indices):
        indices = np.asarray(sorted(indices), dtype=np.int64)
        return Dataset(self.compound_ids, tuple(self.descriptor_names[j] for j in indices),
                       self.X[:, indices], self.y)

    def fingerprint(self):
        """Identity used to match models against datasets: shape plus a hash of names."""
        digest = hashlib.sha256("\n".join(self.descriptor_names).encode()).hexdigest()[:16]
        return {"n": self.n, "p": self.p, "names_sha256": digest}

    def response_variance(self):
        return float(np.var(self.y))


@dataclass(frozen=True)
class SplitPair:
    train: Dataset
    test: Dataset
    seed: int
    train_rows: np.ndarray = field(repr=False)
    test_rows: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class BagSample:
    indices: np.ndarray
    oob_indices: np.ndarray

    def counts(self, n):
        return np.bincount(self.indices, minlength=n)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted-signal generator.

    ``coefficient`` scales every generative term. ``copies_per_relevant``
    correlated copies of each relevant feature are drawn from the irrelevant
    pool when ``correlation_rho > 0``. ``nonlinear_form`` is ``"pairs"``
    (products of feature pairs) or ``"sin"`` (one sine term per feature).
    """

    n: int
    p: int
    k_linear: int
    k_nonlinear: int = 0
    noise_sd: float = 0.5
    correlation_rho: float = 0.0
    seed: int = 0
    coefficient: float = 1.0
    copies_per_relevant: int = 1
    nonlinear_form: str = "pairs"

    def validate(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.p < 1:
            raise ValueError(f"p must be >= 1, got {self.p}")
        if self.k_linear < 0 or self.k_nonlinear < 0:
            raise ValueError("k_linear and k_nonlinear must be >= 0")
        if self.k_linear + self.k_nonlinear > self.p:
            raise ValueError(
                f"k_linear + k_nonlinear must be <= p "
                f"({self.k_linear} + {self.k_nonlinear} > {self.p})")
        if self.noise_sd < 0:
            raise ValueError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if not 0 <= self.correlation_rho < 1:
            raise ValueError(f"correlation_rho must be in [0, 1), got {self.correlation_rho}")
        if self.copies_per_relevant < 0:
            raise ValueError("copies_per_relevant must be >= 0")
        if self.nonlinear_form not in ("pairs", "sin"):
            raise ValueError(f"nonlinear_form must be 'pairs' or 'sin', got {self.nonlinear_form!r}")
        _rng.check_seed(self.seed)


# --------------------------------------------------------------------- CSV I/O

def _parse_float(text, row, col, name):
    cell = text.strip()
    if cell == "":
        raise DatasetError(f"empty cell at row {row}, column {col} ({name!r})")
    try:
        value = float(cell)
    except ValueError:
        raise DatasetError(
            f"non-numeric cell {cell!r} at row {row}, column {col} ({name!r})") from None
    if not math.isfinite(value):
        raise DatasetError(f"non-finite cell {cell!r} at row {row}, column {col} ({name!r})")
    return value


def parse_csv(text, min_rows=10):
    """Parse ``compound_id,response,<descriptors...>`` CSV text.

    Rows and columns in error messages are 1-based data rows (the header is
    row 0) and 1-based columns.
    """
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError("empty file: header row missing") from None
    if len(header) < 3:
        raise DatasetError(
            "header must hold compound_id, response and at least one descriptor column")
    names = [h.strip() for h in header[2:]]
    ids, ys, rows = [], [], []
    width = len(header)
    for r, rec in enumerate(reader, start=1):
        if not rec or (len(rec) == 1 and rec[0].strip() == ""):
            continue
        if len(rec) != width:
            raise DatasetError(f"row {r} has {len(rec)} cells, header has {width}")
        ids.append(rec[0].strip())
        ys.append(_parse_float(rec[1], r, 2, header[1]))
        rows.append([_parse_float(c, r, j, header[j - 1]) for j, c in enumerate(rec[2:], start=3)])
    if len(ids) < min_rows:
        raise DatasetError(f"dataset has {len(ids)} rows; at least {min_rows} are required")
    X = np.array(rows, dtype=float).reshape(len(ids), len(names))
    return Dataset(tuple(ids), tuple(names), X, np.array(ys))


def load_csv(path, min_rows=10):
    """Load and validate a descriptor CSV.

    Raises OSError on I/O failure and DatasetError on content problems.
    """
    text = Path(path).read_text(encoding="utf-8")
    return parse_csv(text, min_rows=min_rows)


def format_csv(d):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["compound_id", "response", *d.descriptor_names])
    for cid, yv, row in zip(d.compound_ids, d.y, d.X):
        writer.writerow([cid, repr(float(yv)), *(repr(float(v)) for v in row)])
    return buf.getvalue()


def write_csv(d, path):
    Path(path).write_text(format_csv(d), encoding="utf-8")


# ----------------------------------------------------------- splits and bags

def train_size(n):
    """round-half-up(2n/3) in exact integer arithmetic."""
    return (4 * n + 3) // 6


def split_2to1(d, seed):
    """Uniform random 2:1 train/test partition of the rows of ``d``."""
    if d.n < 3:
        raise ValueError(f"need at least 3 rows for a 2:1 split, got {d.n}")
    perm = _rng.generator(seed, _rng.SPLIT).permutation(d.n)
    k = train_size(d.n)
    train_rows = np.sort(perm[:k])
    test_rows = np.sort(perm[k:])
    return SplitPair(d.rows(train_rows), d.rows(test_rows), int(seed), train_rows, test_rows)


def bootstrap_indices(n, seed):
    if n < 1:
        raise ValueError("cannot bootstrap an empty dataset")
    rng = np.random.default_rng(_rng.check_seed(seed))
    indices = rng.integers(0, n, size=n)
    present = np.zeros(n, dtype=bool)
    present[indices] = True
    return BagSample(indices, np.flatnonzero(~present))


def bootstrap(d, seed):
    """n draws with replacement from the rows of ``d`` plus the out-of-bag rows."""
    return bootstrap_indices(d.n, seed)


# ---------------------------------------------------------- synthetic data

SIN_FREQUENCY = 2.0
SIN_AMPLITUDE = math.sqrt(2.0)


def sin_term_variance():
    # Var(a sin(w x)), x ~ N(0, 1)
    return SIN_AMPLITUDE ** 2 * (1.0 - math.exp(-2.0 * SIN_FREQUENCY ** 2)) / 2.0


@dataclass(frozen=True)
class SyntheticTruth:
    relevant: tuple
    terms: tuple
    correlated: tuple
    spec: SyntheticSpec

    def analytic_variance(self):
        c2 = self.spec.coefficient ** 2
        var = 0.0
        for term in self.terms:
            var += c2 * (sin_term_variance() if term["kind"] == "sin" else 1.0)
        return var + self.spec.noise_sd ** 2

    def to_json(self):
        return {
            "format": "rfqsrr-synthetic-truth",
            "version": 1,
            "spec": {k: getattr(self.spec, k) for k in self.spec.__dataclass_fields__},
            "relevant_indices": list(self.relevant),
            "terms": list(self.terms),
            "correlated_copies": list(self.correlated),
            "response": "y = coefficient * sum(terms) + N(0, noise_sd^2)",
            "analytic_variance": self.analytic_variance(),
        }


def generate_synthetic(spec, return_truth=False):
    """Draw a dataset whose response depends on a planted subset of columns.

    Terms, each multiplied by ``spec.coefficient``:

    * linear: ``x_j`` for each of ``k_linear`` features;
    * nonlinear, ``"pairs"`` form: features are consumed in pairs giving
      ``sign * x_a * x_b`` with alternating sign; an odd leftover feature gives
      ``sqrt(2) * sin(2 * x_j)``;
    * nonlinear, ``"sin"`` form: ``sqrt(2) * sin(2 * x_j)`` for every feature.

    All base columns are independent standard normals. Correlated copies are
    ``rho * x_rel + sqrt(1 - rho^2) * z`` and do not enter the response.
    Planted columns are named ``REL_*``; the rest ``IRR_*``. Column positions
    are shuffled.
    """
    spec.validate()
    rng = _rng.generator(spec.seed, _rng.SYNTHETIC)
    n, p = spec.n, spec.p
    k_rel = spec.k_linear + spec.k_nonlinear
    Z = rng.standard_normal((n, p))
    position = rng.permutation(p)
    rel_cols = position[:k_rel]
    irr_cols = position[k_rel:]

    names = [None] * p
    terms = []
    y = np.zeros(n)
    for i in range(spec.k_linear):
        j = int(rel_cols[i])
        names[j] = f"{RELEVANT_PREFIX}L{i:03d}"
        terms.append({"kind": "linear", "features": [j], "sign": 1})
        y += Z[:, j]
    nl = [int(j) for j in rel_cols[spec.k_linear:]]
    for i, j in enumerate(nl):
        names[j] = f"{RELEVANT_PREFIX}N{i:03d}"
    sign = 1
    pairs = nl if spec.nonlinear_form == "pairs" else []
    for a in range(0, len(pairs) - 1, 2):
        terms.append({"kind": "product", "features": [nl[a], nl[a + 1]], "sign": sign})
        y += sign * Z[:, nl[a]] * Z[:, nl[a + 1]]
        sign = -sign
    if spec.nonlinear_form == "sin":
        singles = nl
    else:
        singles = nl[-1:] if len(nl) % 2 else []
    for j in singles:
        terms.append({"kind": "sin", "features": [j], "sign": 1,
                      "amplitude": SIN_AMPLITUDE, "frequency": SIN_FREQUENCY})
        y += SIN_AMPLITUDE * np.sin(SIN_FREQUENCY * Z[:, j])
    y *= spec.coefficient
    if spec.noise_sd > 0:
        y += rng.normal(0.0, spec.noise_sd, size=n)

    correlated = []
    rho = spec.correlation_rho
    if rho > 0 and k_rel > 0:
        n_copies = min(len(irr_cols), k_rel * spec.copies_per_relevant)
        for c in range(n_copies):
            j = int(irr_cols[c])
            src = int(rel_cols[c % k_rel])
            Z[:, j] = rho * Z[:, src] + math.sqrt(1.0 - rho * rho) * Z[:, j]
            correlated.append({"feature": j, "source": src, "rho": rho})
            names[j] = f"{IRRELEVANT_PREFIX}C{c:04d}"
    k = 0
    for j in range(p):
        if names[j] is None:
            names[j] = f"{IRRELEVANT_PREFIX}{k:04d}"
            k += 1

    ids = tuple(f"C{i:05d}" for i in range(n))
    d = Dataset(ids, tuple(names), Z, y)
    if not return_truth:
        return d
    truth = SyntheticTruth(tuple(sorted(int(j) for j in rel_cols)), tuple(terms),
                           tuple(correlated), spec)
    return d, truth


def write_truth(truth, path):
    Path(path).write_text(json.dumps(truth.to_json(), indent=2) + "\n", encoding="utf-8")


def relevant_mask(names):
    return np.array([nm.startswith(RELEVANT_PREFIX) for nm in names])
