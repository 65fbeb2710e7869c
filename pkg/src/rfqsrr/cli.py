"""Command-line interface.

Exit codes: 0 success, 2 usage or validation, 3 I/O or unreadable dataset,
4 degenerate data, 5 model/dataset mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .boruta import BorutaParams, boruta_run, important_set
from .data import (DatasetError, DegenerateDataError, SyntheticSpec, generate_synthetic, load_csv,
                   write_csv, write_truth)
from .forest import PROFILES, Forest, ForestParams, ModelMismatchError, fit_forest, predict
from .protocol import (ProtocolConfig, records_csv, repetition_seed, run_protocol,
                       selections_csv, stability_from_records, summarize)
from .select import ConsensusParams, SelectionOutcome, consensus, top_n
from .tree import TreeParams

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DEGENERATE, EXIT_MISMATCH = 0, 2, 3, 4, 5


class UsageError(ValueError):
    pass


def _default_seed():
    raw = os.environ.get("RFQSRR_SEED")
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"RFQSRR_SEED must be an integer, got {raw!r}") from None


def _log(args):
    if args.quiet:
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class Manifest:
    """Run record written on success and on handled failure."""

    def __init__(self, path, command, args, deterministic):
        self.path = path
        self.deterministic = deterministic
        self.data = {
            "command": command,
            "arguments": {k: v for k, v in vars(args).items() if k != "func"},
            "seed": args.seed,
            "threads": args.threads,
            "tool_version": __version__,
            "versions": {"python": platform.python_version(), "numpy": np.__version__},
            "started": self._now(),
            "outputs": {},
            "status": "running",
        }

    def _now(self):
        return None if self.deterministic else datetime.now(timezone.utc).isoformat()

    def write(self, status, **extra):
        if self.path is None:
            return
        self.data.update(extra)
        self.data["status"] = status
        self.data["finished"] = self._now()
        atomic_write(self.path, json.dumps(self.data, indent=1, sort_keys=True, default=str) + "\n")


def _tree_params(args):
    return TreeParams(mtry=args.mtry, min_node_size=args.min_node_size, max_depth=args.max_depth)


def _require_variance(d):
    if d.response_variance() == 0:
        raise DegenerateDataError("response has zero variance")


# ------------------------------------------------------------------ commands

def cmd_generate(args):
    spec = SyntheticSpec(n=args.n, p=args.p, k_linear=args.k_linear,
                         k_nonlinear=args.k_nonlinear, noise_sd=args.noise_sd,
                         correlation_rho=args.rho, seed=args.seed,
                         coefficient=args.coefficient, copies_per_relevant=args.copies,
                         nonlinear_form=args.nonlinear_form)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d, truth = generate_synthetic(spec, return_truth=True)
    out = Path(args.out)
    truth_path = Path(args.truth) if args.truth else out.with_suffix(".truth.json")
    write_csv(d, out)
    write_truth(truth, truth_path)
    if not args.quiet:
        print(f"wrote {out} ({d.n} rows, {d.p} descriptors) and {truth_path}", file=sys.stderr)
    return EXIT_OK


def cmd_select(args):
    out = Path(args.out)
    manifest = Manifest(Path(args.manifest) if args.manifest else out.with_suffix(".manifest.json"),
                        "select", args, args.deterministic)
    tree = _tree_params(args)
    if args.method == "topn":
        if args.keep is None or args.keep < 1:
            raise UsageError("--method topn needs --keep >= 1")
    elif args.method == "consensus":
        if args.bags < 1:
            raise UsageError("--bags must be >= 1")
        if not 0 < args.threshold <= 1:
            raise UsageError("--threshold must be in (0, 1]")
    n_trees = args.trees if args.trees is not None else PROFILES[args.profile]
    forest = ForestParams(n_trees=n_trees, tree=tree, seed=args.seed)
    try:
        forest.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    d = load_csv(args.data)
    _require_variance(d)
    log = _log(args)
    try:
        if args.method == "topn":
            if args.keep > d.p:
                raise UsageError(f"--keep {args.keep} exceeds the {d.p} descriptors")
            outcome = top_n(d, args.keep, forest, threads=args.threads)
        elif args.method == "boruta":
            bp = BorutaParams(forest=forest, max_iterations=args.max_iterations,
                              alpha=args.alpha, seed=args.seed, correction=args.correction)
            res = boruta_run(d, bp, threads=args.threads, log=log)
            label = f"B{n_trees // 1000}K" if n_trees % 1000 == 0 else f"BORUTA{n_trees}"
            outcome = SelectionOutcome(label, frozenset(important_set(res, args.include_tentative)),
                                       res.hits.astype(float), {"iterations": res.iterations})
            if args.status_out:
                atomic_write(args.status_out, res.to_csv())
        else:
            bp = BorutaParams(forest=forest, max_iterations=args.max_iterations, alpha=args.alpha,
                              correction=args.correction)
            cp = ConsensusParams(n_bags=args.bags, threshold=args.threshold, boruta=bp,
                                 seed=args.seed)
            outcome = consensus(d, cp, threads=args.threads)
        atomic_write(out, outcome.to_csv(d.descriptor_names))
    except BaseException as exc:
        manifest.write("failed", error=f"{type(exc).__name__}: {exc}")
        raise
    manifest.write("ok", method=outcome.method, n_trees=n_trees, outputs={"selection": str(out)},
                   selected=sorted(d.descriptor_names[j] for j in outcome.selected))
    if log:
        log(f"{outcome.method}: {len(outcome.selected)} of {d.p} descriptors selected")
    return EXIT_OK


def _load_config(path, seed, override):
    if path is None:
        obj = {}
    else:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise UsageError("config must be a JSON object")
    # an explicit --seed beats the config file; the config beats the environment
    if override or "seed" not in obj:
        obj["seed"] = seed
    try:
        return ProtocolConfig.from_dict(obj)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config: {exc}") from None


def cmd_protocol(args):
    cfg = _load_config(args.config, args.seed, args.seed_given)
    d = load_csv(args.data)
    _require_variance(d)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"records": outdir / "records.csv", "selections": outdir / "selections.csv",
             "stability": outdir / "stability.csv", "figure": outdir / "r2_boxplot.svg",
             "summary": outdir / "summary.json"}
    manifest = Manifest(outdir / "manifest.json", "protocol", args, args.deterministic)
    manifest.data["config"] = cfg.to_dict()
    manifest.data["dataset"] = d.fingerprint()
    records = []

    # records are flushed after every repetition so an interrupted run keeps them
    paths["records"].write_text(records_csv([], args.deterministic), encoding="utf-8")
    paths["selections"].write_text(selections_csv([], d.descriptor_names), encoding="utf-8")

    def flush(recs):
        records.extend(recs)
        with open(paths["records"], "a", encoding="utf-8") as fh:
            fh.write(records_csv(recs, args.deterministic, header=False))
        with open(paths["selections"], "a", encoding="utf-8") as fh:
            fh.write(selections_csv(recs, d.descriptor_names, header=False))

    try:
        run_protocol(d, cfg, threads=args.threads, log=_log(args), on_repetition=flush)
    except KeyboardInterrupt:
        _write_reports(records, cfg, paths, args.deterministic)
        manifest.write("interrupted", outputs={k: str(v) for k, v in paths.items()},
                       completed_repetitions=len({r.repetition for r in records}))
        raise
    except BaseException as exc:
        manifest.write("failed", error=f"{type(exc).__name__}: {exc}")
        raise
    _write_reports(records, cfg, paths, args.deterministic)
    manifest.write("ok", outputs={k: str(v) for k, v in paths.items()},
                   repetition_seeds=[repetition_seed(cfg.seed, r) for r in range(cfg.repetitions)],
                   errors=sum(1 for r in records if r.error))
    return EXIT_OK


def _write_reports(records, cfg, paths, deterministic):
    if not records or all(r.error for r in records):
        return
    from .plotting import r2_boxplot
    atomic_write(paths["stability"], stability_from_records(records).to_csv())
    atomic_write(paths["summary"], json.dumps(summarize(records), indent=1) + "\n")
    r2_boxplot(records, paths["figure"], reference=cfg.reference_baseline,
               deterministic=deterministic)


def cmd_train(args):
    params = ForestParams(n_trees=args.trees, tree=_tree_params(args), seed=args.seed)
    try:
        params.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = load_csv(args.data, min_rows=2)
    forest = fit_forest(d, params, threads=args.threads)
    atomic_write(args.model, forest.to_json())
    if not args.quiet:
        print(f"wrote {args.model} ({params.n_trees} trees, {d.p} descriptors)", file=sys.stderr)
    return EXIT_OK


def cmd_predict(args):
    try:
        forest = Forest.load(args.model)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"model {args.model}: unreadable ({exc})") from None
    d = load_csv(args.data, min_rows=1)
    forest.check_features(d)
    pred = predict(forest, d.X)
    lines = ["compound_id,prediction"] + [f"{c},{v!r}" for c, v in zip(d.compound_ids,
                                                                        map(float, pred))]
    atomic_write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (default: $RFQSRR_SEED or 0)")
    common.add_argument("--threads", type=int, default=0,
                        help="worker threads; 0 uses every available core")
    common.add_argument("--deterministic", action="store_true",
                        help="omit timestamps and wall times so outputs are byte-stable")
    common.add_argument("-q", "--quiet", action="store_true")

    trees = argparse.ArgumentParser(add_help=False)
    trees.add_argument("--mtry", type=int, default=None)
    trees.add_argument("--min-node-size", type=int, default=5)
    trees.add_argument("--max-depth", type=int, default=None)

    ap = argparse.ArgumentParser(prog="rfqsrr", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"rfqsrr {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a planted-signal dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--p", type=int, required=True)
    g.add_argument("--k-linear", type=int, required=True)
    g.add_argument("--k-nonlinear", type=int, default=0)
    g.add_argument("--noise-sd", type=float, default=0.5)
    g.add_argument("--rho", type=float, default=0.0, help="correlation of decoy copies")
    g.add_argument("--copies", type=int, default=1, help="decoy copies per relevant feature")
    g.add_argument("--coefficient", type=float, default=1.0)
    g.add_argument("--nonlinear-form", choices=["pairs", "sin"], default="pairs")
    g.add_argument("--out", default="synthetic.csv")
    g.add_argument("--truth", default=None, help="ground-truth JSON (default: <out>.truth.json)")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("select", parents=[common, trees], help="run one selection method")
    s.add_argument("data")
    s.add_argument("--method", choices=["topn", "boruta", "consensus"], required=True)
    s.add_argument("--keep", type=int, default=None)
    s.add_argument("--profile", type=str.lower, choices=sorted(PROFILES), default="b1k")
    s.add_argument("--trees", type=int, default=None, help="override the profile's tree count")
    s.add_argument("--bags", type=int, default=50)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--max-iterations", type=int, default=100)
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--correction", choices=["all", "undecided"], default="all",
                   help="Bonferroni divisor for the Boruta tests")
    s.add_argument("--include-tentative", action="store_true")
    s.add_argument("--out", default="selection.csv")
    s.add_argument("--manifest", default=None)
    s.add_argument("--status-out", default=None, help="Boruta per-feature decision CSV")
    s.set_defaults(func=cmd_select)

    p = sub.add_parser("protocol", parents=[common], help="repeated split/select/model run")
    p.add_argument("data")
    p.add_argument("--config", default=None, help="JSON config; omitted keys take defaults")
    p.add_argument("--out-dir", default="protocol_out")
    p.set_defaults(func=cmd_protocol)

    t = sub.add_parser("train", parents=[common, trees], help="fit and save a forest")
    t.add_argument("data")
    t.add_argument("--trees", type=int, default=1000)
    t.add_argument("--model", default="forest.json")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", parents=[common], help="predict with a saved forest")
    r.add_argument("data")
    r.add_argument("--model", required=True)
    r.add_argument("--out", default="predictions.csv")
    r.set_defaults(func=cmd_predict)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.seed_given = args.seed is not None
        if args.seed is None:
            args.seed = _default_seed()
        if args.seed < 0:
            raise UsageError(f"--seed must be >= 0, got {args.seed}")
        return args.func(args)
    except ModelMismatchError as exc:
        code, msg = EXIT_MISMATCH, exc
    except DegenerateDataError as exc:
        code, msg = EXIT_DEGENERATE, exc
    except (DatasetError, OSError) as exc:
        code, msg = EXIT_IO, exc
    except ValueError as exc:
        code, msg = EXIT_USAGE, exc
    except KeyboardInterrupt:
        print("rfqsrr: interrupted; partial results written", file=sys.stderr)
        return 130
    print(f"rfqsrr: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
