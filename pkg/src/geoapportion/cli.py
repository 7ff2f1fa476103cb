"""Geometric NMF source apportionment with reproducible run manifests.

Entry point: ``geoapportion <command> ...``.

Every command writes its tables plus ``manifest.json`` into ``--out``.
``geoapportion replay manifest.json --out DIR`` reruns a recorded command.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .apportion import ApportionError, fit_model
from .geometry import GeometryError, ProfileMatrix, normalize_rows
from .ingest import (
    DEFAULT_POLLUTANTS, IngestError, PollutantMatrix, Schema, TIMESTAMP_FORMAT, apply_scaling,
    derive_size_bins, filter_complete, fit_scaling, parse_table, read_matrix, summarize, write_matrix,
)
from .interpret import (
    AnalysisError, DesignSpec, add_time_covariates, case_study, correlations, diurnal,
    hull_adequacy_export, regress_sources, separability_check,
)
from .nnls import NNLSError
from .resample import BootstrapRun, bootstrap, diagnostics, select_k
from .synth import SynthConfig, generate, generate_covariates

log = logging.getLogger("geoapportion")

KNOWN_ERRORS = (IngestError, GeometryError, ApportionError, AnalysisError, NNLSError, ValueError,
                FileNotFoundError)


class CommandError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(frame, path):
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def _matrix_table(array, row_labels, col_labels, row_name="source"):
    frame = pd.DataFrame(np.asarray(array), columns=col_labels)
    frame.insert(0, row_name, row_labels)
    return frame


def _source_labels(K):
    return [f"Source {k + 1}" for k in range(K)]


def _jobs(args):
    if getattr(args, "jobs", None):
        return args.jobs
    return int(os.environ.get("GEOAPPORTION_JOBS", "1"))


def _read_fit(fit_dir, matrix: PollutantMatrix):
    fit_dir = Path(fit_dir)
    prof = pd.read_csv(fit_dir / "profiles.csv")
    H = prof[matrix.pollutant_names].to_numpy(float)
    inten = pd.read_csv(fit_dir / "intensities.csv")
    labels = [c for c in inten.columns if c.startswith("Source ")]
    if len(inten) != len(matrix):
        raise CommandError(f"{fit_dir}/intensities.csv has {len(inten)} rows, matrix has {len(matrix)}")
    return ProfileMatrix(H, matrix.pollutant_names), inten[labels].to_numpy(float), labels


def _analysis_frame(matrix: PollutantMatrix, fit_dir=None):
    frame = add_time_covariates(matrix.to_frame())
    if fit_dir is not None:
        _, W, labels = _read_fit(fit_dir, matrix)
        for k, label in enumerate(labels):
            frame[label] = W[:, k]
    return frame


# ---------------------------------------------------------------------------
# commands; each returns a dict of recorded inputs


def cmd_preprocess(args, out: Path):
    schema = Schema.from_file(args.schema) if args.schema else Schema.identity(
        args.pollutants or list(("PM1", "PM2.5", "PM10", "TSP", "BC", "CO", "NO", "NO2")),
        args.covariates or [],
    )
    records = parse_table(args.input, schema, sep=args.sep)
    clamps = {}
    if not args.no_size_bins:
        records, clamps = derive_size_bins(records)
    if args.required:
        required = args.required
    else:
        available = records.attrs.get("pollutants") or []
        required = [p for p in DEFAULT_POLLUTANTS if p in available] or available
    rules = dict(_parse_rule(r) for r in args.outlier or [])
    raw = filter_complete(records, required, rules)
    params = fit_scaling(raw)
    scaled = apply_scaling(raw, params)
    scaled.report["clamped_size_bins"] = clamps
    write_matrix(raw, out / "raw_matrix.csv")
    write_matrix(scaled, out / "matrix.csv", {"scaling": params.to_dict()})
    table = summarize(raw).reset_index()
    _write_csv(table, out / "summary.csv")
    inputs = [args.input] + ([args.schema] if args.schema else [])
    return inputs


def _parse_rule(text):
    if "<" in text:
        name, bound = text.split("<", 1)
    elif "=" in text:
        name, bound = text.split("=", 1)
    else:
        raise CommandError(f"outlier rule must look like NAME<VALUE, got {text!r}")
    return name.strip(), float(bound)


def _write_model(model, matrix: PollutantMatrix, out: Path):
    names = matrix.pollutant_names
    labels = _source_labels(model.K)
    _write_csv(_matrix_table(model.H_star, labels, names), out / "profiles.csv")
    _write_csv(_matrix_table(model.phi, labels, names), out / "attribution.csv")
    inten = pd.DataFrame(model.W_tilde, columns=labels)
    inten.insert(0, "location", matrix.location)
    inten.insert(0, "timestamp", pd.to_datetime(matrix.timestamps).strftime(TIMESTAMP_FORMAT))
    _write_csv(inten, out / "intensities.csv")
    meta = {k: v for k, v in model.meta.items()}
    meta.update(method=model.method, mean_intensity=model.intensities.column_means.tolist())
    if model.profiles.indices is not None:
        meta["profile_rows"] = [int(i) for i in model.profiles.indices]
    (out / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=float) + "\n")


def cmd_fit(args, out: Path):
    if args.K < 1:
        raise CommandError("--K must be at least 1")
    matrix = read_matrix(args.matrix)
    model = fit_model(matrix, args.K, method=_method(args.method), seed=args.seed, l2_penalty=args.l2,
                      **_fit_options(args))
    _write_model(model, matrix, out)
    return [args.matrix]


def cmd_bootstrap(args, out: Path):
    matrix = read_matrix(args.matrix)
    runs, summary, reference = bootstrap(
        matrix, args.K, args.B, args.seed, method=_method(args.method),
        keep_intensities=args.keep_intensities, n_jobs=_jobs(args), **_fit_options(args),
    )
    names, labels = matrix.pollutant_names, _source_labels(args.K)
    _write_csv(_matrix_table(summary.phi_mean, labels, names), out / "phi_mean.csv")
    _write_csv(_matrix_table(summary.phi_se, labels, names), out / "phi_se.csv")
    diag = diagnostics(summary, runs, args.mean_floor)
    _write_csv(pd.DataFrame([{
        "K": diag.K, "cvar": diag.cvar, "rank_stability": diag.rank_stability,
        "excluded_cells": diag.excluded_cells, "replicates": summary.B, "failed": summary.n_failed,
    }]), out / "diagnostics.csv")
    _write_csv(pd.DataFrame({"pollutant": names, "rank_stability": diag.per_pollutant}),
               out / "rank_stability.csv")
    ref_dir = out / "reference"
    ref_dir.mkdir(exist_ok=True)
    _write_model(reference, matrix, ref_dir)
    arrays = {
        "replicate": np.array([r.replicate for r in runs]),
        "indices": np.stack([r.indices for r in runs]),
        "phi": np.stack([r.phi for r in runs]),
        "H_star": np.stack([r.H_star for r in runs]),
    }
    if args.keep_intensities:
        arrays["W_tilde"] = np.stack([r.W_tilde for r in runs])
    np.savez_compressed(out / "replicates.npz", **arrays)
    if args.archive:
        arch = out / "replicates"
        arch.mkdir(exist_ok=True)
        for r in runs:
            _write_csv(_matrix_table(r.phi, labels, names), arch / f"phi_{r.replicate:04d}.csv")
    return [args.matrix]


def _method(name):
    return {"lsnmf": "ls-nmf"}.get(name, name)


def _fit_options(args):
    # hull options only apply to the max-volume path
    if _method(args.method) != "geometric":
        return {}
    return {"hull_method": getattr(args, "hull_method", "auto")}


def cmd_select_k(args, out: Path):
    matrix = read_matrix(args.matrix)
    table = select_k(matrix, args.K, args.B, args.seed, method=_method(args.method),
                     mean_floor=args.mean_floor, n_jobs=_jobs(args), **_fit_options(args))
    _write_csv(table, out / "select_k.csv")
    return [args.matrix]


def _load_runs(boot_dir):
    data = np.load(Path(boot_dir) / "replicates.npz")
    if "W_tilde" not in data:
        raise CommandError(f"{boot_dir} was produced without --keep-intensities")
    return [
        BootstrapRun(int(b), data["indices"][i], data["phi"][i], np.arange(data["phi"].shape[1]),
                     data["H_star"][i], data["W_tilde"][i])
        for i, b in enumerate(data["replicate"])
    ]


def cmd_regress(args, out: Path):
    matrix = read_matrix(args.matrix)
    boot_dir = Path(args.bootstrap)
    runs = _load_runs(boot_dir)
    K = runs[0].phi.shape[0]
    _, W_ref, labels = _read_fit(boot_dir / "reference", matrix)
    frame = add_time_covariates(matrix.to_frame())
    interactions = [tuple(t.split(":", 1)) for t in args.interaction or []]
    categorical = dict(t.split("=", 1) for t in args.categorical or [])
    contrasts = {}
    for text in args.contrast or []:
        label, members = text.split("=", 1)
        contrasts[label] = members.split("+")
    spec = DesignSpec("intensity", args.terms, interactions, categorical, contrasts)

    class _Ref:
        W_tilde = W_ref

    sources = range(K) if not args.sources else [s - 1 for s in args.sources]
    results = regress_sources(frame, runs, {k: spec for k in sources}, reference=_Ref)
    tables = []
    for k, res in results.items():
        t = res.table()
        t.insert(0, "source", labels[k])
        t["rows_used"] = res.rows_used
        tables.append(t)
    _write_csv(pd.concat(tables, ignore_index=True), out / "regression.csv")
    return [args.matrix, str(boot_dir / "replicates.npz")]


def cmd_diurnal(args, out: Path):
    matrix = read_matrix(args.matrix)
    frame = _analysis_frame(matrix, args.fit)
    columns = args.columns or ([c for c in frame.columns if c.startswith("Source ")] or matrix.pollutant_names)
    unknown = [c for c in columns if c not in frame.columns]
    if unknown:
        raise CommandError(f"unknown column(s): {', '.join(unknown)}")
    table = pd.concat([diurnal(frame, c, split=not args.no_split) for c in columns], ignore_index=True)
    _write_csv(table, out / "diurnal.csv")
    return [args.matrix] + ([str(Path(args.fit) / "intensities.csv")] if args.fit else [])


def cmd_case_study(args, out: Path):
    matrix = read_matrix(args.matrix)
    frame = _analysis_frame(matrix, args.fit)
    targets = args.targets or matrix.pollutant_names
    reports, summary = case_study(frame, args.start, args.end, targets, group=args.group)
    tests = pd.DataFrame([
        {"group": g, "target": t, "test": r.test, "statistic": r.statistic, "p_value": r.p_value,
         "n_incident": r.n_x, "n_control": r.n_y, "method": r.method}
        for g, t, r in reports
    ])
    _write_csv(tests, out / "tests.csv")
    _write_csv(summary, out / "summary.csv")
    return [args.matrix] + ([str(Path(args.fit) / "intensities.csv")] if args.fit else [])


def cmd_adequacy(args, out: Path):
    matrix = read_matrix(args.matrix)
    profiles, W, labels = _read_fit(args.fit, matrix)
    names = matrix.pollutant_names
    pairs = [tuple(p.split(":", 1)) for p in args.pairs] if args.pairs else [
        (names[i], names[i + 1]) for i in range(0, len(names) - 1, 2)
    ]
    cloud = normalize_rows(matrix.values)
    proj = hull_adequacy_export(cloud, profiles, pairs, names, cap=args.cap, seed=args.seed)
    _write_csv(proj, out / "hull_projection.csv")
    sep, hist = separability_check(W, (0.0, args.window), bins=args.bins)
    _write_csv(sep, out / "separability.csv")
    _write_csv(hist, out / "separability_hist.csv")
    corr = correlations(matrix).reset_index().rename(columns={"index": "pollutant"})
    _write_csv(corr, out / "correlations.csv")
    return [args.matrix, str(Path(args.fit) / "profiles.csv"), str(Path(args.fit) / "intensities.csv")]


def cmd_simulate(args, out: Path):
    config = SynthConfig(
        n=args.n, J=args.J, K=args.K, p_pure=args.p_pure, epsilon=args.epsilon, sigma=args.sigma,
        locations=tuple(args.locations), seed=args.seed,
    )
    if args.effects:
        effects = {int(k): v for k, v in json.loads(args.effects).items()}
        data = generate_covariates(config, effects)
    else:
        data = generate(config)
    write_matrix(data.matrix, out / "matrix.csv")
    (out / "truth.json").write_text(json.dumps(data.truth_bundle(), indent=2, sort_keys=True) + "\n")
    return []


COMMANDS = {
    "preprocess": cmd_preprocess,
    "fit": cmd_fit,
    "bootstrap": cmd_bootstrap,
    "select-k": cmd_select_k,
    "regress": cmd_regress,
    "diurnal": cmd_diurnal,
    "case-study": cmd_case_study,
    "adequacy": cmd_adequacy,
    "simulate": cmd_simulate,
}


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="geoapportion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("preprocess", "raw sensor table -> scaled pollutant matrix")
    p.add_argument("--input", required=True)
    p.add_argument("--schema", help="key=value column mapping file")
    p.add_argument("--pollutants", nargs="+", help="pollutant columns when no schema is given")
    p.add_argument("--covariates", nargs="+", help="covariate columns when no schema is given")
    p.add_argument("--required", nargs="+", help="pollutants that must be present (default: all)")
    p.add_argument("--outlier", action="append", help="drop rows with NAME >= VALUE, written NAME<VALUE")
    p.add_argument("--no-size-bins", action="store_true", help="keep cumulative PM columns")
    p.add_argument("--sep", default=",")

    p = add("fit", "estimate profiles, intensities and attribution")
    p.add_argument("--matrix", required=True)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", choices=["geometric", "xray", "lsnmf", "ls-nmf"], default="geometric")
    p.add_argument("--l2", type=float, default=0.0, help="ridge penalty for lsnmf")
    p.add_argument("--hull-method", choices=["auto", "lp", "directions"], default="auto",
                   help="hull vertex search for the geometric method")

    def boot_flags(p, multi_k=False):
        p.add_argument("--matrix", required=True)
        if multi_k:
            p.add_argument("--K", type=int, nargs="+", default=[2, 3, 4, 5])
        else:
            p.add_argument("--K", type=int, default=3)
        p.add_argument("--B", type=int, default=100)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--method", choices=["geometric", "xray", "lsnmf", "ls-nmf"], default="geometric")
        p.add_argument("--mean-floor", type=float, default=0.03)
        p.add_argument("--hull-method", choices=["auto", "lp", "directions"], default="auto",
                       help="hull vertex search for the geometric method")
        p.add_argument("--jobs", type=int, help="worker cap (default GEOAPPORTION_JOBS or 1)")

    p = add("bootstrap", "bootstrap uncertainty of the attribution matrix")
    boot_flags(p)
    p.add_argument("--keep-intensities", action="store_true", help="store per-replicate intensities")
    p.add_argument("--archive", action="store_true", help="one attribution table per replicate")

    p = add("select-k", "stability diagnostics for candidate K")
    boot_flags(p, multi_k=True)

    p = add("regress", "bootstrap regression of source intensities on covariates")
    p.add_argument("--matrix", required=True)
    p.add_argument("--bootstrap", required=True, help="output directory of `bootstrap --keep-intensities`")
    p.add_argument("--terms", nargs="+", required=True)
    p.add_argument("--interaction", action="append", help="A:B")
    p.add_argument("--categorical", action="append", help="NAME=REFERENCE_LEVEL")
    p.add_argument("--contrast", action="append", help="LABEL=coef+coef")
    p.add_argument("--sources", type=int, nargs="+", help="1-based source numbers (default: all)")

    p = add("diurnal", "hour-of-day mean profiles")
    p.add_argument("--matrix", required=True)
    p.add_argument("--fit", help="fit output directory providing source intensities")
    p.add_argument("--columns", nargs="+")
    p.add_argument("--no-split", action="store_true", help="do not separate weekdays and weekends")

    p = add("case-study", "one-sided MW/KS tests for an incident window")
    p.add_argument("--matrix", required=True)
    p.add_argument("--fit")
    p.add_argument("--start", required=True, help="YYYY-MM-DD HH:MM")
    p.add_argument("--end", required=True, help="YYYY-MM-DD HH:MM (inclusive)")
    p.add_argument("--targets", nargs="+")
    p.add_argument("--group", choices=["pooled", "location"], default="pooled")

    p = add("adequacy", "hull projections, separability ratios and correlations")
    p.add_argument("--matrix", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--pairs", nargs="+", help="A:B pollutant pairs")
    p.add_argument("--cap", type=int, default=2000)
    p.add_argument("--window", type=float, default=0.2)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = add("simulate", "synthetic separable data with known attribution")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--J", type=int, default=8)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--p-pure", type=float, default=0.05)
    p.add_argument("--locations", nargs="+", default=["L1"])
    p.add_argument("--effects", help='JSON, e.g. {"0": {"u": 1.0}}')
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def _params(args):
    skip = {"out", "verbose", "command", "jobs"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def run(args):
    if args.command == "replay":
        manifest = json.loads(Path(args.manifest).read_text())
        replay = argparse.Namespace(**manifest["params"], command=manifest["command"], out=args.out,
                                    verbose=args.verbose, jobs=None)
        return run(replay)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    inputs = COMMANDS[args.command](args, out)
    outputs = {
        str(p.relative_to(out)): _sha256(p)
        for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "command": args.command,
        "params": _params(args),
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": outputs,
        "version": __version__,
        "duration_s": round(time.perf_counter() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (CommandError, *KNOWN_ERRORS) as exc:
        print(f"geoapportion {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
