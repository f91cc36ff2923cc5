"""Command-line front end: analyze, compress, predict, fit, discover, synthlab, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical degeneracy.
Randomized paths take an explicit --seed (default 0); reports are JSON by
default, aligned text with --table.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import bundleio, compressors, formulas, mdl, records, spectral, symreg, synthlab
from .errors import DataError, DegeneracyError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _emit(payload: dict, args, table_text: str | None = None) -> None:
    if getattr(args, "table", False) and table_text is not None:
        text = table_text
    else:
        text = json.dumps(payload, indent=2)
    if getattr(args, "output", None):
        Path(args.output).write_text(text + "\n", "utf-8")
    else:
        print(text)


def _format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]]
    for row in rows:
        cells.append([f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# --- analyze -----------------------------------------------------------------

def _analyze_payload(bundle: bundleio.ModelBundle) -> dict:
    matrices = {}
    for m in bundle.matrices:
        summary = spectral.SpectralSummary.from_matrix(m.values)
        matrices[m.name] = {
            "role": m.role, "layer": m.layer_index,
            "rows": m.rows, "cols": m.cols, **summary.as_dict(),
        }
    aggregates = {}
    for scope in ("attn", "mlp", "both"):
        try:
            agg = spectral.aggregate_ranks(bundle.matrices, scope)
        except DataError:
            continue
        in_scope = [m for m in bundle.matrices if m.role in spectral.ROLE_SCOPES[scope]]
        sizes = [m.param_count for m in in_scope]
        entry = agg.as_dict()
        entry["k95_bar"] = spectral.aggregate(
            [matrices[m.name]["k95"] for m in in_scope], sizes)
        entry["k99_bar"] = spectral.aggregate(
            [matrices[m.name]["k99"] for m in in_scope], sizes)
        aggregates[scope] = entry

    try:
        estimate = mdl.mdl_bits(bundle)
        if estimate.n_matrices_skipped:
            print(f"warning: {estimate.n_matrices_skipped} non-bf16 matrices "
                  "skipped by the MDL estimate", file=sys.stderr)
        mdl_payload = estimate.as_dict()
    except DataError:
        print("warning: no bf16 payloads; MDL estimate unavailable", file=sys.stderr)
        mdl_payload = None

    return {
        "n_params": bundle.total_params,
        "metadata": bundle.metadata,
        "matrices": matrices,
        "aggregates": aggregates,
        "mdl": mdl_payload,
    }


def _cmd_analyze(args) -> int:
    bundle = bundleio.load_bundle(args.bundle)
    payload = _analyze_payload(bundle)
    rows = [(name, info["role"], info["rows"], info["cols"],
             info["stable_rank"], info["effective_rank"], info["k95"])
            for name, info in payload["matrices"].items()]
    table = _format_table(("name", "role", "rows", "cols", "rho_s", "rho_eff", "k95"), rows)
    _emit(payload, args, table)
    return 0


# --- compress ------------------------------------------------------------------

def _load_calibration(path) -> dict:
    if path is None:
        return {}
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read calibration archive: {exc}") from exc
    return {name: np.asarray(archive[name], dtype=np.float64) for name in archive.files}


def _cmd_compress(args) -> int:
    bundle = bundleio.load_bundle(args.bundle)
    method = args.method
    if args.whiten and method == "svdllm":
        method = "svdllm_whiten"
    config = compressors.CompressionConfig(
        method=method, gamma=args.gamma, alpha=args.alpha,
        target=args.target, ridge=args.ridge, seed=args.seed)
    calib = _load_calibration(args.calib)
    compressed, report = compressors.compress_bundle(bundle, config, calib)
    bundleio.save_bundle(compressed, args.output_bundle)
    payload = {
        "output": str(args.output_bundle),
        "method": method,
        "gamma": args.gamma,
        "n_params_before": bundle.total_params,
        "n_params_after": compressed.total_params,
        "matrices": report,
    }
    rows = [(e["name"], e["rank"], e["params_before"], e["params_after"],
             e.get("output_error", "")) for e in report]
    _emit(payload, args, _format_table(
        ("name", "rank", "params_before", "params_after", "output_error"), rows))
    return 0


# --- predict -------------------------------------------------------------------

def predict_degradation(aggregates: spectral.AggregateRanks, gamma: float,
                        coefficients) -> float:
    """Default predictor: alpha0 + alpha1 * (gamma * rho_s_bar)."""
    if not 0.0 < gamma <= 1.0:
        raise DataError("gamma must lie in (0, 1]")
    coefficients = list(coefficients)
    if len(coefficients) < 2:
        raise DataError("need at least (alpha0, alpha1) coefficients")
    return float(coefficients[0] + coefficients[1] * gamma * aggregates.rho_s_bar)


def _record_from_bundle(bundle, gamma: float, scope: str) -> records.ObservationRecord:
    agg = spectral.aggregate_ranks(bundle.matrices, scope)
    in_scope = [m for m in bundle.matrices if m.role in spectral.ROLE_SCOPES[scope]]
    sizes = [m.param_count for m in in_scope]
    summaries = {m.name: spectral.SpectralSummary.from_matrix(m.values) for m in in_scope}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", compressors.RankBudgetWarning)
        ranks = [compressors.rank_for_ratio(m.rows, m.cols, gamma) for m in in_scope]
    n = bundle.total_params
    try:
        bits = mdl.mdl_bits(bundle).bits_per_param
    except DataError:
        bits = float("nan")
    return records.ObservationRecord(
        gamma=gamma,
        log_n=math.log(n),
        log_n_comp=math.log(max(1.0, gamma * n)),
        bits=bits,
        rho_s_bar=agg.rho_s_bar,
        rho_eff_bar=agg.rho_eff_bar,
        svd_rank=spectral.aggregate(ranks, sizes),
        k95_bar=spectral.aggregate([summaries[m.name].k95 for m in in_scope], sizes),
        k99_bar=spectral.aggregate([summaries[m.name].k99 for m in in_scope], sizes),
        gamma_attn=gamma if scope in ("attn", "both") else 1.0,
        gamma_mlp=gamma if scope in ("mlp", "both") else 1.0,
        layer=scope,
    )


def _cmd_predict(args) -> int:
    bundle = bundleio.load_bundle(args.bundle)
    try:
        fit_report = json.loads(Path(args.coeffs).read_text("utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read coefficients: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"bad coefficients file: {exc}") from exc
    entries = fit_report.get("ranked", fit_report) if isinstance(fit_report, dict) \
        else fit_report
    if not isinstance(entries, list):
        raise DataError("coefficients file must hold a fit-report array")
    entry = next((e for e in entries if e.get("formula_id") == args.formula), None)
    if entry is None:
        raise DataError(f"no coefficients for formula {args.formula!r} in {args.coeffs}")

    formula = formulas.catalog_by_id(args.formula)
    record = _record_from_bundle(bundle, args.gamma, args.target)
    features = formulas.build_features(formula, record, shift=entry.get("shift"))
    if not np.all(np.isfinite(features)):
        raise DataError(f"{formula.id} needs predictors this bundle cannot supply "
                        "(no bf16 payloads for the bits estimate)")
    coeffs = entry["coefficients"]
    if len(coeffs) != len(features) + 1:
        raise DataError(f"coefficient count {len(coeffs)} does not match "
                        f"{formula.id}'s {len(features)} features plus intercept")
    prediction = float(coeffs[0] + np.dot(coeffs[1:], features))
    payload = {
        "formula_id": args.formula,
        "target": entry.get("target"),
        "prediction": prediction,
        "gamma": args.gamma,
        "scope": args.target,
        "rho_s_bar": record.rho_s_bar,
        "rho_eff_bar": record.rho_eff_bar,
    }
    _emit(payload, args)
    return 0


# --- fit / discover --------------------------------------------------------------

def _read_filtered(args) -> list:
    recs = records.read_observations(args.observations)
    recs = records.filter_records(recs, layer=args.layer, task=args.task,
                                  method=args.method_filter)
    if not recs:
        raise DataError("no records left after filtering")
    return recs


def _cmd_fit(args) -> int:
    recs = _read_filtered(args)
    pool = formulas.template_catalog() + formulas.discovered_catalog() \
        + [formulas.default_predictor()]
    ranking = formulas.select_best(pool, recs, args.target)
    payload = {
        "target": args.target,
        "n_records": len(recs),
        "ranked": [fit.as_dict() for fit in ranking.ranked],
        "excluded": ranking.excluded,
    }
    rows = [(fit.formula_id, fit.loo_r, fit.train_r, fit.n)
            for fit in ranking.ranked[:15]]
    _emit(payload, args, _format_table(("formula", "loo_r", "train_r", "n"), rows))
    return 0


def _cmd_discover(args) -> int:
    recs = _read_filtered(args)
    config = symreg.GpConfig(
        population=args.population, generations=args.generations,
        tournament_size=args.tournament, parsimony=args.parsimony,
        seed=args.seed, max_vars=args.max_vars, max_nonlinear=args.max_nonlinear)
    result = symreg.gp_discover(recs, args.target, config)
    payload = {
        "target": args.target,
        "expression": result.prefix,
        "n_records": result.n_records,
        "fitness_trace": result.fitness_trace,
        "fit": result.fit.as_dict() if result.fit is not None else None,
    }
    _emit(payload, args)
    return 0


# --- synthlab ---------------------------------------------------------------------

def _parse_floats(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise DataError(f"bad numeric list {text!r}") from exc


def _parse_ints(text: str) -> list[int]:
    return [int(v) for v in _parse_floats(text)]


_SWEEP_KINDS = {"attention": "attention_value_path", "mlp": "mlp_swiglu",
                "hadamard": "hadamard_only"}


def _cmd_synthlab(args) -> int:
    if args.experiment == "sweep":
        kind = _SWEEP_KINDS[args.layer]
        dims = tuple(_parse_ints(args.dims)) if args.dims else None
        grid = _parse_floats(args.grid) if args.grid else None
        curve = synthlab.compression_sweep(kind, dims, grid, args.trials, args.seed)
        payload = curve.as_dict()
        if len(curve.gamma_grid) >= 10:
            payload["form_ranking"] = synthlab.fit_forms(curve).as_dict()
        rows = list(zip(curve.gamma_grid, curve.rel_errors))
        _emit(payload, args, _format_table(("gamma", "rel_error"), rows))
    elif args.experiment == "hadamard":
        ranks = _parse_ints(args.ranks) if args.ranks else synthlab.DEFAULT_HADAMARD_RANKS
        dims = tuple(_parse_ints(args.dims)) if args.dims \
            else synthlab.DEFAULT_HADAMARD_DIMS
        report = synthlab.hadamard_rank_experiment(ranks, dims, args.seed,
                                                   args.factor_mean)
        rows = [(r.target_rank, r.rho_a, r.rho_b, r.rho_product, r.geo_mean, r.ratio)
                for r in report.rows]
        rows.append(("average", "", "", "", "", report.average_ratio))
        _emit(report.as_dict(), args, _format_table(
            ("target_rank", "rho_a", "rho_b", "rho_product", "geo_mean", "ratio"), rows))
    elif args.experiment == "degradation":
        dims = tuple(_parse_ints(args.dims)) if args.dims else (896, 896, 4864)
        comp = synthlab.degradation_compare(args.gamma_low, args.gamma_high,
                                            dims, args.trials, args.seed)
        _emit(comp.as_dict(), args)
    else:
        dims = tuple(_parse_ints(args.dims)) if args.dims else (16, 12)
        report = synthlab.perturbation_checks(args.trials, dims, args.seed)
        _emit(report.as_dict(), args)
    return 0


# --- report ------------------------------------------------------------------------

def _cmd_report(args) -> int:
    recs = records.read_observations(args.observations)
    tasks: dict[str, list] = {}
    for rec in recs:
        if rec.ppl is None or rec.acc is None:
            continue
        tasks.setdefault(rec.task, []).append(rec)
    if not tasks:
        raise DataError("no records carry both perplexity and accuracy")
    entries = []
    for task in sorted(tasks):
        group = tasks[task]
        # Fluency score: higher is better, so coupling shows as positive r.
        scores = [-math.log(r.ppl) for r in group]
        accs = [r.acc for r in group]
        try:
            r = formulas.pearson(scores, accs)
        except (DataError, DegeneracyError) as exc:
            entries.append({"task": task, "n": len(group), "pearson_r": None,
                            "note": str(exc)})
            continue
        entries.append({"task": task, "n": len(group), "pearson_r": r})
    if all(e["pearson_r"] is None for e in entries):
        raise DegeneracyError("no task yields a defined perplexity-accuracy correlation")
    payload = {"metric": "pearson(-log ppl, acc)", "tasks": entries}
    rows = [(e["task"], e["n"], e["pearson_r"] if e["pearson_r"] is not None else "-")
            for e in entries]
    _emit(payload, args, _format_table(("task", "n", "pearson_r"), rows))
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lowranklab",
                     description="Predict low-rank compression degradation "
                                 "from weight spectra.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-o", "--output", help="write the JSON report here")
        p.add_argument("--table", action="store_true", help="aligned text output")

    p = sub.add_parser("analyze", help="spectral + MDL report for a bundle")
    p.add_argument("bundle")
    common(p)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("compress", help="compress a bundle with an SVD method")
    p.add_argument("bundle")
    p.add_argument("-b", "--output-bundle", required=True,
                   help="directory for the compressed bundle")
    p.add_argument("--method", choices=compressors.METHODS, default="vanilla")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--calib", help=".npz archive of calibration activations")
    p.add_argument("--whiten", action="store_true",
                   help="whiten calibration inputs (svdllm)")
    p.add_argument("--target", choices=("attn", "mlp", "both"), default="both")
    p.add_argument("--ridge", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("predict", help="predict degradation from bundle spectra")
    p.add_argument("bundle")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--coeffs", required=True, help="fit-report JSON with coefficients")
    p.add_argument("--formula", default="GSR",
                   help="catalog id to evaluate (default: the gamma*rho_s interaction)")
    p.add_argument("--target", choices=("attn", "mlp", "both"), default="both")
    common(p)
    p.set_defaults(func=_cmd_predict)

    def obs_common(p):
        p.add_argument("observations", help="observation CSV")
        p.add_argument("--target", choices=formulas.TARGET_KINDS,
                       default="rel_degradation")
        p.add_argument("--layer", choices=records.LAYERS)
        p.add_argument("--task")
        p.add_argument("--method", dest="method_filter",
                       help="keep only records from this compression method")
        common(p)

    p = sub.add_parser("fit", help="rank formula catalogs by LOO correlation")
    obs_common(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("discover", help="genetic-programming formula search")
    obs_common(p)
    p.add_argument("--population", type=int, default=1000)
    p.add_argument("--generations", type=int, default=20)
    p.add_argument("--tournament", type=int, default=20)
    p.add_argument("--parsimony", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-vars", type=int, default=3)
    p.add_argument("--max-nonlinear", type=int, default=2)
    p.set_defaults(func=_cmd_discover)

    p = sub.add_parser("synthlab", help="synthetic verification experiments")
    p.add_argument("experiment",
                   choices=("sweep", "hadamard", "degradation", "perturbation"))
    p.add_argument("--layer", choices=tuple(_SWEEP_KINDS), default="attention")
    p.add_argument("--dims", help="comma-separated dimensions")
    p.add_argument("--grid", help="comma-separated gamma grid")
    p.add_argument("--ranks", help="comma-separated target ranks (hadamard)")
    p.add_argument("--factor-mean", type=float, default=synthlab.DEFAULT_FACTOR_MEAN)
    p.add_argument("--gamma-low", type=float, default=0.1)
    p.add_argument("--gamma-high", type=float, default=0.87)
    p.add_argument("--trials", type=int, default=synthlab.DEFAULT_TRIALS)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(func=_cmd_synthlab)

    p = sub.add_parser("report", help="derived observation reports")
    p.add_argument("kind", choices=("ppl-acc",))
    p.add_argument("observations")
    common(p)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DegeneracyError as exc:
        print(json.dumps({"error": str(exc), "kind": "degeneracy"}), file=sys.stderr)
        return 3
    except DataError as exc:
        print(json.dumps({"error": str(exc), "kind": "data"}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": str(exc), "kind": "io"}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
