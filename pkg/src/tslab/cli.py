"""Command-line interface.

Every report-producing subcommand writes delimited text outputs and renders
matplotlib figures next to them:

  tslab run <config.json>            train one experiment, save JSON/CSV/PNGs
  tslab compare <config.json> --variants llm,random,...   side-by-side table
  tslab diagnose --residuals <csv>   Durbin-Watson + ACF report
  tslab align --pre --post --text    pseudo-alignment report
  tslab tally <results_dir>          win counts across persisted runs
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import figures
from .diagnostics import (
    ResidualDiagnostics,
    aggregate_dw,
    alignment_report,
    export_embeddings,
    pooled_residual_acf,
    read_embeddings,
    residual_acf,
)
from .errors import ConfigurationError, IngestionError
from .harness import ExperimentConfig, compare_variants, run_experiment, tally_results_dir

METRIC_COLUMNS = ("task", "horizon", "mse", "mae", "precision", "recall", "f1", "accuracy")


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _read_matrix(path) -> np.ndarray:
    """Numeric CSV (optional header) or an embedding-export file -> token rows."""
    path = Path(path)
    with open(path, newline="") as fh:
        first = fh.readline()
    if first.startswith("source,token_id"):
        groups = read_embeddings(path)
        return np.concatenate(list(groups.values()))
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for i, row in enumerate(reader):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue  # header
                raise IngestionError(f"{path}: non-numeric value on row {i}") from None
    if not rows:
        raise IngestionError(f"{path}: no numeric rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise IngestionError(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(rows, dtype=np.float64)


def _metric_rows(metrics) -> list:
    rows = []
    for record in metrics:
        rows.append([record.get(c) if record.get(c) is not None else "" for c in METRIC_COLUMNS])
    return rows


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.output_dir:
        as_dict = cfg.to_json_dict()
        as_dict["output_dir"] = args.output_dir
        cfg = ExperimentConfig.parse(as_dict)
    result = run_experiment(cfg)
    out = Path(cfg.output_dir)
    stem = f"run_{result.config_digest}_{cfg.variant.kind}_{cfg.task.task}"
    _write_csv(out / f"{stem}_metrics.csv", METRIC_COLUMNS, _metric_rows(result.metrics))
    if not args.no_figures:
        if result.diagnostics is not None:
            diag = ResidualDiagnostics(
                dw=result.diagnostics["dw"],
                acf=np.array(result.diagnostics["acf"]),
                band=result.diagnostics["band"],
                n=result.diagnostics["n"],
                note=result.diagnostics.get("note", ""),
            )
            figures.acf_figure(diag, out / f"{stem}_acf.png")
        art = result.artifacts or {}
        if "pred" in art:
            figures.forecast_figure(art["pred"][0], art["target"][0], out / f"{stem}_forecast.png")
        if "energy" in art:
            figures.anomaly_figure(art["energy"], art["threshold"], art.get("labels"),
                                   out / f"{stem}_energy.png")
    print(result.to_json())
    return 0


def _cmd_compare(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.output_dir:
        as_dict = cfg.to_json_dict()
        as_dict["output_dir"] = args.output_dir
        cfg = ExperimentConfig.parse(as_dict)
    kinds = [k.strip().lower() for k in args.variants.split(",") if k.strip()]
    if not kinds:
        raise ConfigurationError("--variants must list at least one kind")
    comparison = compare_variants(cfg, kinds)
    out = Path(cfg.output_dir)
    header = ["variant", "mse", "mae", "f1", "accuracy", "dw",
              "params_total", "params_trainable", "selected_lr"]
    rows = [[r.get(c) if r.get(c) is not None else "" for c in header] for r in comparison["rows"]]
    _write_csv(out / "comparison.csv", header, rows)
    if not args.no_figures:
        figures.comparison_figure(comparison["rows"], out / "comparison.png")
    print(json.dumps(comparison, indent=2, sort_keys=True))
    return 0


def _cmd_diagnose(args) -> int:
    matrix = _read_matrix(args.residuals)
    sequences = [matrix[:, j] for j in range(matrix.shape[1])]
    out = Path(args.output_dir)
    if len(sequences) == 1:
        diag = residual_acf(sequences[0], max_lag=min(args.max_lag, len(sequences[0]) - 1))
    else:
        lag = min(args.max_lag, min(len(s) for s in sequences) - 1)
        diag = pooled_residual_acf(sequences, max_lag=lag)
    mean_dw, count = aggregate_dw(sequences)
    payload = diag.to_json_dict()
    payload["aggregate_dw"] = mean_dw
    payload["sequence_count"] = count
    _write_csv(out / "acf.csv", ["lag", "rho", "band"],
               [[k + 1, f"{rho:.9g}", f"{diag.band:.9g}"] for k, rho in enumerate(diag.acf)])
    if not args.no_figures:
        figures.acf_figure(diag, out / "acf.png")
        figures.residual_figure(sequences, out / "residuals.png")
    (out / "diagnose.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _cmd_align(args) -> int:
    ts_pre = _read_matrix(args.pre)
    ts_post = _read_matrix(args.post)
    text = _read_matrix(args.text)
    alt_post = _read_matrix(args.alt) if args.alt else None
    report = alignment_report(ts_pre, ts_post, text, alt_post=alt_post, k=args.k, seed=args.seed)
    payload = report.to_json_dict()
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    scalar_rows = [
        ["centroid_shift_before", f"{report.centroid_shift_before:.9g}"],
        ["centroid_shift_after", f"{report.centroid_shift_after:.9g}"],
        ["knn_jaccard", "" if report.knn_jaccard is None else f"{report.knn_jaccard:.9g}"],
        ["w1_sliced", f"{report.w1_sliced:.9g}"],
        ["lipschitz_K", f"{report.lipschitz_k:.9g}"],
        ["bound_holds", str(report.bound_holds).lower()],
    ]
    _write_csv(out / "alignment.csv", ["metric", "value"], scalar_rows)
    clouds = {"ts_pre": ts_pre, "ts_post": ts_post, "text": text}
    if alt_post is not None:
        clouds["alt_post"] = alt_post
    export_embeddings(clouds, out / "embeddings.csv")
    if not args.no_figures:
        figures.alignment_figure(clouds, out / "alignment.png", report=report)
    (out / "alignment.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def _cmd_tally(args) -> int:
    summary = tally_results_dir(args.results_dir)
    out = Path(args.output_dir) if args.output_dir else Path(args.results_dir)
    rows = [[variant, wins["mse"], wins["mae"]] for variant, wins in sorted(summary["tally"].items())]
    _write_csv(out / "tally.csv", ["variant", "mse_wins", "mae_wins"], rows)
    if not args.no_figures:
        bar_rows = [{"variant": v, "mse": w["mse"], "mae": w["mae"]} for v, w in sorted(summary["tally"].items())]
        figures.comparison_figure(bar_rows, out / "tally.png", title="Win tally")
    (out / "tally.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tslab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", default=None)
    p_run.add_argument("--no-figures", action="store_true")
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="run several variants under one config")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--variants", required=True, help="comma list: llm,random,linear,att,trans,nollm")
    p_cmp.add_argument("--output-dir", default=None)
    p_cmp.add_argument("--no-figures", action="store_true")
    p_cmp.set_defaults(func=_cmd_compare)

    p_diag = sub.add_parser("diagnose", help="Durbin-Watson and ACF from a residual CSV")
    p_diag.add_argument("--residuals", required=True)
    p_diag.add_argument("--max-lag", type=int, default=40)
    p_diag.add_argument("--output-dir", default=".")
    p_diag.add_argument("--no-figures", action="store_true")
    p_diag.set_defaults(func=_cmd_diagnose)

    p_align = sub.add_parser("align", help="pseudo-alignment report from token-cloud CSVs")
    p_align.add_argument("--pre", required=True)
    p_align.add_argument("--post", required=True)
    p_align.add_argument("--text", required=True)
    p_align.add_argument("--alt", default=None)
    p_align.add_argument("-k", type=int, default=10)
    p_align.add_argument("--seed", type=int, default=0)
    p_align.add_argument("--output-dir", default=".")
    p_align.add_argument("--no-figures", action="store_true")
    p_align.set_defaults(func=_cmd_align)

    p_tally = sub.add_parser("tally", help="win counts over a directory of run results")
    p_tally.add_argument("results_dir")
    p_tally.add_argument("--output-dir", default=None)
    p_tally.add_argument("--no-figures", action="store_true")
    p_tally.set_defaults(func=_cmd_tally)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, IngestionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
