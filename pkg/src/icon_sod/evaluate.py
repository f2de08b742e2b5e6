"""Batch evaluation of prediction/ground-truth directory pairs.

Images are matched by file stem; per-image metric rows are computed by a
pure worker (optionally across a process pool -- results are identical for
any worker count) and aggregated as arithmetic means.  Curves, when
requested, are averaged across images.  Report writers emit JSON and CSV
with the frozen key set documented in the README, plus rendered curve
figures next to the CSV output.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import IMAGE_EXTS, load_mask
from .metrics import N_THRESHOLDS, MetricReport, evaluate_pair

WORKERS_ENV = "ICON_SOD_WORKERS"

REPORT_SCHEMA = "icon-sod-report-v1"
METRIC_KEYS = ("mae", "wfm", "sm", "em_mean", "fnr")


def worker_count(requested: int | None = None) -> int:
    if requested is not None and requested > 0:
        return requested
    env = os.environ.get(WORKERS_ENV, "")
    if env.isdigit() and int(env) > 0:
        return int(env)
    return 1


def discover_pairs(pred_dir, gt_dir):
    """Match files by stem; returns (pairs sorted by stem, unmatched names)."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    if not gt_dir.is_dir():
        raise FileNotFoundError(f"ground-truth directory not found: {gt_dir}")
    preds = {
        p.stem: p for p in sorted(pred_dir.iterdir()) if p.suffix.lower() in IMAGE_EXTS
    }
    gts = {
        p.stem: p for p in sorted(gt_dir.iterdir()) if p.suffix.lower() in IMAGE_EXTS
    }
    pairs = [(stem, preds[stem], gts[stem]) for stem in sorted(preds.keys() & gts.keys())]
    unmatched = sorted(set(preds) ^ set(gts))
    return pairs, unmatched


def _eval_one(task):
    """Worker: one per-image row, or an error marker for bad pairs."""
    stem, pred_path, gt_path, fnr_threshold, with_curves = task
    pred = load_mask(pred_path).astype(np.float64) / 255.0
    gt_raw = load_mask(gt_path)
    if pred.shape != gt_raw.shape:
        return stem, None, f"size mismatch {pred.shape} vs {gt_raw.shape}"
    gt = (gt_raw.astype(np.float64) >= 128.0).astype(np.float64)
    row = evaluate_pair(pred, gt, fnr_threshold=fnr_threshold, with_curves=with_curves)
    row["name"] = stem
    return stem, row, None


def evaluate_dirs(
    pred_dir,
    gt_dir,
    fnr_threshold: float = 0.5,
    with_curves: bool = False,
    workers: int | None = None,
) -> tuple[MetricReport, list[str]]:
    """Evaluate every matched pair; returns (report, skipped descriptions)."""
    pairs, unmatched = discover_pairs(pred_dir, gt_dir)
    skipped = [f"{name}: unmatched stem" for name in unmatched]
    tasks = [
        (stem, pred, gt, fnr_threshold, with_curves) for stem, pred, gt in pairs
    ]

    n_workers = worker_count(workers)
    if n_workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_eval_one, tasks, chunksize=8))
    else:
        results = [_eval_one(t) for t in tasks]

    results.sort(key=lambda r: r[0])
    rows = []
    curve_sums = None
    for stem, row, error in results:
        if error is not None:
            skipped.append(f"{stem}: {error}")
            continue
        if with_curves:
            curves = row.pop("curves")
            if curve_sums is None:
                curve_sums = {k: v.copy() for k, v in curves.items()}
            else:
                for k in ("precision", "recall", "fmeasure"):
                    curve_sums[k] += curves[k]
        rows.append(row)

    aggregate = {"n_images": len(rows)}
    for key in METRIC_KEYS:
        vals = [r[key] for r in rows if r[key] is not None]
        aggregate[key] = float(np.mean(vals)) if vals else None
    aggregate["n_fnr_defined"] = sum(1 for r in rows if r["fnr"] is not None)

    curves = None
    if with_curves and curve_sums is not None and rows:
        n = len(rows)
        curves = {
            "threshold": np.arange(N_THRESHOLDS, dtype=np.float64),
            "precision": curve_sums["precision"] / n,
            "recall": curve_sums["recall"] / n,
            "fmeasure": curve_sums["fmeasure"] / n,
        }
    return MetricReport(per_image=rows, aggregate=aggregate, curves=curves), skipped


# -- report writers ---------------------------------------------------------------


def format_fnr_percent(value: float | None) -> str:
    return "undefined" if value is None else f"{value * 100.0:.2f}%"


def write_report(report: MetricReport, out_dir, render_figures: bool = True) -> dict[str, Path]:
    """Write report.json, per_image.csv and, with curves, curves.csv + figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}

    payload = {
        "schema": REPORT_SCHEMA,
        "aggregate": report.aggregate,
        "per_image": [
            {k: row[k] for k in ("name", *METRIC_KEYS, "empty_gt")}
            for row in report.per_image
        ],
    }
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    written["json"] = json_path

    csv_path = out_dir / "per_image.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", *METRIC_KEYS, "empty_gt"])
        for row in report.per_image:
            writer.writerow(
                [row["name"]]
                + [("" if row[k] is None else f"{row[k]:.10g}") for k in METRIC_KEYS]
                + [int(row["empty_gt"])]
            )
    written["csv"] = csv_path

    if report.curves is not None:
        curves_path = out_dir / "curves.csv"
        with open(curves_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall", "fmeasure"])
            for i in range(len(report.curves["threshold"])):
                writer.writerow(
                    [
                        int(report.curves["threshold"][i]),
                        f"{report.curves['precision'][i]:.10g}",
                        f"{report.curves['recall'][i]:.10g}",
                        f"{report.curves['fmeasure'][i]:.10g}",
                    ]
                )
        written["curves"] = curves_path
        if render_figures:
            from .figures import plot_fmeasure_curve, plot_pr_curve

            written["pr_figure"] = plot_pr_curve(
                report.curves, out_dir / "pr_curve.png"
            )
            written["f_figure"] = plot_fmeasure_curve(
                report.curves, out_dir / "fmeasure_curve.png"
            )
    return written
