"""Benchmark report persistence (JSON + CSV) and the comparison figures."""

from __future__ import annotations

import csv
import json
import os
from typing import Mapping

import numpy as np

from .benchmark import REPORT_SCHEMA_VERSION, BenchmarkRecord, BenchmarkReport

CSV_COLUMNS = ("image_id", "prototype", "g_before", "g_after", "plc", "pac", "r_before", "r_after",
               "prc", "pred_before", "pred_after", "delta_lb")
BAR_METRICS = ("PLC", "PAC", "PRC", "AC")
# per-image fields plotted as densities
DENSITY_FIELDS = {"PLC": "plc_term", "PAC": "pac_term", "PRC": "prc_term", "delta_lb": "delta_lb"}
HIST_BINS = 20


class SchemaError(ValueError):
    pass


def report_json(report: BenchmarkReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def _csv_row(r: BenchmarkRecord) -> list:
    return [r.image_id, r.prototype_index, repr(r.g_before), repr(r.g_after), repr(r.plc_term),
            repr(r.pac_term), r.r_before, r.r_after, r.prc_term, r.pred_before, r.pred_after,
            repr(r.delta_lb)]


def write_report(report: BenchmarkReport, out_dir, stem: str = "report") -> list[str]:
    """Write ``<stem>.json`` (full records) and ``<stem>.csv`` (one row per image); return both paths."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, f"{stem}.json")
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(json_path, "w") as fh:
        fh.write(report_json(report))
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.records:
            w.writerow(_csv_row(r))
    return [json_path, csv_path]


def read_report(path) -> BenchmarkReport:
    with open(path) as fh:
        d = json.load(fh)
    version = d.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise SchemaError(f"{path}: report schema version {version!r}, expected {REPORT_SCHEMA_VERSION}")
    return BenchmarkReport(
        records=[BenchmarkRecord.from_dict(r) for r in d["records"]],
        config=d.get("config", {}),
        seed=int(d.get("seed", 0)),
        failures=int(d.get("failures", 0)),
        schema_version=version,
    )


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def mean_aggregates(reports) -> dict:
    """Per-metric mean of the aggregates of several reports (e.g. one per seed)."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports")
    aggs = [r.aggregates for r in reports]
    return {k: float(np.mean([a[k] for a in aggs])) for k in aggs[0]}


def _histogram(values: np.ndarray):
    lo, hi = (float(values.min()), float(values.max())) if values.size else (0.0, 1.0)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.histogram(values, bins=HIST_BINS, range=(lo, hi))


def _kde(values: np.ndarray, grid: np.ndarray):
    from scipy.stats import gaussian_kde

    if values.size < 2 or np.ptp(values) == 0:
        return None
    return gaussian_kde(values)(grid)


def plot_reports(reports: Mapping[str, BenchmarkReport], out_dir) -> dict:
    """Grouped bar chart of the aggregates across variants plus one density figure per metric.

    ``reports`` maps a variant name to its report; bars follow the sorted variant names.
    Returns ``{"files": [...], "variants": [...], "histograms": {metric: {variant: counts}}}``.
    """
    if not reports:
        raise ValueError("plot_reports needs at least one report")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    names = sorted(reports)
    meta = {"Software": None}
    files, hists = [], {}

    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(BAR_METRICS), 3.2))
    width = 0.8 / len(names)
    xs = np.arange(len(BAR_METRICS))
    for i, name in enumerate(names):
        agg = reports[name].aggregates
        ax.bar(xs + (i - (len(names) - 1) / 2) * width, [agg[m] for m in BAR_METRICS], width, label=name)
    ax.set_xticks(xs, BAR_METRICS)
    ax.set_ylabel("value (PLC, PAC, AC in %)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = os.path.join(out_dir, "metrics_bar.png")
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)
    files.append(path)

    for metric, attr in DENSITY_FIELDS.items():
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        hists[metric] = {}
        for name in names:
            vals = np.array([float(getattr(r, attr)) for r in reports[name].records])
            counts, edges = _histogram(vals)
            hists[metric][name] = counts
            ax.hist(vals, bins=edges, density=True, alpha=0.35, label=name)
            grid = np.linspace(edges[0], edges[-1], 200)
            dens = _kde(vals, grid)
            if dens is not None:
                ax.plot(grid, dens)
        ax.set_xlabel(metric + " per image")
        ax.set_ylabel("density")
        ax.legend(fontsize="small")
        fig.tight_layout()
        path = os.path.join(out_dir, f"density_{metric}.png")
        fig.savefig(path, dpi=100, metadata=meta)
        plt.close(fig)
        files.append(path)
    return {"files": files, "variants": names, "histograms": hists}
