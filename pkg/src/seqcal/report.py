"""Summaries computed from the files written by ``experiment.write_results``.

Everything here reads only ``results.csv``, ``acquired/*.csv`` and
``manifest.json``; nothing is recomputed from models.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from .metrics import DEFAULT_ALPHA, interval_scores, quantile_widths

METRICS = ("mad_p", "mad_y")


def load_rows(results_dir) -> list:
    path = Path(results_dir) / "results.csv"
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["replicate"] = int(r["replicate"])
        r["iteration"] = int(r["iteration"])
        for m in METRICS:
            r[m] = float(r[m]) if r[m] not in ("", None) else None
    return rows


def load_acquired(results_dir) -> dict:
    """{(method, replicate): (x array, theta array)} from the acquired logs."""
    out = {}
    for path in sorted((Path(results_dir) / "acquired").glob("*_rep*.csv")):
        method, rep = path.stem.rsplit("_rep", 1)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            data = np.array([[float(v) for v in row] for row in reader])
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        tcols = [i for i, h in enumerate(header) if h.startswith("theta")]
        if data.size == 0:
            data = np.empty((0, len(header)))
        out[(method, int(rep))] = (data[:, xcols], data[:, tcols])
    return out


def metric_series(rows, metric: str) -> dict:
    """{method: (iterations, median, q25, q75)} across replicates."""
    by = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r[metric] is not None:
            by[r["method"]][r["iteration"]].append(r[metric])
    out = {}
    for method, per_it in by.items():
        its = np.array(sorted(per_it))
        vals = [np.asarray(per_it[i]) for i in its]
        out[method] = (
            its,
            np.array([np.median(v) for v in vals]),
            np.array([np.quantile(v, 0.25) for v in vals]),
            np.array([np.quantile(v, 0.75) for v in vals]),
        )
    return out


def acquisitions_to_reach(iterations, values, level) -> int | None:
    """First iteration whose value is at or below ``level`` (None if never)."""
    hit = np.flatnonzero(np.asarray(values) <= level)
    return int(np.asarray(iterations)[hit[0]]) if hit.size else None


def threshold_table(series: dict) -> dict:
    """Iterations each method needs to reach the worst method's final median."""
    if not series:
        return {}
    level = max(med[-1] for _, med, _, _ in series.values())
    return {"level": float(level),
            "iterations": {m: acquisitions_to_reach(its, med, level)
                           for m, (its, med, _, _) in series.items()}}


def interval_table(acquired: dict, theta_ls: dict, alpha: float = DEFAULT_ALPHA) -> dict:
    """Mean interval score per method and parameter, averaged over replicates."""
    per = defaultdict(list)
    for (method, rep), (_, theta) in acquired.items():
        if theta.shape[0] >= 2 and rep in theta_ls:
            per[method].append(interval_scores(theta, theta_ls[rep], alpha))
    return {m: {"per_dim": np.mean(v, axis=0).tolist(), "mean": float(np.mean(v))}
            for m, v in per.items()}


def width_table(acquired: dict, lo: float = 0.05, hi: float = 0.95) -> dict:
    per = defaultdict(list)
    for (method, _), (x, _) in acquired.items():
        if x.shape[0] >= 2:
            per[method].append(quantile_widths(x, lo, hi))
    return {m: {"per_dim": np.mean(v, axis=0).tolist(), "mean": float(np.mean(v))}
            for m, v in per.items()}


def _theta_ls(results_dir) -> dict:
    path = Path(results_dir) / "manifest.json"
    if not path.exists():
        return {}
    runs = json.loads(path.read_text()).get("runs", [])
    return {r["replicate"]: np.array(r["theta_ls"]) for r in runs}


def summarize(results_dir) -> dict:
    """Summary document.

    Schema::

        {"series": {metric: {method: {"iteration": [...], "median": [...],
                                      "q25": [...], "q75": [...]}}},
         "thresholds": {metric: {"level": float, "iterations": {method: int|null}}},
         "interval_scores": {method: {"per_dim": [...], "mean": float}},
         "quantile_widths": {method: {"per_dim": [...], "mean": float}}}
    """
    rows = load_rows(results_dir)
    acquired = load_acquired(results_dir)
    out = {"series": {}, "thresholds": {}}
    for metric in METRICS:
        s = metric_series(rows, metric)
        if not s:
            continue
        out["series"][metric] = {
            m: {"iteration": its.tolist(), "median": med.tolist(), "q25": lo.tolist(), "q75": hi.tolist()}
            for m, (its, med, lo, hi) in s.items()
        }
        out["thresholds"][metric] = threshold_table(s)
    out["interval_scores"] = interval_table(acquired, _theta_ls(results_dir))
    out["quantile_widths"] = width_table(acquired)
    return out


def write_report(results_dir) -> dict:
    """Write plot-ready CSVs next to the results and return the summary."""
    results_dir = Path(results_dir)
    summary = summarize(results_dir)
    with open(results_dir / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "method", "iteration", "median", "q25", "q75"])
        for metric, per in summary["series"].items():
            for method, s in per.items():
                for row in zip(s["iteration"], s["median"], s["q25"], s["q75"]):
                    w.writerow([metric, method, *row])
    with open(results_dir / "thresholds.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "level", "method", "iterations"])
        for metric, tab in summary["thresholds"].items():
            for method, it in tab["iterations"].items():
                w.writerow([metric, tab["level"], method, "" if it is None else it])
    for name in ("interval_scores", "quantile_widths"):
        with open(results_dir / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "dim", "value"])
            for method, tab in summary[name].items():
                for j, v in enumerate(tab["per_dim"], start=1):
                    w.writerow([method, j, v])
                w.writerow([method, "mean", tab["mean"]])
    return summary


def format_report(summary: dict) -> str:
    lines = []
    for metric, tab in summary["thresholds"].items():
        lines.append(f"{metric}: acquisitions to reach {tab['level']:.4g}")
        for method, it in tab["iterations"].items():
            lines.append(f"  {method:8s} {'NA' if it is None else it}")
    for name in ("interval_scores", "quantile_widths"):
        if summary[name]:
            lines.append(name.replace("_", " ") + ":")
            for method, tab in summary[name].items():
                dims = " ".join(f"{v:.3f}" for v in tab["per_dim"])
                lines.append(f"  {method:8s} mean {tab['mean']:.3f}  [{dims}]")
    return "\n".join(lines)
