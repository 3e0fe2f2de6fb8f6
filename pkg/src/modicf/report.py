"""Aggregation of per-seed runs into tables and figures.

Reads run manifests, groups them by variant, averages metrics across seeds,
runs the paired significance test against the full model, and renders a
Markdown table, CSV files, and matplotlib figures next to them.
"""

import json
from collections import defaultdict
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import paired_ttest

TABLE_METRICS = ("recall", "precision", "ndcg", "F", "F_fuse")


def load_runs(manifest_paths):
    runs = []
    for p in manifest_paths:
        manifest = json.loads(Path(p).read_text())
        if "metrics" not in manifest:
            raise ValueError(f"{p}: manifest has no metrics section")
        runs.append(manifest)
    return runs


def _metric_value(metrics, name, k):
    key = {"recall": "recall", "precision": "precision", "ndcg": "ndcg",
           "F": "fairness", "F_fuse": "fairness_fuse"}[name]
    return metrics[key][str(k)]


def aggregate(runs):
    """Mean/std per (variant, metric, K) plus per-seed values for the t-test."""
    grouped = defaultdict(list)
    for run in runs:
        grouped[run["variant"]].append(run)
    table = {}
    for variant, items in sorted(grouped.items()):
        items = sorted(items, key=lambda r: r["seed"])
        k_values = items[0]["metrics"]["k_values"]
        cells = {}
        for name in TABLE_METRICS:
            for k in k_values:
                vals = [_metric_value(r["metrics"], name, k) for r in items]
                vals = [v for v in vals if v is not None]
                if not vals:
                    continue
                cells[(name, k)] = {
                    "mean": float(np.mean(vals)),
                    "std": float(np.std(vals)),
                    "values": vals,
                    "seeds": [r["seed"] for r in items],
                }
        table[variant] = {"k_values": k_values, "cells": cells, "n": len(items)}
    return table


def significance_against(table, reference="full"):
    """Paired t-tests of each variant against the reference across seeds."""
    if reference not in table:
        return []
    rows = []
    ref = table[reference]["cells"]
    for variant, entry in table.items():
        if variant == reference:
            continue
        for key, cell in entry["cells"].items():
            if key not in ref:
                continue
            a, b = ref[key]["values"], cell["values"]
            if len(a) != len(b) or len(a) < 2:
                continue
            t, sig = paired_ttest(a, b)
            rows.append({
                "variant": variant, "metric": key[0], "k": key[1],
                "t": t, "significant": sig,
            })
    return rows


def percent(x):
    return f"{100.0 * x:.2f}"


def render_markdown(table, sig_rows):
    lines = []
    variants = list(table)
    if not variants:
        return "no runs\n"
    k_values = table[variants[0]]["k_values"]
    header = ["variant", "seeds"]
    for name in TABLE_METRICS:
        for k in k_values:
            header.append(f"{name}@{k} (%)")
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for variant, entry in table.items():
        row = [variant, str(entry["n"])]
        for name in TABLE_METRICS:
            for k in k_values:
                cell = entry["cells"].get((name, k))
                row.append(f"{percent(cell['mean'])}±{percent(cell['std'])}"
                           if cell else "-")
        lines.append("| " + " | ".join(row) + " |")
    if sig_rows:
        lines.append("")
        lines.append("Paired t-test vs `full` (two-sided, 5%):")
        for r in sig_rows:
            mark = {True: "significant", False: "not significant", None: "undefined"}[r["significant"]]
            lines.append(f"- {r['variant']} {r['metric']}@{r['k']}: "
                         f"t={r['t']:.3f} ({mark})")
    return "\n".join(lines) + "\n"


def render_csv(table):
    lines = ["variant,metric,K,mean,std,n_seeds"]
    for variant, entry in table.items():
        for (name, k), cell in sorted(entry["cells"].items()):
            lines.append(f"{variant},{name},{k},{cell['mean']!r},{cell['std']!r},"
                         f"{len(cell['values'])}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# figures


def figure_metric_bars(table, metric, k, path):
    variants = list(table)
    means, stds = [], []
    for v in variants:
        cell = table[v]["cells"].get((metric, k))
        means.append(cell["mean"] if cell else 0.0)
        stds.append(cell["std"] if cell else 0.0)
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(variants)), 3.2))
    ax.bar(range(len(variants)), means, yerr=stds, capsize=3, color="#4878cf")
    ax.set_xticks(range(len(variants)))
    ax.set_xticklabels(variants, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"{metric}@{k}")
    ax.set_title(f"{metric}@{k} by variant")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def figure_exposure(runs, k, path):
    """Total top-K exposure of complete vs incomplete items, per variant."""
    by_variant = defaultdict(lambda: [0.0, 0.0, 0])
    for run in runs:
        exp = run["metrics"]["exposure"].get(str(k))
        if exp is None:
            continue
        acc = by_variant[run["variant"]]
        acc[0] += exp["complete_total"]
        acc[1] += exp["incomplete_total"]
        acc[2] += 1
    variants = sorted(by_variant)
    if not variants:
        return False
    comp = [by_variant[v][0] / by_variant[v][2] for v in variants]
    inc = [by_variant[v][1] / by_variant[v][2] for v in variants]
    x = np.arange(len(variants))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(variants)), 3.2))
    ax.bar(x - 0.2, comp, width=0.4, label="complete items", color="#4878cf")
    ax.bar(x + 0.2, inc, width=0.4, label="incomplete items", color="#d65f5f")
    ax.set_xticks(x)
    ax.set_xticklabels(variants, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"total exposure in top-{k}")
    ax.set_title("Exposure by item completeness")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def figure_mr_sweep(runs, metric, k, path):
    """Metric against the missing rate when manifests span several rates."""
    by_mr = defaultdict(list)
    for run in runs:
        mr = run.get("mr")
        if mr is None:
            continue
        val = _metric_value(run["metrics"], metric, k)
        if val is not None:
            by_mr[float(mr)].append(val)
    if len(by_mr) < 2:
        return False
    mrs = sorted(by_mr)
    means = [float(np.mean(by_mr[m])) for m in mrs]
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    ax.plot(mrs, means, marker="o", color="#4878cf")
    ax.set_xlabel("missing rate")
    ax.set_ylabel(f"{metric}@{k}")
    ax.set_title(f"{metric}@{k} vs missing rate")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def write_report(manifest_paths, out_dir):
    """Full report bundle: tables, significance, and figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = load_runs(manifest_paths)
    table = aggregate(runs)
    sig = significance_against(table)
    (out / "summary.md").write_text(render_markdown(table, sig))
    (out / "summary.csv").write_text(render_csv(table))
    if sig:
        lines = ["variant,metric,K,t,significant"]
        for r in sig:
            lines.append(f"{r['variant']},{r['metric']},{r['k']},{r['t']!r},"
                         f"{r['significant']}")
        (out / "significance.csv").write_text("\n".join(lines) + "\n")
    figures = out / "figures"
    figures.mkdir(exist_ok=True)
    made = []
    variants = list(table)
    if variants:
        k_values = table[variants[0]]["k_values"]
        k = k_values[-1]
        for metric in ("recall", "F", "F_fuse"):
            p = figures / f"{metric.lower()}_at_{k}.png"
            figure_metric_bars(table, metric, k, p)
            made.append(p)
        p = figures / f"exposure_at_{k}.png"
        if figure_exposure(runs, k, p):
            made.append(p)
        p = figures / f"f_fuse_vs_mr.png"
        if figure_mr_sweep(runs, "F_fuse", k, p):
            made.append(p)
    return table, sig, made
