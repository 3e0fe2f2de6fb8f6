import json

import numpy as np
import pytest

from modicf import report as rp


def _manifest(variant, seed, recall, fairness, mr=0.4):
    ks = [3, 5]
    return {
        "variant": variant, "seed": seed, "mr": mr,
        "metrics": {
            "k_values": ks,
            "recall": {str(k): recall for k in ks},
            "precision": {str(k): recall / 2 for k in ks},
            "ndcg": {str(k): recall * 0.8 for k in ks},
            "fairness": {str(k): fairness for k in ks},
            "fairness_fuse": {str(k): fairness * recall for k in ks},
            "exposure": {str(k): {"per_item": [1, 2], "complete_total": 3,
                                  "incomplete_total": 1} for k in ks},
        },
    }


def test_aggregate_and_totals_recompute():
    runs = [_manifest("full", 0, 0.5, 0.9), _manifest("full", 1, 0.7, 0.8),
            _manifest("no-counterfactual", 0, 0.4, 0.5),
            _manifest("no-counterfactual", 1, 0.6, 0.4)]
    table = rp.aggregate(runs)
    cell = table["full"]["cells"][("recall", 3)]
    assert cell["mean"] == pytest.approx(0.6)
    assert cell["values"] == [0.5, 0.7]
    # order of manifests must not matter: values align by seed
    table2 = rp.aggregate(list(reversed(runs)))
    assert table2["full"]["cells"][("recall", 3)]["values"] == [0.5, 0.7]


def test_significance_pairs_by_seed():
    # eighths are exact in binary, so the paired differences are truly constant
    runs = [_manifest("full", s, 0.5 + 0.125 * s, 0.9) for s in range(4)]
    runs += [_manifest("variant-x", s, 0.375 + 0.125 * s, 0.7) for s in range(4)]
    table = rp.aggregate(runs)
    rows = rp.significance_against(table)
    row = [r for r in rows if r["metric"] == "recall" and r["k"] == 3][0]
    # constant difference of 0.1 across seeds: zero-variance branch, t = +inf
    assert row["t"] == np.inf and row["significant"] is None


def test_markdown_and_csv_render():
    runs = [_manifest("full", 0, 0.5, 0.9), _manifest("full", 1, 0.6, 0.8)]
    table = rp.aggregate(runs)
    md = rp.render_markdown(table, [])
    assert "| full | 2 |" in md
    assert "55.00" in md  # percent formatting of the 0.55 mean
    csv = rp.render_csv(table)
    assert csv.splitlines()[0] == "variant,metric,K,mean,std,n_seeds"
    assert any(line.startswith("full,recall,3,0.55") for line in csv.splitlines())


def test_write_report_produces_figures(tmp_path):
    runs = []
    for s in range(3):
        for variant in ("full", "no-counterfactual"):
            m = _manifest(variant, s, 0.4 + 0.05 * s, 0.8, mr=0.1 * (s + 1))
            p = tmp_path / f"{variant}-{s}.json"
            p.write_text(json.dumps(m))
            runs.append(p)
    table, sig, figures = rp.write_report(runs, tmp_path / "out")
    assert (tmp_path / "out" / "summary.md").exists()
    assert (tmp_path / "out" / "summary.csv").exists()
    assert (tmp_path / "out" / "significance.csv").exists()
    names = {f.name for f in figures}
    assert any("recall" in n for n in names)
    assert any("exposure" in n for n in names)
    assert any("mr" in n for n in names)  # manifests span several rates
    for f in figures:
        assert f.stat().st_size > 0
