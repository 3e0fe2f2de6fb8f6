"""Ranking accuracy, fairness, exposure accounting and the paired t-test."""

import math
from dataclasses import dataclass, field

import numpy as np

# two-sided 5% critical values of Student's t for df = 1..30
T_CRIT_5PCT = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365,
    8: 2.306, 9: 2.262, 10: 2.228, 11: 2.201, 12: 2.179, 13: 2.160, 14: 2.145,
    15: 2.131, 16: 2.120, 17: 2.110, 18: 2.101, 19: 2.093, 20: 2.086,
    21: 2.080, 22: 2.074, 23: 2.069, 24: 2.064, 25: 2.060, 26: 2.056,
    27: 2.052, 28: 2.048, 29: 2.045, 30: 2.042,
}


class MetricError(ValueError):
    pass


@dataclass
class RankingResult:
    """Per-user top-K item ids and scores, train positives excluded."""

    k: int
    items: np.ndarray   # (n_users, k) item indices
    scores: np.ndarray  # (n_users, k)


@dataclass
class MetricReport:
    k_values: list
    recall: dict = field(default_factory=dict)
    precision: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    fairness: dict = field(default_factory=dict)        # raw F, may be negative
    fairness_fuse: dict = field(default_factory=dict)
    exposure: dict = field(default_factory=dict)        # per K: complete/incomplete totals
    seed: int = 0
    config_id: str = ""

    def flat(self):
        out = {}
        for k in self.k_values:
            out[f"recall@{k}"] = self.recall.get(k)
            out[f"precision@{k}"] = self.precision.get(k)
            out[f"ndcg@{k}"] = self.ndcg.get(k)
            out[f"F@{k}"] = self.fairness.get(k)
            out[f"F_fuse@{k}"] = self.fairness_fuse.get(k)
        return out


def rank_topk(scores, bundle, k):
    """Sorted top-k per user with train positives masked out.

    Ties break toward the lower item index; the result depends only on the
    score values, never on array layout.
    """
    scores = np.ascontiguousarray(np.asarray(scores, dtype=np.float64))
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    train = bundle.train_matrix().astype(bool)
    candidates = (~train).sum(axis=1)
    if k > candidates.min():
        raise MetricError(f"k={k} exceeds the candidate count of some user")
    masked = scores.copy()
    masked[train] = -np.inf
    order = np.argsort(-masked, axis=1, kind="stable")[:, :k]
    top_scores = np.take_along_axis(masked, order, axis=1)
    return RankingResult(k=k, items=order, scores=top_scores)


def accuracy_metrics(result, test_matrix):
    """Macro-averaged recall/precision/NDCG over users with a test positive."""
    test = np.asarray(test_matrix).astype(bool)
    n_users, k = result.items.shape
    eligible = test.sum(axis=1) > 0
    if not eligible.any():
        raise MetricError("no user has a test positive")
    recalls, precisions, ndcgs = [], [], []
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    for u in np.flatnonzero(eligible):
        hits = test[u, result.items[u]]
        n_pos = int(test[u].sum())
        h = int(hits.sum())
        recalls.append(h / n_pos)
        precisions.append(h / k)
        dcg = float(discounts[hits].sum())
        idcg = float(discounts[:min(k, n_pos)].sum())
        ndcgs.append(dcg / idcg if idcg > 0 else 0.0)
    return float(np.mean(recalls)), float(np.mean(precisions)), float(np.mean(ndcgs))


def incomplete_share(result, indicator):
    """Mean share of incomplete items in the top-k lists (P_r@K)."""
    incomplete = (indicator.entries == 0).any(axis=1)
    return float(incomplete[result.items].mean())


def dataset_incomplete_share(indicator):
    """Share of incomplete items in the whole dataset (P_d)."""
    return float((indicator.entries == 0).any(axis=1).mean())


def fairness_f(result, indicator, p_d=None):
    """F@K = 1 - |P_r - P_d| / P_d; negative values mean over-exposure."""
    if p_d is None:
        p_d = dataset_incomplete_share(indicator)
    if p_d <= 0:
        return None
    p_r = incomplete_share(result, indicator)
    return 1.0 - abs(p_r - p_d) / p_d


def fairness_f_fuse(f, precision):
    """Harmonic mean of fairness and precision; F is clamped to [0, 1] first."""
    if f is None:
        return None
    f = min(max(f, 0.0), 1.0)
    if f + precision == 0:
        return 0.0
    return 2.0 * f * precision / (f + precision)


def exposure_counts(result, indicator):
    """Appearances of each item over all lists, split by completeness."""
    n_items = indicator.n_items
    counts = np.bincount(result.items.reshape(-1), minlength=n_items)
    incomplete = (indicator.entries == 0).any(axis=1)
    return {
        "per_item": counts,
        "complete_total": int(counts[~incomplete].sum()),
        "incomplete_total": int(counts[incomplete].sum()),
    }


def suppressed_items(exposure_run, exposure_reference):
    """Items whose exposure dropped below the reference run's exposure."""
    a = np.asarray(exposure_run)
    b = np.asarray(exposure_reference)
    if a.shape != b.shape:
        raise MetricError("exposure vectors must align")
    return int((a < b).sum())


def paired_ttest(sample_a, sample_b):
    """Paired t statistic and a two-sided 5% significance decision.

    Zero-variance differences yield an undefined decision; t is reported as
    signed infinity (or 0 for identical samples).
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise MetricError("need two equal-length samples with at least 2 entries")
    d = a - b
    sd = d.std(ddof=1)
    n = d.size
    if sd == 0:
        if d.mean() == 0:
            return 0.0, False
        return math.copysign(math.inf, d.mean()), None
    t = d.mean() / (sd / math.sqrt(n))
    df = n - 1
    if df > 30:
        crit = 1.960
    else:
        crit = T_CRIT_5PCT[df]
    return float(t), bool(abs(t) > crit)


def evaluate(scores, bundle, indicator, k_values, seed=0, config_id=""):
    """Full metric report at every requested cutoff."""
    report = MetricReport(k_values=list(k_values), seed=seed, config_id=config_id)
    test = bundle.split_mask("test")
    p_d = dataset_incomplete_share(indicator)
    for k in k_values:
        result = rank_topk(scores, bundle, k)
        rec, prec, ndcg = accuracy_metrics(result, test)
        f = fairness_f(result, indicator, p_d) if p_d > 0 else None
        report.recall[k] = rec
        report.precision[k] = prec
        report.ndcg[k] = ndcg
        report.fairness[k] = f
        report.fairness_fuse[k] = fairness_f_fuse(f, prec)
        exp = exposure_counts(result, indicator)
        report.exposure[k] = {
            "per_item": exp["per_item"].tolist(),
            "complete_total": exp["complete_total"],
            "incomplete_total": exp["incomplete_total"],
        }
    return report
