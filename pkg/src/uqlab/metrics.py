"""Discrimination metrics and aggregation over cross-validation runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    """Metric undefined for the given input (e.g. a single class)."""


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-d arrays of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    return scores, labels.astype(np.int64)


def auc_roc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties = 1/2)."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC ROC needs both classes")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) at every distinct score threshold, high to low."""
    scores, labels = _check(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp = tp[last], fp[last]
    return tp / labels.sum(), tp / (tp + fp)


def auc_pr(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Precision is replaced by its envelope (the best precision at any equal or
    higher recall) and summed over recall increments; no trapezoids.
    """
    scores, labels = _check(scores, labels)
    if labels.sum() == 0:
        raise MetricError("AUC PR needs at least one positive")
    recall, precision = pr_points(scores, labels)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(steps * envelope))


# ------------------------------------------------------------------ run aggregation


PAPER_REFERENCE = {
    # discrimination, mean ± 1 sd over 8 runs
    "TE": {"auc_roc": (0.868, 0.011), "auc_pr": (0.554, 0.034),
           "delta": {"pe": (0.075, 0.006), "mi": (0.056, 0.010), "mi_eu": (0.014, 0.007),
                     "sigma_delta": (-0.056, 0.017), "sigma_delta_eu": (0.006, 0.008)}},
    "BT": {"auc_roc": (0.862, 0.013), "auc_pr": (0.546, 0.036),
           "delta": {"pe": (0.073, 0.006), "mi": (0.037, 0.014), "mi_eu": (0.002, 0.007),
                     "sigma_delta": (-0.092, 0.011), "sigma_delta_eu": (-0.003, 0.015)}},
    # benchmark LSTMs: value with (0.05, 0.95) quantiles
    "S-LSTM": {"auc_roc": (0.855, (0.835, 0.873)), "auc_pr": (0.485, (0.431, 0.537))},
    "MTCW-LSTM": {"auc_roc": (0.870, (0.852, 0.887)), "auc_pr": (0.533, (0.480, 0.584))},
}


@dataclass
class RunResult:
    run: int
    auc_roc: float
    auc_pr: float
    cutoff: dict[str, list[tuple[float, float | None]]] = field(default_factory=dict)

    def delta(self, measure: str, q: float = 0.5) -> float | None:
        curve = self.cutoff.get(measure)
        if not curve:
            return None
        base = curve[0][1]
        at = dict((round(qq, 10), v) for qq, v in curve).get(round(q, 10))
        if base is None or at is None:
            return None
        return at - base


class MissingRunError(ValueError):
    pass


def _mean_std(xs: Sequence[float]) -> dict:
    xs = [x for x in xs if x is not None]
    if not xs:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(xs, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}


def summarize_runs(results: Sequence[RunResult], model: str, n_runs: int = 8,
                   q: float = 0.5) -> dict:
    """Mean and sample standard deviation of each metric over the runs."""
    ids = sorted(r.run for r in results)
    if ids != list(range(n_runs)):
        missing = sorted(set(range(n_runs)) - set(ids))
        raise MissingRunError(f"expected runs 0..{n_runs - 1}; missing {missing or 'none'}, got {ids}")
    results = sorted(results, key=lambda r: r.run)
    measures = sorted({m for r in results for m in r.cutoff})
    summary = {
        "model": model,
        "n_runs": n_runs,
        "auc_roc": _mean_std([r.auc_roc for r in results]),
        "auc_pr": _mean_std([r.auc_pr for r in results]),
        "delta_auc_roc": {m: _mean_std([r.delta(m, q) for r in results]) for m in measures},
        "quantile": q,
        "per_run": [{"run": r.run, "auc_roc": r.auc_roc, "auc_pr": r.auc_pr,
                     "delta_auc_roc": {m: r.delta(m, q) for m in measures}} for r in results],
    }
    return summary


def mean_curve(results: Sequence[RunResult], measure: str) -> list[tuple[float, float | None]]:
    """Cut-off curve averaged over runs, skipping undefined points."""
    curves = [r.cutoff[measure] for r in results if r.cutoff.get(measure)]
    if not curves:
        return []
    out = []
    for i, (q, _) in enumerate(curves[0]):
        vals = [c[i][1] for c in curves if c[i][1] is not None]
        out.append((q, float(np.mean(vals)) if vals else None))
    return out


def fmt_pm(stat: Mapping) -> str:
    if stat.get("mean") is None:
        return "n/a"
    return f"{stat['mean']:.3f} ±{stat['std']:.3f}"

