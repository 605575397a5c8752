"""Uncertainty measures from logit samples and the cut-off / remapping protocol.

All measures take logit samples of shape ``(N, M)`` for one input or
``(n, N, M)`` for a batch and use natural logarithms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .metrics import MetricError, auc_roc

DEFAULT_QUANTILES = tuple(round(0.01 * i, 2) for i in range(51))
DEFAULT_PROB_BINS = 20
BIN_SCHEMES = ("equal_count", "equal_width")
MEASURES = ("pe", "mi", "sigma_delta", "mi_eu", "sigma_delta_eu")


class UnsupportedDimension(ValueError):
    pass


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def _as_samples(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError("logit samples need shape (N, M) or (n, N, M)")
    if arr.shape[-2] < 1:
        raise ValueError("need at least one logit sample")
    return arr


@dataclass
class LogitSampleSet:
    """``N`` logit vectors for one input."""

    logits: np.ndarray

    def __post_init__(self):
        self.logits = _as_samples(self.logits)
        if self.logits.ndim != 2:
            raise ValueError("LogitSampleSet holds a single input's (N, M) samples")

    @property
    def probs(self) -> np.ndarray:
        return softmax_np(self.logits)

    @property
    def mean_prob(self) -> np.ndarray:
        return self.probs.mean(axis=0)

    def __len__(self) -> int:
        return self.logits.shape[0]


def predictive_entropy(samples) -> np.ndarray | float:
    """Entropy of the sample-averaged class distribution."""
    arr = samples.logits if isinstance(samples, LogitSampleSet) else _as_samples(samples)
    out = _entropy(softmax_np(arr).mean(axis=-2))
    return float(out) if np.ndim(out) == 0 else out


def mutual_information(samples) -> np.ndarray | float:
    """Mixture entropy minus mean per-sample entropy, floored at zero."""
    arr = samples.logits if isinstance(samples, LogitSampleSet) else _as_samples(samples)
    p = softmax_np(arr)
    out = _entropy(p.mean(axis=-2)) - _entropy(p).mean(axis=-1)
    out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def signed_distance(samples) -> np.ndarray:
    """Component of each two-class logit vector orthogonal to ``(1, 1)/sqrt(2)``."""
    arr = samples.logits if isinstance(samples, LogitSampleSet) else np.asarray(samples, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise UnsupportedDimension(f"sigma_delta is defined for two classes, got {arr.shape[-1]}")
    return (arr[..., 1] - arr[..., 0]) / math.sqrt(2.0)


def sigma_delta(samples) -> np.ndarray | float:
    """Standard deviation (over samples) of the signed distance."""
    arr = samples.logits if isinstance(samples, LogitSampleSet) else _as_samples(samples)
    out = signed_distance(arr).std(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


# ------------------------------------------------------------------ records


@dataclass
class UncertaintyRecord:
    id: str
    prob: float
    label: int
    pe: float
    mi: float | None = None
    sigma_delta: float | None = None
    mi_eu: float | None = None
    sigma_delta_eu: float | None = None


RECORD_COLUMNS = [f.name for f in fields(UncertaintyRecord)]


def build_records(ids: Sequence[str], labels: Sequence[int], samples: np.ndarray,
                  n_bins: int = DEFAULT_PROB_BINS, scheme: str = "equal_count") -> list[UncertaintyRecord]:
    """Records from ``(n, N, 2)`` logit samples; remapped measures included.

    With a single sample per input (deterministic model) only PE is defined
    and the disagreement measures are left as ``None``.
    """
    samples = _as_samples(samples)
    if samples.ndim != 3:
        raise ValueError("samples must have shape (n, N, M)")
    probs = softmax_np(samples).mean(axis=1)[:, 1]
    pe = predictive_entropy(samples)
    single = samples.shape[1] == 1
    if single:
        mi = sd = mi_eu = sd_eu = [None] * len(ids)
    else:
        mi = mutual_information(samples)
        sd = sigma_delta(samples)
        mi_eu = remap_to_uniform(probs, mi, n_bins, scheme)
        sd_eu = remap_to_uniform(probs, sd, n_bins, scheme)
    out = []
    for i, (pid, y) in enumerate(zip(ids, labels)):
        f = (lambda arr: None if arr[i] is None else float(arr[i]))
        out.append(UncertaintyRecord(str(pid), float(probs[i]), int(y), float(pe[i]),
                                     f(mi), f(sd), f(mi_eu), f(sd_eu)))
    return out


def records_to_arrays(records: Sequence[UncertaintyRecord], measure: str) -> tuple[np.ndarray, ...]:
    probs = np.array([r.prob for r in records])
    labels = np.array([r.label for r in records])
    vals = [getattr(r, measure) for r in records]
    if any(v is None for v in vals):
        return probs, labels, None
    return probs, labels, np.array(vals, dtype=np.float64)


def write_records(records: Sequence[UncertaintyRecord], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(["" if getattr(r, c) is None else
                        (repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c))
                        for c in RECORD_COLUMNS])


def read_records(path: Path) -> list[UncertaintyRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            opt = lambda k: None if row[k] == "" else float(row[k])
            out.append(UncertaintyRecord(row["id"], float(row["prob"]), int(row["label"]),
                                         float(row["pe"]), opt("mi"), opt("sigma_delta"),
                                         opt("mi_eu"), opt("sigma_delta_eu")))
    return out


# ------------------------------------------------------------------ protocol


def cutoff_curve(scores, labels, measure, quantiles: Sequence[float] = DEFAULT_QUANTILES
                 ) -> list[tuple[float, float | None]]:
    """AUC ROC after dropping the ``q`` fraction with the largest ``measure``.

    ``floor(q * n)`` points are dropped; ties in ``measure`` are broken by
    input order.  A retained set with one class yields ``None`` for that q.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    measure = np.asarray(measure, dtype=np.float64)
    n = scores.size
    if n == 0:
        raise ValueError("no records")
    if any(not 0.0 <= q <= 0.5 for q in quantiles):
        raise ValueError("cut-off quantiles must lie in [0, 0.5]")
    # most uncertain first; stable so equal values keep input order
    order = np.argsort(-measure, kind="stable")
    out = []
    for q in quantiles:
        k = int(math.floor(q * n + 1e-9))
        keep = np.sort(order[k:])
        try:
            out.append((float(q), auc_roc(scores[keep], labels[keep])))
        except MetricError:
            out.append((float(q), None))
    return out


def probability_bins(probs, n_bins: int = DEFAULT_PROB_BINS, scheme: str = "equal_count") -> np.ndarray:
    """Bin index of each predicted probability.

    ``equal_width`` cuts [0, 1] into ``n_bins`` equal intervals (last one
    closed).  ``equal_count`` uses the empirical quantiles of ``probs`` as
    edges, so bins hold about the same number of records; tied
    probabilities always share a bin.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if scheme == "equal_width":
        return np.clip(np.floor(probs * n_bins).astype(int), 0, n_bins - 1)
    if scheme != "equal_count":
        raise ValueError(f"unknown binning scheme {scheme!r}; expected one of {BIN_SCHEMES}")
    if probs.size == 0:
        return np.zeros(0, dtype=int)
    inner = np.quantile(probs, np.arange(1, n_bins) / n_bins)
    return np.searchsorted(inner, probs, side="right")


def remap_to_uniform(probs, measure, n_bins: int = DEFAULT_PROB_BINS, scheme: str = "equal_count") -> np.ndarray:
    """Replace ``measure`` by its within-bin mid-rank ``(rank - 0.5) / K_bin``.

    Records are binned by predicted probability (see :func:`probability_bins`);
    tied values share their average rank.  Orderings inside a bin are
    preserved, while the marginal of the result is uniform in every bin.
    """
    probs = np.asarray(probs, dtype=np.float64)
    measure = np.asarray(measure, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("no records to remap")
    if n_bins < 1:
        raise ValueError("need at least one bin")
    if probs.shape != measure.shape:
        raise ValueError("probabilities and measure must align")
    bins = probability_bins(probs, n_bins, scheme)
    out = np.empty_like(measure)
    for b in np.unique(bins):
        idx = np.flatnonzero(bins == b)
        out[idx] = (rankdata(measure[idx]) - 0.5) / idx.size
    return out
