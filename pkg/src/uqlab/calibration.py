"""Matrix calibration of two-class logits and expected calibration error.

The calibrator is an affine map ``l' = W l + b`` fitted post hoc on held-out
logits.  Its loss is an ECE averaged over randomly drawn binnings plus a
cross-entropy anchor that rules out the constant-prediction solution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .rng import child_rng


@dataclass
class MatrixCalibrator:
    W: np.ndarray = field(default_factory=lambda: np.eye(2))
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64).reshape(2, 2)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(2)

    @property
    def n_parameters(self) -> int:
        return self.W.size + self.b.size

    def apply(self, logits) -> np.ndarray:
        """Map logits of shape ``(..., 2)``."""
        return np.asarray(logits, dtype=np.float64) @ self.W.T + self.b

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MatrixCalibrator":
        return cls(np.array(d["W"]), np.array(d["b"]))


@dataclass
class Binning:
    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e.ndim != 1 or e.size < 2 or e[0] != 0.0 or e[-1] != 1.0 or np.any(np.diff(e) <= 0):
            raise ValueError("bin edges must increase strictly from 0 to 1")
        self.edges = e

    @classmethod
    def uniform(cls, n_bins: int = 10) -> "Binning":
        return cls(np.linspace(0.0, 1.0, n_bins + 1))

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1

    def assign(self, p) -> np.ndarray:
        """Bin of each probability: ``[e_i, e_{i+1})``, last bin closed."""
        idx = np.searchsorted(self.edges, np.asarray(p, dtype=np.float64), side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)


@dataclass
class RandomBinningGenerator:
    """Interior edges from ``U(eps, 1 - eps)``, sorted, with 0 and 1 appended."""

    n_interior: int = 9
    eps: float = 0.01
    n_binnings: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_interior < 0 or self.n_binnings < 1 or not 0.0 <= self.eps < 0.5:
            raise ValueError("invalid random binning settings")
        self._rng = child_rng(self.seed, "binnings")

    def draw(self) -> Binning:
        inner = np.sort(self._rng.uniform(self.eps, 1.0 - self.eps, size=self.n_interior))
        edges = np.concatenate([[0.0], inner, [1.0]])
        # measure-zero duplicates would violate strict ordering
        if np.any(np.diff(edges) <= 0):
            return self.draw()
        return Binning(edges)

    def draw_many(self) -> list[Binning]:
        return [self.draw() for _ in range(self.n_binnings)]


def _prob_matrix(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = np.stack([1.0 - p, p], axis=1)
    if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
        raise ValueError("probabilities must lie in [0, 1]")
    return p


def ece(probs, labels, binning: Binning | None = None) -> float:
    """Bin-weighted |confidence - accuracy| summed over classes and bins.

    ``probs`` is either the class-1 probability per sample or an ``(S, M)``
    matrix.  Samples are binned separately for each class by that class's
    probability; empty bins add nothing.
    """
    binning = binning or Binning.uniform(10)
    p = _prob_matrix(probs)
    y = np.asarray(labels).astype(int)
    s, m = p.shape
    total = 0.0
    for c in range(m):
        bins = binning.assign(p[:, c])
        gap = np.bincount(bins, weights=p[:, c] - (y == c), minlength=binning.n_bins)
        # K_k/(S M) * |conf - acc| == |sum over bin of (p - 1[y=c])| / (S M)
        total += np.abs(gap).sum()
    return float(total / (s * m))


def reliability_table(probs, labels, binning: Binning | None = None, cls: int = 1) -> list[dict]:
    """Per-bin mean confidence, accuracy and count for class ``cls``."""
    binning = binning or Binning.uniform(10)
    p = _prob_matrix(probs)[:, cls]
    y = (np.asarray(labels).astype(int) == cls).astype(float)
    bins = binning.assign(p)
    rows = []
    for k in range(binning.n_bins):
        sel = bins == k
        cnt = int(sel.sum())
        rows.append({"bin_lo": float(binning.edges[k]), "bin_hi": float(binning.edges[k + 1]),
                     "conf": float(p[sel].mean()) if cnt else None,
                     "acc": float(y[sel].mean()) if cnt else None, "count": cnt})
    return rows


def write_reliability_csv(rows: Sequence[dict], path: Path) -> None:
    cols = ["bin_lo", "bin_hi", "conf", "acc", "count"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in cols])


def ece_loss(logits: ad.Tensor, labels, binnings: Sequence[Binning]) -> ad.Tensor:
    """Differentiable ECE averaged over ``binnings``.

    Bin membership and per-bin accuracy are constants of the forward pass;
    the gradient flows through the probabilities entering the confidences.
    """
    labels = np.asarray(labels).astype(int)
    s, m = logits.shape
    if s < 2:
        raise ValueError("ECE loss needs a batch of at least two samples")
    if not binnings:
        raise ValueError("need at least one binning")
    p = ad.softmax(logits, axis=-1)
    onehot_y = np.eye(m, dtype=logits.dtype)[labels]
    diff = p - onehot_y
    total = None
    for c in range(m):
        pc = p.data[:, c]
        cols = []
        for bn in binnings:
            member = np.zeros((s, bn.n_bins), dtype=logits.dtype)
            member[np.arange(s), bn.assign(pc)] = 1.0
            cols.append(member)
        member = np.concatenate(cols, axis=1)
        gaps = ad.matmul(ad.as_tensor(member.T, like=logits), diff[:, c:c + 1])
        term = ad.sum_(ad.abs_(gaps))
        total = term if total is None else total + term
    return total * (1.0 / (s * m * len(binnings)))


@dataclass
class CalibrationSettings:
    lambda_ce: float = 1.0
    lr: float = 1e-2
    steps: int = 500
    n_interior: int = 9
    eps: float = 0.01
    n_binnings: int = 16


def fit_calibrator(logits, labels, settings: CalibrationSettings | None = None,
                   seed: int = 0) -> MatrixCalibrator:
    """Fit ``W`` and ``b`` on held-out logits; the model itself is untouched."""
    settings = settings or CalibrationSettings()
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError("expected (S, 2) logits")
    gen = RandomBinningGenerator(settings.n_interior, settings.eps, settings.n_binnings, seed)
    W = ad.parameter(np.eye(2), name="W_mc")
    b = ad.parameter(np.zeros(2), name="b_mc")
    opt = ad.Adam([W, b], lr=settings.lr)
    x = ad.Tensor(logits)
    for _ in range(settings.steps):
        binnings = gen.draw_many()
        with ad.Tape() as tape:
            out = x @ ad.transpose(W) + b
            loss = ece_loss(out, labels, binnings)
            if settings.lambda_ce:
                loss = loss + ad.cross_entropy(out, labels) * settings.lambda_ce
            grads = tape.backward(loss)
        opt.step(grads)
    return MatrixCalibrator(W.data.copy(), b.data.copy())
