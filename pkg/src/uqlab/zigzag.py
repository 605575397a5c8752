"""Zigzag regression toy: do ensembles stay uncertain across removed clusters?

Clusters sit at ``x = j`` with targets ``(-1)**j`` for ``j = -n..n``.  When an
interior cluster is dropped from training, both of its neighbours share the
same sign, so a smooth fit interpolates straight through the gap while member
disagreement stays about as small as on the training clusters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bayes import RadialLinear, kl_term
from .rng import child_rng


@dataclass
class ZigzagSpec:
    n: int = 3
    noise: float = 0.1
    points_per_cluster: int = 20
    removed: tuple = (-1, 1)
    ensemble_size: int = 10
    hidden: int = 64
    epochs: int = 500
    lr: float = 1e-2
    batch_size: int | None = 32  # None: full batch
    weight_decay: float = 0.0
    bayesian: bool = False
    grid_points: int = 401

    def __post_init__(self):
        self.removed = tuple(int(j) for j in self.removed)
        if self.points_per_cluster < 5:
            raise ValueError("need at least 5 points per cluster")
        clusters = set(range(-self.n, self.n + 1))
        if not set(self.removed) <= clusters:
            raise ValueError(f"removed clusters must lie in -{self.n}..{self.n}")
        if clusters <= set(self.removed):
            raise ValueError("all clusters removed")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")

    @property
    def kept(self) -> list[int]:
        return [j for j in range(-self.n, self.n + 1) if j not in self.removed]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["removed"] = list(self.removed)
        return d


def zigzag_data(spec: ZigzagSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = child_rng(seed, "zigzag-data")
    xs, ys = [], []
    for j in spec.kept:
        xs.append(j + rng.normal(0.0, spec.noise, spec.points_per_cluster))
        ys.append((-1.0) ** j + rng.normal(0.0, spec.noise, spec.points_per_cluster))
    return np.concatenate(xs), np.concatenate(ys)


class _MLP:
    def __init__(self, hidden: int, rng: np.random.Generator, bayesian: bool):
        self.bayesian = bayesian
        dims = [(1, hidden), (hidden, hidden), (hidden, 1)]
        self.layers = []
        for i, (a, b) in enumerate(dims):
            if bayesian:
                self.layers.append(RadialLinear.init(a, b, rng, init_std=0.01, name=f"l{i}"))
            else:
                # uniform fan-in init with random biases spreads the ReLU kinks along x
                bound = 1.0 / math.sqrt(a)
                self.layers.append((ad.parameter(rng.uniform(-bound, bound, (a, b))),
                                    ad.parameter(rng.uniform(-bound, bound, b))))

    def parameters(self):
        if self.bayesian:
            return [p for l in self.layers for p in l.parameters()]
        return [p for wb in self.layers for p in wb]

    def __call__(self, x, rng=None):
        h = ad.as_tensor(x.reshape(-1, 1))
        for i, layer in enumerate(self.layers):
            if self.bayesian:
                h = layer(h, layer.draw_noise(rng) if rng is not None else None)
            else:
                h = h @ layer[0] + layer[1]
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return h


def _fit(spec: ZigzagSpec, x, y, seed: int, member: int) -> _MLP:
    rng = child_rng(seed, "zigzag-member", member)
    net = _MLP(spec.hidden, rng, spec.bayesian)
    opt = ad.Adam(net.parameters(), lr=spec.lr, weight_decay=spec.weight_decay)
    bs = spec.batch_size or x.size
    for _ in range(spec.epochs):
        order = rng.permutation(x.size) if bs < x.size else np.arange(x.size)
        for start in range(0, x.size, bs):
            sel = order[start:start + bs]
            with ad.Tape() as tape:
                pred = net(x[sel], rng if spec.bayesian else None)
                loss = ad.mean(ad.square(pred - y[sel].reshape(-1, 1)))
                if spec.bayesian:
                    kl = sum((kl_term(l) for l in net.layers[1:]), kl_term(net.layers[0]))
                    loss = loss + kl * (1.0 / x.size)
                grads = tape.backward(loss)
            opt.step(grads)
    return net


@dataclass
class CollapseResult:
    grid: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    ratios: dict = field(default_factory=dict)      # removed j -> std(j) / mean training std
    deviations: dict = field(default_factory=dict)  # removed j -> |mean(j) - (-1)**j|
    train_std: float = 0.0
    far_std: float | None = None  # spread at x = n + 5, recorded only

    @property
    def median_ratio(self) -> float | None:
        return float(np.median(list(self.ratios.values()))) if self.ratios else None

    def summary(self) -> dict:
        return {"median_ratio": self.median_ratio, "train_std": self.train_std, "far_std": self.far_std,
                "ratios": {str(k): v for k, v in self.ratios.items()},
                "deviations": {str(k): v for k, v in self.deviations.items()}}

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "mean", "std"])
            for row in zip(self.grid, self.mean, self.std):
                w.writerow([repr(float(v)) for v in row])


def collapse_demo(spec: ZigzagSpec | None = None, seed: int = 0) -> CollapseResult:
    """Train the members and measure predictive spread at removed vs kept clusters."""
    spec = spec or ZigzagSpec()
    x, y = zigzag_data(spec, seed)
    grid = np.linspace(-spec.n - 1.0, spec.n + 1.0, spec.grid_points)
    centres = np.r_[np.arange(-spec.n, spec.n + 1, dtype=float), spec.n + 5.0]
    preds, at_centres = [], []
    for m in range(spec.ensemble_size):
        net = _fit(spec, x, y, seed, m)
        if spec.bayesian:
            rng = child_rng(seed, "zigzag-predict", m)
            for _ in range(max(1, 20 // spec.ensemble_size)):
                noise = [l.draw_noise(rng) for l in net.layers]
                h = ad.as_tensor(np.concatenate([grid, centres]).reshape(-1, 1))
                for i, (l, nz) in enumerate(zip(net.layers, noise)):
                    h = l(h, nz)
                    if i < len(net.layers) - 1:
                        h = ad.relu(h)
                out = h.data.ravel()
                preds.append(out[:grid.size])
                at_centres.append(out[grid.size:])
        else:
            preds.append(net(grid).data.ravel())
            at_centres.append(net(centres).data.ravel())
    preds = np.array(preds)
    at_centres = np.array(at_centres)
    c_mean, c_std = at_centres.mean(axis=0), at_centres.std(axis=0)
    idx = {int(j): i for i, j in enumerate(centres)}
    train_std = float(np.mean([c_std[idx[j]] for j in spec.kept]))
    res = CollapseResult(grid, preds.mean(axis=0), preds.std(axis=0), train_std=train_std,
                         far_std=float(c_std[-1]))
    for j in spec.removed:
        res.ratios[j] = float(c_std[idx[j]] / train_std) if train_std > 0 else float("inf")
        res.deviations[j] = float(abs(c_mean[idx[j]] - (-1.0) ** j))
    return res
