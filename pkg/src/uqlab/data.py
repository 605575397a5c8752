"""Clinical token data model, synthetic cohorts, CSV exchange and CV splits.

An episode is a 48 hour window of timestamped tokens.  Continuous features
become *value tokens* ``(t, concept, v)``; categorical features become
*boolean tokens* ``(t, concept)`` with one concept per category, named
``"<feature>=<category>"``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import child_rng

HORIZON_HOURS = 48.0
N_FOLDS = 4
N_RUNS = 8
LABEL_INDEX = "listfile.csv"


class DataError(ValueError):
    """Invalid generator spec, malformed episode file or bad split request."""


@dataclass(frozen=True, slots=True)
class MedicalToken:
    t: float
    concept: str
    v: float | None = None

    @property
    def is_value(self) -> bool:
        return self.v is not None


@dataclass
class Episode:
    """One patient window stored column-wise.

    ``values`` holds NaN for boolean tokens.  Tokens are kept sorted by time;
    equal timestamps keep their insertion order.
    """

    patient_id: str
    times: np.ndarray
    concepts: np.ndarray
    values: np.ndarray
    label: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.concepts = np.asarray(self.concepts, dtype=object)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (len(self.times) == len(self.concepts) == len(self.values)):
            raise DataError(f"episode {self.patient_id}: column lengths differ")
        if len(self.times) == 0:
            raise DataError(f"episode {self.patient_id} has no tokens")
        if self.label not in (0, 1):
            raise DataError(f"episode {self.patient_id}: label must be 0 or 1")
        order = np.argsort(self.times, kind="stable")
        if not np.array_equal(order, np.arange(len(order))):
            self.times = self.times[order]
            self.concepts = self.concepts[order]
            self.values = self.values[order]

    @classmethod
    def from_tokens(cls, patient_id: str, tokens: Sequence[MedicalToken], label: int) -> "Episode":
        return cls(patient_id,
                   [tok.t for tok in tokens],
                   [tok.concept for tok in tokens],
                   [np.nan if tok.v is None else tok.v for tok in tokens],
                   label)

    @property
    def tokens(self) -> list[MedicalToken]:
        return [MedicalToken(float(t), str(c), None if math.isnan(v) else float(v))
                for t, c, v in zip(self.times, self.concepts, self.values)]

    def __len__(self) -> int:
        return len(self.times)


# ------------------------------------------------------------------ vocabulary


@dataclass
class ConceptVocabulary:
    """Boolean concepts occupy indices ``[0, B)``, value concepts ``[B, B+V)``."""

    boolean: list[str]
    value: list[str]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        names = list(self.boolean) + list(self.value)
        if len(set(names)) != len(names):
            raise DataError("concept identifiers must be unique across boolean and value concepts")
        if not names:
            raise DataError("vocabulary needs at least one concept")
        self._index = {c: i for i, c in enumerate(names)}
        self._value_slot = {c: i for i, c in enumerate(self.value)}

    @property
    def n_boolean(self) -> int:
        return len(self.boolean)

    @property
    def n_value(self) -> int:
        return len(self.value)

    @property
    def n_concepts(self) -> int:
        return len(self.boolean) + len(self.value)

    @property
    def input_width(self) -> int:
        return self.n_boolean + 2 * self.n_value

    def index(self, concept: str) -> int:
        try:
            return self._index[concept]
        except KeyError:
            raise KeyError(f"unknown concept {concept!r}") from None

    def value_slot(self, concept: str) -> int | None:
        return self._value_slot.get(concept)

    def is_value(self, concept: str) -> bool:
        return concept in self._value_slot

    def normalize(self, concept: str, v: float) -> float:
        return (v - self.mean.get(concept, 0.0)) / self.std.get(concept, 1.0)

    @classmethod
    def from_episodes(cls, episodes: Iterable[Episode], extra_boolean: Iterable[str] = (),
                      extra_value: Iterable[str] = ()) -> "ConceptVocabulary":
        """Build a vocabulary with z-score statistics from ``episodes`` only.

        Pass training-fold episodes here; evaluation and test folds are then
        normalized with the training statistics.
        """
        sums: dict[str, list[float]] = {}
        boolean: set[str] = set(extra_boolean)
        value: set[str] = set(extra_value)
        for ep in episodes:
            is_val = ~np.isnan(ep.values)
            for c, v, flag in zip(ep.concepts, ep.values, is_val):
                if flag:
                    value.add(c)
                    acc = sums.setdefault(c, [0.0, 0.0, 0])
                    acc[0] += v
                    acc[1] += v * v
                    acc[2] += 1
                else:
                    boolean.add(c)
        mean, std = {}, {}
        for c, (s, ss, n) in sums.items():
            mu = s / n
            var = max(ss / n - mu * mu, 0.0)
            mean[c] = mu
            std[c] = math.sqrt(var) if var > 1e-12 else 1.0
        return cls(sorted(boolean), sorted(value), mean, std)

    def to_dict(self) -> dict:
        return {"boolean": self.boolean, "value": self.value,
                "mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptVocabulary":
        return cls(list(d["boolean"]), list(d["value"]), dict(d["mean"]), dict(d["std"]))


# ------------------------------------------------------------------ GCS


GCS_BINS = ((15, 15), (12, 14), (9, 11), (6, 8), (3, 5))
GCS_BIN_REPRESENTATIVE = (15, 13, 10, 7, 4)


def bin_gcs_total(total: int) -> int:
    """Map a Glasgow coma scale total (3..15) onto the five severity bins."""
    if isinstance(total, float):
        if not total.is_integer():
            raise DataError(f"GCS total must be an integer, got {total}")
        total = int(total)
    if not 3 <= total <= 15:
        raise DataError(f"GCS total {total} outside 3..15")
    for k, (lo, hi) in enumerate(GCS_BINS):
        if lo <= total <= hi:
            return k
    raise AssertionError("unreachable")


# ------------------------------------------------------------------ generator spec


@dataclass
class FeatureSpec:
    name: str
    kind: str  # "continuous" | "categorical"
    rate: float
    mu: float = 0.0
    sigma: float = 1.0
    categories: list[str] = field(default_factory=list)
    probs: list[float] = field(default_factory=list)
    # patient offsets from a two-point mixture: a fraction ``subgroup_rate``
    # centred at ``subgroup_shift``; mean 0 and variance 1 are preserved
    subgroup_rate: float = 0.0
    subgroup_shift: float = 0.0

    def offset_mixture(self) -> tuple[float, float, float]:
        """(subgroup centre, bulk centre, within-component std) of the offset."""
        r, a = self.subgroup_rate, self.subgroup_shift
        if r == 0.0:
            return 0.0, 0.0, 1.0
        b = -r * a / (1.0 - r)
        return a, b, math.sqrt(1.0 - r * (1.0 - r) * (a - b) ** 2)

    def validate(self) -> None:
        if self.kind not in ("continuous", "categorical"):
            raise DataError(f"{self.name}: unknown kind {self.kind!r}")
        if not (self.rate >= 0 and math.isfinite(self.rate)):
            raise DataError(f"{self.name}: rate must be a finite non-negative number")
        if self.kind == "continuous":
            if not self.sigma > 0:
                raise DataError(f"{self.name}: sigma must be positive")
            r, a = self.subgroup_rate, self.subgroup_shift
            if not 0.0 <= r < 1.0 or (r > 0 and r * a * a / (1.0 - r) >= 1.0):
                raise DataError(f"{self.name}: subgroup mixture cannot keep unit variance")
        else:
            if len(self.categories) != len(self.probs) or not self.categories:
                raise DataError(f"{self.name}: categories and probs must align")
            if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-9:
                raise DataError(f"{self.name}: category probabilities must sum to 1")


@dataclass
class OutcomeTerm:
    """One summand of the planted rule.

    Continuous features enter as a z-scored aggregate ("last", "mean", "min",
    "max"), or with ``threshold`` set as the indicator ``z_agg >= threshold``.
    A categorical feature enters through ``aggregate="share"``: the indicator
    that at least ``threshold`` of its tokens carry ``category``.
    """

    feature: str
    aggregate: str
    coef: float
    category: str | None = None
    threshold: float | None = None


@dataclass
class GeneratorSpec:
    """Synthetic cohort parameters.

    ``patient_effect`` is the share of a continuous feature's variance that is
    a per-patient offset; token values keep the marginal ``N(mu, sigma)``.  For
    categorical features it is the probability that a token repeats the
    patient's own category instead of an independent draw, which also keeps
    the marginal category rates.
    The outcome is ``1[scale * sum(coef * term) + Logistic(0, 1) > tau]`` with
    ``tau`` chosen on a reference sample so that the positive rate equals
    ``prevalence``.
    """

    features: list[FeatureSpec]
    outcome: list[OutcomeTerm]
    prevalence: float = 0.13
    scale: float = 1.0
    patient_effect: float = 0.5
    horizon: float = HORIZON_HOURS
    reference_size: int = 20000

    def validate(self) -> None:
        if not self.features:
            raise DataError("generator spec has no features")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("duplicate feature names in generator spec")
        for f in self.features:
            f.validate()
        kinds = {f.name: f for f in self.features}
        for term in self.outcome:
            f = kinds.get(term.feature)
            if f is None:
                raise DataError(f"outcome term uses unknown feature {term.feature!r}")
            if term.aggregate == "share":
                if f.kind != "categorical" or term.category not in f.categories:
                    raise DataError(f"share term needs a category of categorical feature {f.name!r}")
                if term.threshold is None or not 0.0 < term.threshold <= 1.0:
                    raise DataError("share term needs a threshold in (0, 1]")
            elif f.kind != "continuous":
                raise DataError(f"aggregate {term.aggregate!r} needs a continuous feature")
            elif term.aggregate not in _AGGREGATES:
                raise DataError(f"unknown aggregate {term.aggregate!r}")
        if not 0.0 < self.prevalence < 1.0:
            raise DataError("prevalence must lie in (0, 1)")
        if not 0.0 <= self.patient_effect < 1.0:
            raise DataError("patient_effect must lie in [0, 1)")
        if self.horizon <= 0:
            raise DataError("horizon must be positive")

    def feature(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "features": [vars(f).copy() for f in self.features],
            "outcome": [{k: v for k, v in vars(t).items() if v is not None} for t in self.outcome],
            "prevalence": self.prevalence, "scale": self.scale,
            "patient_effect": self.patient_effect, "horizon": self.horizon,
            "reference_size": self.reference_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        spec = cls(
            features=[FeatureSpec(**f) for f in d["features"]],
            outcome=[OutcomeTerm(**t) for t in d.get("outcome", [])],
            prevalence=d.get("prevalence", 0.13), scale=d.get("scale", 1.0),
            patient_effect=d.get("patient_effect", 0.5), horizon=d.get("horizon", HORIZON_HOURS),
            reference_size=d.get("reference_size", 20000),
        )
        spec.validate()
        return spec

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: Path) -> "GeneratorSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _normalized(percentages: Sequence[float]) -> list[float]:
    total = float(sum(percentages))
    return [p / total for p in percentages]


# (name, benchmark column, rate per 48h, mu, sigma) for the continuous rows of
# the feature census; categorical rows list category codes with percentages.
TABLE1_CONTINUOUS = (
    ("heart_rate", "Heart Rate", 43.97, 86.26, 17.88),
    ("diastolic_bp", "Diastolic blood pressure", 42.88, 60.49, 14.30),
    ("systolic_bp", "Systolic blood pressure", 42.89, 120.25, 22.14),
    ("mean_bp", "Mean blood pressure", 42.71, 78.47, 15.52),
    ("fio2", "Fraction inspired oxygen", 2.95, 0.54, 0.19),
    ("o2_saturation", "Oxygen saturation", 42.43, 96.62, 3.94),
    ("respiratory_rate", "Respiratory rate", 43.28, 19.30, 6.06),
    ("glucose", "Glucose", 12.37, 143.08, 64.42),
    ("ph", "pH", 5.98, 7.36, 0.12),
    ("temperature", "Temperature", 15.62, 37.02, 0.84),
    ("height", "Height", 0.19, 168.59, 13.90),
    ("weight", "Weight", 1.48, 83.12, 24.25),
)
TABLE1_CATEGORICAL = (
    ("capillary_refill", "Capillary refill rate", 0.17, ("1", "0"), (13.43, 86.57)),
    ("gcs_eye", "Glascow coma scale eye opening", 14.83, ("4", "3", "2", "1"),
     (57.30, 19.89, 6.48, 16.34)),
    ("gcs_verbal", "Glascow coma scale verbal response", 14.76, ("5", "4", "3", "2", "1"),
     (46.77, 9.09, 0.79, 2.13, 41.22)),
    ("gcs_motor", "Glascow coma scale motor response", 14.76, ("6", "5", "4", "3", "2", "1"),
     (69.90, 13.60, 7.55, 0.77, 0.73, 7.45)),
    ("gcs_total", "Glascow coma scale total", 8.8, ("bin0", "bin1", "bin2", "bin3", "bin4"),
     (43.74, 11.88, 20.86, 14.99, 8.53)),
)

DEFAULT_OUTCOME = (
    OutcomeTerm("heart_rate", "mean", 0.72),
    OutcomeTerm("systolic_bp", "min", -0.58),
    OutcomeTerm("respiratory_rate", "mean", 0.58),
    OutcomeTerm("o2_saturation", "mean", -0.43),
    OutcomeTerm("glucose", "last", 0.29),
    # sustained tachycardia subgroup, nearly always positive
    OutcomeTerm("heart_rate", "mean", 8.0, threshold=2.0),
)
SUBGROUPS = {"heart_rate": {"subgroup_rate": 0.05, "subgroup_shift": 3.5}}
# Gives a Bayes-optimal AUC ROC of about 0.85 on the default spec
# (see tests/test_data.py).
DEFAULT_OUTCOME_SCALE = 1.0


def table1_spec(prevalence: float = 0.13, rate_factor: float = 1.0) -> GeneratorSpec:
    """Generator spec with the feature census rates and distributions.

    ``rate_factor`` scales every token rate (1.0 reproduces the census).
    """
    feats = [FeatureSpec(n, "continuous", r * rate_factor, mu, sd, **SUBGROUPS.get(n, {}))
             for n, _, r, mu, sd in TABLE1_CONTINUOUS]
    feats += [FeatureSpec(n, "categorical", r * rate_factor, categories=list(cats),
                          probs=_normalized(pcts))
              for n, _, r, cats, pcts in TABLE1_CATEGORICAL]
    spec = GeneratorSpec(feats, [OutcomeTerm(**vars(t)) for t in DEFAULT_OUTCOME],
                         prevalence=prevalence, scale=DEFAULT_OUTCOME_SCALE)
    spec.validate()
    return spec


def default_mapping() -> dict:
    """Column mapping for benchmark-style episode CSVs."""
    mapping = {col: {"concept": name, "kind": "continuous"} for name, col, *_ in TABLE1_CONTINUOUS}
    for name, col, *_ in TABLE1_CATEGORICAL:
        entry = {"concept": name, "kind": "categorical"}
        if name == "gcs_total":
            entry["binning"] = "gcs_total"
        mapping[col] = entry
    return mapping


# ------------------------------------------------------------------ generation


def _aggregate(values: np.ndarray, how: str, default: float) -> float:
    if values.size == 0:
        return default
    return float(_AGGREGATES[how](values))


_AGGREGATES = {
    "last": lambda v: v[-1],
    "mean": np.mean,
    "min": np.min,
    "max": np.max,
}


def _draw_patient(spec: GeneratorSpec, rng: np.random.Generator, features: Sequence[FeatureSpec]):
    """Token columns for one patient, in feature order, before time sorting."""
    times, concepts, values = [], [], []
    per_feature = {}
    share = spec.patient_effect
    for f in features:
        n = int(rng.poisson(f.rate)) if f.rate > 0 else 0
        t = rng.uniform(0.0, spec.horizon, size=n)
        if f.kind == "continuous":
            offset = rng.standard_normal()
            if f.subgroup_rate > 0:
                a, b, sd = f.offset_mixture()
                offset = (a if rng.random() < f.subgroup_rate else b) + sd * offset
            offset *= math.sqrt(share)
            v = f.mu + f.sigma * (offset + math.sqrt(1.0 - share) * rng.standard_normal(n))
            per_feature[f.name] = (t, v)
            concepts.append(np.full(n, f.name, dtype=object))
            values.append(v)
        else:
            own = rng.choice(len(f.categories), p=f.probs)
            idx = rng.choice(len(f.categories), size=n, p=f.probs)
            idx = np.where(rng.random(n) < share, own, idx)
            per_feature[f.name] = (t, np.array(f.categories, dtype=object)[idx])
            concepts.append(np.array([f"{f.name}={f.categories[i]}" for i in idx], dtype=object))
            values.append(np.full(n, np.nan))
        times.append(t)
    return times, concepts, values, per_feature


def _share(per_feature: dict, term: OutcomeTerm) -> float:
    _, cats = per_feature.get(term.feature, (None, np.empty(0)))
    return float(np.mean(cats == term.category)) if cats.size else 0.0


def _outcome_score(spec: GeneratorSpec, per_feature: dict, ref: dict[str, tuple[float, float]]) -> float:
    s = 0.0
    for term in spec.outcome:
        if term.aggregate == "share":
            s += term.coef * float(_share(per_feature, term) >= term.threshold)
            continue
        t, v = per_feature.get(term.feature, (np.empty(0), np.empty(0)))
        if term.aggregate == "last" and v.size:
            v = v[np.argsort(t, kind="stable")]
        f = spec.feature(term.feature)
        agg = _aggregate(v, term.aggregate, f.mu)
        mu, sd = ref[f"{term.feature}:{term.aggregate}"]
        z = (agg - mu) / sd
        s += term.coef * (z if term.threshold is None else float(z >= term.threshold))
    return s


def _reference(spec: GeneratorSpec, seed: int):
    """Aggregate z-score constants and the outcome threshold, from a reference sample."""
    rng = child_rng(seed, "generator-reference")
    feats = [spec.feature(n) for n in dict.fromkeys(t.feature for t in spec.outcome)]
    rows = []
    for _ in range(spec.reference_size):
        _, _, _, per = _draw_patient(spec, rng, feats)
        rows.append(per)
    ref = {}
    for term in spec.outcome:
        key = f"{term.feature}:{term.aggregate}"
        if key in ref or term.aggregate == "share":
            continue
        f = spec.feature(term.feature)
        aggs = []
        for per in rows:
            t, v = per[term.feature]
            if term.aggregate == "last" and v.size:
                v = v[np.argsort(t, kind="stable")]
            aggs.append(_aggregate(v, term.aggregate, f.mu))
        aggs = np.asarray(aggs)
        sd = float(aggs.std())
        ref[key] = (float(aggs.mean()), sd if sd > 1e-12 else 1.0)
    scores = np.array([_outcome_score(spec, per, ref) for per in rows])
    latent = spec.scale * scores + rng.logistic(size=scores.size)
    tau = float(np.quantile(latent, 1.0 - spec.prevalence))
    return ref, tau


def generate_synthetic(spec: GeneratorSpec, n_patients: int, seed: int,
                       return_scores: bool = False):
    """Draw ``n_patients`` episodes; deterministic in ``(spec, seed)``.

    With ``return_scores`` also returns the planted risk ``P(y=1 | episode)``
    for each patient, from which the Bayes-optimal AUC can be computed.
    """
    spec.validate()
    if n_patients < 1:
        raise DataError("n_patients must be >= 1")
    ref, tau = _reference(spec, seed) if spec.outcome else ({}, 0.0)
    episodes, risks = [], []
    width = len(str(n_patients - 1))
    for i in range(n_patients):
        rng = child_rng(seed, "patient", i)
        while True:
            times, concepts, values, per = _draw_patient(spec, rng, spec.features)
            if sum(len(t) for t in times):
                break
        s = _outcome_score(spec, per, ref) if spec.outcome else 0.0
        latent = spec.scale * s + rng.logistic()
        if spec.outcome:
            label = int(latent > tau)
            risk = 1.0 / (1.0 + math.exp(-(spec.scale * s - tau)))
        else:
            label = int(rng.random() < spec.prevalence)
            risk = spec.prevalence
        episodes.append(Episode(f"p{i:0{width}d}", np.concatenate(times),
                                np.concatenate(concepts), np.concatenate(values), label))
        risks.append(risk)
    if return_scores:
        return episodes, np.asarray(risks)
    return episodes


# ------------------------------------------------------------------ CSV exchange


def _category_from_cell(cell: str, entry: dict) -> str:
    try:
        x = float(cell)
    except ValueError:
        if entry.get("binning") == "gcs_total":
            raise DataError(f"unparseable GCS total {cell!r}") from None
        return cell.strip()
    if entry.get("binning") == "gcs_total":
        return f"bin{bin_gcs_total(x)}"
    if not math.isfinite(x):
        raise DataError(f"non-finite category code {cell!r}")
    return str(int(x)) if x.is_integer() else repr(x)


def _cell_for_category(category: str, entry: dict) -> str:
    if entry.get("binning") == "gcs_total":
        return str(GCS_BIN_REPRESENTATIVE[int(category[3:])])
    return category


def export_episodes(episodes: Sequence[Episode], directory: Path, mapping: dict | None = None) -> None:
    """Write episodes in the benchmark CSV layout plus ``listfile.csv``.

    Tokens with the same timestamp share a row unless they collide on a
    column, in which case a further row with the same hour is emitted.
    """
    mapping = mapping or default_mapping()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    columns = list(mapping)
    by_concept = {e["concept"]: col for col, e in mapping.items()}
    with open(directory / LABEL_INDEX, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stay", "y_true"])
        for ep in episodes:
            w.writerow([f"{ep.patient_id}.csv", ep.label])
    for ep in episodes:
        rows: list[tuple[float, dict]] = []
        for tok in ep.tokens:
            if tok.is_value:
                col, cell = by_concept[tok.concept], repr(float(tok.v))
            else:
                feat, _, cat = tok.concept.partition("=")
                col = by_concept[feat]
                cell = _cell_for_category(cat, mapping[col])
            if rows and rows[-1][0] == tok.t and col not in rows[-1][1]:
                rows[-1][1][col] = cell
            else:
                rows.append((tok.t, {col: cell}))
        with open(directory / f"{ep.patient_id}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["Hours"] + columns)
            for t, cells in rows:
                w.writerow([repr(float(t))] + [cells.get(c, "") for c in columns])


def ingest_episodes(path: Path, mapping: dict | None = None, horizon: float = HORIZON_HOURS) -> list[Episode]:
    """Read benchmark-style episode CSVs from ``path``.

    Every non-empty cell becomes one token.  Rows outside ``[0, horizon]``
    hours are dropped.  Episodes are returned in file-name order.
    """
    mapping = mapping or default_mapping()
    path = Path(path)
    index_path = path / LABEL_INDEX
    if not index_path.exists():
        raise DataError(f"label index {index_path} not found")
    labels = {}
    with open(index_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"stay", "y_true"} <= set(reader.fieldnames):
            raise DataError(f"{index_path}: header must contain stay,y_true")
        for row in reader:
            try:
                labels[row["stay"]] = int(float(row["y_true"]))
            except ValueError:
                raise DataError(f"{index_path}: bad label {row['y_true']!r}") from None
    episodes = []
    for fpath in sorted(p for p in path.glob("*.csv") if p.name != LABEL_INDEX):
        if fpath.name not in labels:
            raise DataError(f"no label entry for {fpath.name} in {LABEL_INDEX}")
        episodes.append(_read_episode(fpath, labels[fpath.name], mapping, horizon))
    return episodes


def _read_episode(fpath: Path, label: int, mapping: dict, horizon: float) -> Episode:
    with open(fpath, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "Hours":
            raise DataError(f"{fpath.name}: first column must be 'Hours'")
        cols = header[1:]
        unknown = [c for c in cols if c not in mapping]
        if unknown:
            raise DataError(f"{fpath.name}: no mapping for column(s) {unknown}")
        times, concepts, values = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t = float(row[0])
            except ValueError:
                raise DataError(f"{fpath.name}:{lineno}: unparseable hour {row[0]!r}") from None
            if not 0.0 <= t <= horizon:
                continue
            for col, cell in zip(cols, row[1:]):
                if cell == "":
                    continue
                entry = mapping[col]
                if entry["kind"] == "continuous":
                    try:
                        v = float(cell)
                    except ValueError:
                        raise DataError(f"{fpath.name}:{lineno}: unparseable value {cell!r} "
                                        f"in {col!r}") from None
                    if not math.isfinite(v):
                        raise DataError(f"{fpath.name}:{lineno}: non-finite value in {col!r}")
                    concepts.append(entry["concept"])
                    values.append(v)
                else:
                    concepts.append(f"{entry['concept']}={_category_from_cell(cell, entry)}")
                    values.append(np.nan)
                times.append(t)
    return Episode(fpath.stem, times, concepts, values, label)


# ------------------------------------------------------------------ splits


@dataclass
class SplitPlan:
    """Four folds; run ``r`` pairs folds ``r % 4`` and ``(r + 1) % 4``.

    For ``r < 4`` the first of the pair is the evaluation fold and the second
    the test fold; runs 4..7 swap the two.  The remaining folds train.
    """

    folds: list[list[str]]

    def run(self, r: int) -> tuple[list[str], list[str], list[str]]:
        if not 0 <= r < N_RUNS:
            raise DataError(f"run index {r} outside 0..{N_RUNS - 1}")
        s, swap = r % N_FOLDS, r // N_FOLDS
        a, b = s, (s + 1) % N_FOLDS
        eval_f, test_f = (b, a) if swap else (a, b)
        train = [i for k in range(N_FOLDS) if k not in (a, b) for i in self.folds[k]]
        return train, list(self.folds[eval_f]), list(self.folds[test_f])

    def runs(self):
        for r in range(N_RUNS):
            yield (r, *self.run(r))

    def to_dict(self) -> dict:
        return {"folds": self.folds}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls([list(f) for f in d["folds"]])


def make_splits(ids: Sequence[str], seed: int) -> SplitPlan:
    ids = list(ids)
    if len(ids) < N_RUNS:
        raise DataError(f"need at least {N_RUNS} episodes for cross-validation, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise DataError("episode ids must be unique")
    perm = child_rng(seed, "splits").permutation(len(ids))
    folds = [[ids[i] for i in chunk] for chunk in np.array_split(perm, N_FOLDS)]
    return SplitPlan(folds)
