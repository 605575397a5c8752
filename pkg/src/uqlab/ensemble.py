"""Random architecture search, top-g member selection and ensemble inference."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import atomic_write_text, dump_json
from .embedding import EncodedEpisode, make_batch
from .rng import child_rng
from .transformer import ModelConfig, TrainSettings, TrainingDivergence, TransformerClassifier, train


@dataclass
class SearchGrid:
    d_model: Sequence[int] = (32, 64, 128)
    heads: Sequence[int] = (2, 4)
    layers: Sequence[int] = (1, 2, 3)
    n_models: int = 12

    def __post_init__(self):
        if self.n_models < 1:
            raise ValueError("need at least one model to search")
        if not (self.d_model and self.heads and self.layers):
            raise ValueError("every grid axis needs at least one value")

    def sample(self, seed: int) -> list[dict]:
        """``n_models`` grid points drawn uniformly with replacement."""
        rng = child_rng(seed, "search-grid")
        out = []
        for _ in range(self.n_models):
            out.append({"d_model": int(rng.choice(self.d_model)),
                        "heads": int(rng.choice(self.heads)),
                        "layers": int(rng.choice(self.layers))})
        return out


def config_hash(cfg: ModelConfig | dict) -> str:
    d = cfg.to_dict() if isinstance(cfg, ModelConfig) else cfg
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MemberResult:
    member_id: int
    config: dict
    seed: int
    eval_aucs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    n_parameters: int = 0
    status: str = "ok"
    error: str | None = None

    @property
    def mean_eval_auc(self) -> float | None:
        vals = [a for a in self.eval_aucs if a is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_eval_auc"] = self.mean_eval_auc
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MemberResult":
        d = {k: v for k, v in d.items() if k != "mean_eval_auc"}
        return cls(**d)


@dataclass
class RunData:
    """Encoded train and eval folds of one cross-validation run."""

    run: int
    vocab: object
    train_items: list
    eval_items: list


def _train_member(args) -> MemberResult:
    member_id, cfg_dict, seed, runs, settings, out_dir = args
    cfg = ModelConfig(**cfg_dict)
    res = MemberResult(member_id, cfg.to_dict(), seed)
    for rd in runs:
        model = TransformerClassifier(cfg, rd.vocab, child_rng(seed, "init", rd.run, member_id))
        res.n_parameters = model.n_parameters()
        ckpt = Path(out_dir) / f"member{member_id:03d}" / f"run{rd.run}"
        ckpt.mkdir(parents=True, exist_ok=True)
        try:
            tr = train(model, rd.train_items, rd.eval_items, settings,
                       child_rng(seed, "train", rd.run, member_id), log_path=ckpt / "train_log.jsonl")
        except TrainingDivergence as exc:
            res.status, res.error = "failed", str(exc)
            return res
        model.save(ckpt, {"member_id": member_id, "run": rd.run})
        res.eval_aucs.append(tr.best_eval_auc)
        res.checkpoints.append(str(ckpt))
    return res


def run_search(grid: SearchGrid, runs: Sequence[RunData], base: ModelConfig, settings: TrainSettings,
               seed: int, out_dir: Path, workers: int = 1) -> list[MemberResult]:
    """Train each sampled configuration on every run's train fold.

    Members failing with a numerical divergence are kept in the manifest with
    ``status="failed"`` and excluded from selection.  Results are ordered by
    member id whatever the worker count.
    """
    points = grid.sample(seed)
    tasks = []
    for i, pt in enumerate(points):
        cfg = ModelConfig(**{**base.to_dict(), **pt})
        tasks.append((i, cfg.to_dict(), seed, list(runs), settings, str(out_dir)))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_member, tasks))
    else:
        results = [_train_member(t) for t in tasks]
    results.sort(key=lambda r: r.member_id)
    write_manifest(results, Path(out_dir) / "search_manifest.json")
    return results


def write_manifest(results: Sequence[MemberResult], path: Path) -> None:
    atomic_write_text(path, dump_json({"members": [r.to_dict() for r in results]}))


def read_manifest(path: Path) -> list[MemberResult]:
    data = json.loads(Path(path).read_text())
    return [MemberResult.from_dict(d) for d in data["members"]]


@dataclass
class EnsembleModel:
    members: list

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")

    @property
    def size(self) -> int:
        return len(self.members)

    def checkpoints(self, run: int) -> list[Path]:
        out = []
        for m in self.members:
            hits = [c for c in m.checkpoints if Path(c).name == f"run{run}"]
            if not hits:
                raise FileNotFoundError(f"member {m.member_id} has no checkpoint for run {run}")
            out.append(Path(hits[0]))
        return out


def _rank_key(r: MemberResult):
    return (-(r.mean_eval_auc if r.mean_eval_auc is not None else -np.inf),
            r.n_parameters, config_hash(r.config), r.member_id)


def select_top(results: Sequence[MemberResult], g: int) -> EnsembleModel:
    """Best ``g`` members by mean eval AUC ROC.

    Ties go to the smaller parameter count, then the configuration hash, so
    the choice does not depend on the order of ``results``.
    """
    ok = [r for r in results if r.status == "ok" and r.mean_eval_auc is not None]
    if g < 1:
        raise ValueError("g must be at least 1")
    if g > len(ok):
        raise ValueError(f"requested {g} members but only {len(ok)} succeeded")
    return EnsembleModel(sorted(ok, key=_rank_key)[:g])


def predict_ensemble(ens: EnsembleModel, run: int, items: Sequence[EncodedEpisode],
                     loader: Callable | None = None) -> np.ndarray:
    """Member logits for ``items``, shape ``(len(items), g, 2)`` in member order."""
    loader = loader or (lambda p: TransformerClassifier.load(p)[0])
    out = []
    for path in ens.checkpoints(run):
        if not Path(path).exists():
            raise FileNotFoundError(f"missing member checkpoint {path}")
        out.append(loader(path).predict_logits(items))
    return np.stack(out, axis=1)


def predict_models(models: Sequence[TransformerClassifier], items: Sequence[EncodedEpisode]) -> np.ndarray:
    """Same as :func:`predict_ensemble` for already-loaded models."""
    if not models:
        raise ValueError("no models")
    return np.stack([m.predict_logits(items) for m in models], axis=1)


__all__ = ["SearchGrid", "MemberResult", "RunData", "EnsembleModel", "run_search", "select_top",
           "predict_ensemble", "predict_models", "config_hash", "read_manifest", "write_manifest",
           "make_batch"]
