"""Pipeline stages: generate-data, train, search, calibrate, evaluate, report.

Every stage reads the resolved run configuration, takes its inputs from the
output directory, and writes its artifacts plus a ``manifest.json`` listing
them.  Files are written atomically.  Layout under ``output_dir``::

    data/        episodes.npz, splits.json, generator_spec.json
    models/      run{r}/ checkpoints (single model) or ensemble.json
    search/      member{i}/run{r}/ checkpoints and search_manifest.json
    calibration/ run{r}.json and reliability CSVs
    evaluation/  run{r}/records.csv, cutoff.csv, run.json
    report/      summary.json, cutoff_mean.csv, table.csv
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bayes import predict_sampled
from .calibration import (Binning, CalibrationSettings, MatrixCalibrator, ece, fit_calibrator,
                          reliability_table)
from .checkpoint import atomic_write_bytes, atomic_write_text, dump_json
from .config import quantile_grid
from .data import (N_RUNS, ConceptVocabulary, Episode, GeneratorSpec, SplitPlan, generate_synthetic,
                   ingest_episodes, make_splits, table1_spec)
from .embedding import encode_episode, make_batch
from .ensemble import (EnsembleModel, MemberResult, RunData, SearchGrid, predict_ensemble, read_manifest,
                       run_search, select_top)
from .metrics import PAPER_REFERENCE, MetricError, RunResult, auc_pr, auc_roc, mean_curve, summarize_runs
from .rng import child_rng, child_seed
from .transformer import ModelConfig, TrainingDivergence, TrainSettings, TransformerClassifier, train
from .uncertainty import MEASURES, build_records, cutoff_curve, records_to_arrays, write_records
from .zigzag import ZigzagSpec, collapse_demo

STAGES = ("generate-data", "train", "search", "calibrate", "evaluate", "report")
MODEL_LABEL = {"deterministic": "deterministic", "bayesian": "BT", "ensemble": "TE"}


class MissingArtifact(FileNotFoundError):
    """A stage's input is absent; the message names it and the stage producing it."""


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run `uqlab {producer}` with the same --out first")
    return path


def config_digest(cfg: dict) -> str:
    # the output location does not influence any artifact
    body = {k: v for k, v in cfg.items() if k not in ("output_dir", "workers")}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _write_manifest(directory: Path, stage: str, cfg: dict, outputs: Sequence[Path]) -> None:
    rel = sorted(str(Path(p).relative_to(directory)) for p in outputs)
    atomic_write_text(directory / "manifest.json",
                      dump_json({"stage": stage, "config_digest": config_digest(cfg), "outputs": rel}))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])
    atomic_write_text(path, buf.getvalue())


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, spread over processes when ``workers > 1``."""
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _out(cfg: dict) -> Path:
    return Path(cfg["output_dir"])


# ------------------------------------------------------------------ data


def save_episodes(episodes: Sequence[Episode], path: Path) -> None:
    lengths = np.array([len(e) for e in episodes], dtype=np.int64)
    buf = io.BytesIO()
    np.savez(buf,
             ids=np.array([e.patient_id for e in episodes], dtype=str),
             labels=np.array([e.label for e in episodes], dtype=np.int64),
             lengths=lengths,
             times=np.concatenate([e.times for e in episodes]),
             concepts=np.concatenate([e.concepts for e in episodes]).astype(str),
             values=np.concatenate([e.values for e in episodes]))
    atomic_write_bytes(path, buf.getvalue())


def load_episodes(path: Path) -> list[Episode]:
    with np.load(path, allow_pickle=False) as z:
        ids, labels, lengths = z["ids"], z["labels"], z["lengths"]
        times, concepts, values = z["times"], z["concepts"], z["values"]
    bounds = np.r_[0, np.cumsum(lengths)]
    return [Episode(str(ids[i]), times[a:b], concepts[a:b], values[a:b], int(labels[i]))
            for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))]


def _generator_spec(cfg: dict) -> GeneratorSpec:
    d = cfg["data"]
    g = d.get("generator_spec")
    if g is None:
        return table1_spec(d["prevalence"], d["rate_factor"])
    if isinstance(g, str):
        return GeneratorSpec.load(Path(g))
    return GeneratorSpec.from_dict(g)


def generate_data(cfg: dict) -> Path:
    out = _out(cfg) / "data"
    out.mkdir(parents=True, exist_ok=True)
    d = cfg["data"]
    written = []
    if d["source"] == "synthetic":
        spec = _generator_spec(cfg)
        episodes = generate_synthetic(spec, d["n_patients"], cfg["seed"])
        atomic_write_text(out / "generator_spec.json", dump_json(spec.to_dict()))
        written.append(out / "generator_spec.json")
    else:
        episodes = ingest_episodes(_require(Path(d["ingest_path"]), "generate-data"))
    save_episodes(episodes, out / "episodes.npz")
    plan = make_splits([e.patient_id for e in episodes], cfg["seed"])
    atomic_write_text(out / "splits.json", dump_json(plan.to_dict()))
    atomic_write_text(_out(cfg) / "run_config.json", dump_json(cfg))
    written += [out / "episodes.npz", out / "splits.json"]
    _write_manifest(out, "generate-data", cfg, written)
    return out


def _load_data(cfg: dict) -> tuple[dict[str, Episode], SplitPlan]:
    d = _out(cfg) / "data"
    eps = load_episodes(_require(d / "episodes.npz", "generate-data"))
    plan = SplitPlan.from_dict(json.loads(_require(d / "splits.json", "generate-data").read_text()))
    return {e.patient_id: e for e in eps}, plan


def _concept_names(byid: dict) -> tuple[list[str], list[str]]:
    boolean, value = set(), set()
    for ep in byid.values():
        is_val = ~np.isnan(ep.values)
        value.update(ep.concepts[is_val].tolist())
        boolean.update(ep.concepts[~is_val].tolist())
    return sorted(boolean), sorted(value)


def run_data(cfg: dict, r: int, byid=None, plan=None) -> tuple[RunData, list]:
    """Encoded train/eval folds of run ``r`` plus the encoded test fold."""
    if byid is None:
        byid, plan = _load_data(cfg)
    tr, ev, te = plan.run(r)
    # concept names (not statistics) of the whole cohort, so rare categories
    # absent from a training fold still get an embedding row
    boolean, value = _concept_names(byid)
    vocab = ConceptVocabulary.from_episodes([byid[i] for i in tr], boolean, value)
    enc = lambda ids: [encode_episode(byid[i], vocab, cfg["model"]["max_len"]) for i in ids]
    return RunData(r, vocab, enc(tr), enc(ev)), enc(te)


# ------------------------------------------------------------------ training


def model_config(cfg: dict, **override) -> ModelConfig:
    m = dict(cfg["model"])
    kind = m.pop("kind")
    m["head_kind"] = "deterministic" if kind == "deterministic" else "bayesian"
    if kind == "ensemble":
        m["head_kind"] = "deterministic"
    m.update(override)
    return ModelConfig(**m)


def train_settings(cfg: dict) -> TrainSettings:
    return TrainSettings(**cfg["training"])


def _train_run(args) -> dict:
    cfg, r = args
    rd, _ = run_data(cfg, r)
    model = TransformerClassifier(model_config(cfg), rd.vocab, child_rng(cfg["seed"], "init", r, 0))
    ckpt = _out(cfg) / "models" / f"run{r}"
    ckpt.mkdir(parents=True, exist_ok=True)
    res = train(model, rd.train_items, rd.eval_items, train_settings(cfg),
                child_rng(cfg["seed"], "train", r, 0), log_path=ckpt / "train_log.jsonl")
    model.save(ckpt, {"run": r, "best_epoch": res.best_epoch, "best_eval_auc": res.best_eval_auc})
    return {"run": r, "best_epoch": res.best_epoch, "best_eval_auc": res.best_eval_auc,
            "checkpoint": f"run{r}"}


def train_stage(cfg: dict) -> Path:
    if cfg["model"]["kind"] == "ensemble":
        return search_stage(cfg)
    _require(_out(cfg) / "data" / "episodes.npz", "generate-data")
    out = _out(cfg) / "models"
    out.mkdir(parents=True, exist_ok=True)
    runs = parallel_map(_train_run, [(cfg, r) for r in range(N_RUNS)], cfg["workers"])
    atomic_write_text(out / "runs.json", dump_json({"kind": cfg["model"]["kind"], "runs": runs}))
    _write_manifest(out, "train", cfg, [out / "runs.json"] + [out / f"run{r}" for r in range(N_RUNS)])
    return out


def search_stage(cfg: dict) -> Path:
    byid, plan = _load_data(cfg)
    s = cfg["search"]
    grid = SearchGrid(tuple(s["d_model"]), tuple(s["heads"]), tuple(s["layers"]), s["n_models"])
    runs = [run_data(cfg, r, byid, plan)[0] for r in range(N_RUNS)]
    search_dir = _out(cfg) / "search"
    search_dir.mkdir(parents=True, exist_ok=True)
    results = run_search(grid, runs, model_config(cfg), train_settings(cfg), cfg["seed"],
                         search_dir, workers=cfg["workers"])
    # relative checkpoint paths keep the manifest independent of --out
    for res in results:
        res.checkpoints = [str(Path(c).relative_to(search_dir)) for c in res.checkpoints]
    from .ensemble import write_manifest
    write_manifest(results, search_dir / "search_manifest.json")
    try:
        ens = select_top(results, s["g"])
    except ValueError as exc:
        failed = [r.member_id for r in results if r.status != "ok"]
        raise TrainingDivergence(f"{exc}; diverged members: {failed}") from None
    out = _out(cfg) / "models"
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "ensemble.json", dump_json({
        "kind": "ensemble", "g": s["g"], "members": [m.member_id for m in ens.members],
        "mean_eval_auc": [m.mean_eval_auc for m in ens.members]}))
    _write_manifest(out, "search", cfg, [out / "ensemble.json"])
    return out


def _load_ensemble(cfg: dict) -> EnsembleModel:
    search_dir = _out(cfg) / "search"
    results = read_manifest(_require(search_dir / "search_manifest.json", "search"))
    chosen = json.loads(_require(_out(cfg) / "models" / "ensemble.json", "search").read_text())["members"]
    byid = {m.member_id: m for m in results}
    members = []
    for i in chosen:
        m = byid[i]
        members.append(MemberResult(m.member_id, m.config, m.seed, m.eval_aucs,
                                    [str(search_dir / c) for c in m.checkpoints], m.n_parameters))
    return EnsembleModel(members)


def _single_model(cfg: dict, r: int) -> TransformerClassifier:
    ckpt = _out(cfg) / "models" / f"run{r}"
    _require(ckpt / "manifest.json", "train")
    return TransformerClassifier.load(ckpt)[0]


# ------------------------------------------------------------------ inference


def _encode_fold(cfg: dict, vocab: ConceptVocabulary, ids, byid) -> list:
    return [encode_episode(byid[i], vocab, cfg["model"]["max_len"]) for i in ids]


def logit_samples(cfg: dict, r: int, which: str, byid, plan) -> tuple[list, np.ndarray]:
    """Logit samples ``(n, N, 2)`` for the eval or test fold of run ``r``.

    Deterministic models give ``N = 1``, radial heads ``N = n_samples``
    posterior draws, ensembles one sample per member.
    """
    _, ev, te = plan.run(r)
    ids = ev if which == "eval" else te
    kind = cfg["model"]["kind"]
    if kind == "ensemble":
        ens = _load_ensemble(cfg)
        paths = ens.checkpoints(r)
        for p in paths:
            _require(p / "manifest.json", "search")
        first = TransformerClassifier.load(paths[0])[0]
        items = _encode_fold(cfg, first.vocab, ids, byid)
        return items, predict_ensemble(ens, r, items)
    model = _single_model(cfg, r)
    items = _encode_fold(cfg, model.vocab, ids, byid)
    if kind == "deterministic":
        return items, model.predict_logits(items)[:, None, :]
    n = cfg["uncertainty"]["n_samples"]
    seed = child_seed(cfg["seed"], "sample", r)
    chunks = [predict_sampled(model, make_batch(items[i:i + 128]), n, seed)
              for i in range(0, len(items), 128)]
    return items, np.concatenate(chunks, axis=0)


# ------------------------------------------------------------------ calibration


def _calibration_logits(samples: np.ndarray) -> np.ndarray:
    return samples.reshape(-1, samples.shape[-1])


def _probs(samples: np.ndarray) -> np.ndarray:
    z = samples - samples.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).mean(axis=1)


def calibrate_stage(cfg: dict) -> Path:
    """Fit a matrix calibrator per run on eval-fold logits; report test-fold ECE.

    Every logit sample is paired with its episode's label, so the same affine
    map later applies to each posterior draw or ensemble member.
    """
    byid, plan = _load_data(cfg)
    c = cfg["calibration"]
    settings = CalibrationSettings(c["lambda_ce"], c["lr"], c["steps"], c["n_interior"], c["eps"],
                                   c["n_binnings"])
    binning = Binning.uniform(c["metric_bins"])
    out = _out(cfg) / "calibration"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for r in range(N_RUNS):
        ev_items, ev_s = logit_samples(cfg, r, "eval", byid, plan)
        te_items, te_s = logit_samples(cfg, r, "test", byid, plan)
        ev_y = np.array([it.label for it in ev_items])
        te_y = np.array([it.label for it in te_items])
        fit_logits = _calibration_logits(ev_s)
        fit_labels = np.repeat(ev_y, ev_s.shape[1])
        cal = fit_calibrator(fit_logits, fit_labels, settings, seed=child_seed(cfg["seed"], "calibrate", r))
        before = _probs(te_s)
        after = _probs(cal.apply(te_s))
        rec = {"run": r, "calibrator": cal.to_dict(),
               "test_ece_before": ece(before, te_y, binning), "test_ece_after": ece(after, te_y, binning)}
        atomic_write_text(out / f"run{r}.json", dump_json(rec))
        for tag, p in (("before", before), ("after", after)):
            rows = reliability_table(p, te_y, binning)
            path = out / f"run{r}_reliability_{tag}.csv"
            _write_csv(path, ["bin_lo", "bin_hi", "conf", "acc", "count"],
                       [[row[k] for k in ("bin_lo", "bin_hi", "conf", "acc", "count")] for row in rows])
            written.append(path)
        written.append(out / f"run{r}.json")
    _write_manifest(out, "calibrate", cfg, written)
    return out


# ------------------------------------------------------------------ evaluation


def _evaluate_run(args) -> dict:
    cfg, r = args
    byid, plan = _load_data(cfg)
    items, samples = logit_samples(cfg, r, "test", byid, plan)
    if cfg["calibration"]["enabled"]:
        path = _require(_out(cfg) / "calibration" / f"run{r}.json", "calibrate")
        cal = MatrixCalibrator.from_dict(json.loads(path.read_text())["calibrator"])
        samples = cal.apply(samples)
    labels = [it.label for it in items]
    records = build_records([it.patient_id for it in items], labels, samples,
                            n_bins=cfg["uncertainty"]["remap_bins"],
                            scheme=cfg["uncertainty"]["remap_binning"])
    out = _out(cfg) / "evaluation" / f"run{r}"
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / "records.csv.tmp"
    write_records(records, tmp)
    tmp.replace(out / "records.csv")
    qs = quantile_grid(cfg)
    probs = np.array([rec.prob for rec in records])
    y = np.array(labels)
    # measures undefined for a single sample (N=1) are kept as nulls
    cutoff = {}
    for m in MEASURES:
        _, _, vals = records_to_arrays(records, m)
        cutoff[m] = None if vals is None else cutoff_curve(probs, y, vals, qs)
    _write_csv(out / "cutoff.csv", ["measure", "quantile", "auc_roc"],
               [[m, q, a] for m, c in cutoff.items() if c for q, a in c])
    try:
        roc, pr = auc_roc(probs, y), auc_pr(probs, y)
    except MetricError as exc:
        raise MetricError(f"run {r}: test fold metrics undefined ({exc})") from None
    result = {"run": r, "auc_roc": roc, "auc_pr": pr, "n": len(records), "n_samples": int(samples.shape[1]),
              "cutoff": {m: c and [[q, a] for q, a in c] for m, c in cutoff.items()}}
    atomic_write_text(out / "run.json", dump_json(result))
    return {"run": r, "auc_roc": roc}


def evaluate_stage(cfg: dict) -> Path:
    _require(_out(cfg) / "data" / "episodes.npz", "generate-data")
    if cfg["model"]["kind"] == "ensemble":
        _require(_out(cfg) / "models" / "ensemble.json", "search")
    else:
        _require(_out(cfg) / "models" / "run0" / "manifest.json", "train")
    parallel_map(_evaluate_run, [(cfg, r) for r in range(N_RUNS)], cfg["workers"])
    out = _out(cfg) / "evaluation"
    files = [out / f"run{r}" / n for r in range(N_RUNS) for n in ("records.csv", "cutoff.csv", "run.json")]
    _write_manifest(out, "evaluate", cfg, files)
    return out


# ------------------------------------------------------------------ report


def load_run_results(cfg: dict) -> list[RunResult]:
    results = []
    for r in range(N_RUNS):
        path = _require(_out(cfg) / "evaluation" / f"run{r}" / "run.json", "evaluate")
        d = json.loads(path.read_text())
        results.append(RunResult(d["run"], d["auc_roc"], d["auc_pr"],
                                 {m: c and [(q, a) for q, a in c] for m, c in d["cutoff"].items()}))
    return results


def report_stage(cfg: dict) -> Path:
    """Aggregate the 8 runs; outputs depend only on the evaluation artifacts."""
    results = load_run_results(cfg)
    kind = cfg["model"]["kind"]
    label = MODEL_LABEL[kind]
    summary = summarize_runs(results, label, N_RUNS, q=cfg["uncertainty"]["report_quantile"])
    summary["config_digest"] = config_digest(cfg)
    summary["reference"] = PAPER_REFERENCE.get(label)
    cal_dir = _out(cfg) / "calibration"
    if all((cal_dir / f"run{r}.json").exists() for r in range(N_RUNS)):
        recs = [json.loads((cal_dir / f"run{r}.json").read_text()) for r in range(N_RUNS)]
        summary["calibration"] = {"applied": bool(cfg["calibration"]["enabled"]),
                                  "test_ece_before": [c["test_ece_before"] for c in recs],
                                  "test_ece_after": [c["test_ece_after"] for c in recs]}
    out = _out(cfg) / "report"
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "summary.json", dump_json(summary))
    measures = sorted(summary["delta_auc_roc"])
    _write_csv(out / "cutoff_mean.csv", ["measure", "quantile", "auc_roc"],
               [[m, q, a] for m in measures for q, a in mean_curve(results, m)])
    rows = [[label, "auc_roc", summary["auc_roc"]["mean"], summary["auc_roc"]["std"]],
            [label, "auc_pr", summary["auc_pr"]["mean"], summary["auc_pr"]["std"]]]
    rows += [[label, f"delta_{m}", summary["delta_auc_roc"][m]["mean"], summary["delta_auc_roc"][m]["std"]]
             for m in measures]
    _write_csv(out / "table.csv", ["model", "metric", "mean", "std"], rows)
    _write_manifest(out, "report", cfg, [out / "summary.json", out / "cutoff_mean.csv", out / "table.csv"])
    return out


# ------------------------------------------------------------------ zigzag


def zigzag_spec(cfg: dict) -> ZigzagSpec:
    return ZigzagSpec(**cfg["zigzag"])


def collapse_stage(cfg: dict) -> Path:
    res = collapse_demo(zigzag_spec(cfg), cfg["seed"])
    out = _out(cfg) / "zigzag"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "profile.csv", ["x", "mean", "std"],
               [[float(x), float(m), float(s)] for x, m, s in zip(res.grid, res.mean, res.std)])
    atomic_write_text(out / "summary.json", dump_json({**res.summary(), "spec": zigzag_spec(cfg).to_dict()}))
    _write_manifest(out, "collapse-demo", cfg, [out / "profile.csv", out / "summary.json"])
    return out


STAGE_FUNCS = {"generate-data": generate_data, "train": train_stage, "search": search_stage,
               "calibrate": calibrate_stage, "evaluate": evaluate_stage, "report": report_stage,
               "collapse-demo": collapse_stage}


def run_all(cfg: dict) -> Path:
    generate_data(cfg)
    train_stage(cfg)
    if cfg["calibration"]["enabled"]:
        calibrate_stage(cfg)
    evaluate_stage(cfg)
    return report_stage(cfg)
