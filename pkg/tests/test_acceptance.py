"""End-to-end acceptance checks, one printed PASS/FAIL line per criterion.

The protocol check runs the full desk-scale pipeline (about 10 minutes on one
core).  Point ``UQLAB_PROTOCOL_OUT`` at a finished run with the same config
to reuse it.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from uqlab import autodiff as ad
from uqlab import pipeline
from uqlab.bayes import directional_moments, kl_term, predict_sampled
from uqlab.calibration import CalibrationSettings, ece, fit_calibrator
from uqlab.cli import main
from uqlab.config import load
from uqlab.data import ConceptVocabulary, Episode
from uqlab.embedding import encode_episode, make_batch
from uqlab.metrics import auc_pr, auc_roc
from uqlab.transformer import ModelConfig, TrainSettings, TransformerClassifier, batch_loss, train
from uqlab.uncertainty import (mutual_information, predictive_entropy, probability_bins, read_records,
                               remap_to_uniform, sigma_delta, signed_distance)
from uqlab.zigzag import collapse_demo

from conftest import grad_check
from test_autodiff import OP_CASES
from test_bayes import _layer, _naive_kl
from test_calibration import _calibrated_source, _p1
from test_metrics import _random_set, enumerated_auc_pr, enumerated_pr, pairwise_auc
from test_transformer import _batch, _tiny

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return report


@pytest.fixture(scope="module")
def protocol_run(tmp_path_factory):
    cfg_path = CONFIGS / "protocol.json"
    reuse = os.environ.get("UQLAB_PROTOCOL_OUT")
    if reuse:
        summary = Path(reuse) / "report" / "summary.json"
        cfg = load(cfg_path, out=reuse)
        if summary.exists() and json.loads(summary.read_text())["config_digest"] == pipeline.config_digest(cfg):
            return Path(reuse), None
    out = tmp_path_factory.mktemp("protocol")
    t0 = time.perf_counter()
    assert main(["run-all", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out, time.perf_counter() - t0


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    op_err = {}
    for name, build in sorted(OP_CASES.items()):
        loss_fn, params = build(np.random.default_rng(1234))
        op_err[name] = grad_check(loss_fn, params)
    e2e = 0.0
    for kind in ("deterministic", "bayesian"):
        model, batch = _tiny(kind), _batch()
        e2e = max(e2e, grad_check(lambda: batch_loss(model, batch, np.random.default_rng(7), c_kl=0.1)[0],
                                  model.parameters()))
    elapsed = time.perf_counter() - t0
    worst = max(op_err, key=op_err.get)
    ok = op_err[worst] < 1e-4 and e2e < 1e-3 and elapsed < 60
    verdict("gradient suite", ok, f"{len(op_err)} ops, worst {worst} {op_err[worst]:.2e} (<1e-4); "
                                  f"end-to-end {e2e:.2e} (<1e-3); {elapsed:.1f}s (<60s)")


def test_bayesian_math(verdict):
    t0 = time.perf_counter()
    layer = _layer(np.random.default_rng(1234))
    est, se = _naive_kl(layer, 100_000, 3)
    got = kl_term(layer).item()
    _, m2 = directional_moments(100)
    elapsed = time.perf_counter() - t0
    z = abs(got - est) / se
    ok = layer.n_sampled == 10 and z < 3 and abs(m2 * 100 - 1) < 0.05 and elapsed < 120
    verdict("bayesian math", ok, f"kl_term {got:.5f} vs naive MC {est:.5f} ({z:.2f} SE, <3); "
                                 f"d*E[x^2] at d=100 = {m2 * 100:.4f} (within 5% of 1); {elapsed:.1f}s")


def test_uncertainty_measures(verdict):
    big = 800.0
    checks = {
        "PE(0.5,0.5)": (predictive_entropy([[0.0, 0.0]]), math.log(2)),
        "PE(1,0)": (predictive_entropy([[big, 0.0]]), 0.0),
        "PE(0.25,0.75)": (predictive_entropy([[0.0, math.log(3)]]), 0.562335),
        "MI identical": (mutual_information([[0.4, -0.2]] * 3), 0.0),
        "MI opposite": (mutual_information([[big, 0.0], [0.0, big]]), math.log(2)),
        "sigma_delta zeros": (sigma_delta(np.zeros((4, 2))), 0.0),
        "delta(1,3)": (signed_distance(np.array([[1.0, 3.0]]))[0], math.sqrt(2)),
    }
    # 0.562335 is quoted to 6 places; the rest are exact
    errs = {k: abs(a - b) for k, (a, b) in checks.items()}
    unit_ok = all(e < (5e-7 if k == "PE(0.25,0.75)" else 1e-9) for k, e in errs.items())
    shift = np.random.default_rng(0).normal(size=(5, 2))
    unit_ok &= abs(sigma_delta(shift + 4.2) - sigma_delta(shift)) < 1e-9

    rng = np.random.default_rng(5)
    x = rng.normal(0, 3, size=(5000, 10, 2))
    pe, mi = predictive_entropy(x), mutual_information(x)
    bound_ok = bool(np.all(mi >= 0) and np.all(mi <= pe + 1e-12))

    vocab = ConceptVocabulary(["a"], ["hr"])
    eps = [Episode(str(i), [1.0, 2.0], ["a", "hr"], [np.nan, v], int(v > 0))
           for i, v in enumerate(np.random.default_rng(0).normal(size=60))]
    items = [encode_episode(e, vocab) for e in eps]
    model = TransformerClassifier(ModelConfig(d_model=4, heads=2, dropout=0.0, head_kind="bayesian"),
                                  vocab, np.random.default_rng(1))
    train(model, items, [], TrainSettings(max_epochs=3, c_kl=1 / 60), np.random.default_rng(2))
    for layer in model.hidden:
        layer.rho_w.data[:] = -60.0
        layer.rho_b.data[:] = -60.0
    s = predict_sampled(model, make_batch(items), 10, seed=3)
    collapse = max(np.max(mutual_information(s)), np.max(sigma_delta(s)))
    ok = unit_ok and bound_ok and collapse < 1e-9
    verdict("uncertainty measures", ok, f"unit examples max err {max(errs.values()):.1e}; "
                                        f"MI in [0, PE] on 5000 sets: {bound_ok}; "
                                        f"collapsed BT head max MI/sigma {collapse:.1e}")


def test_metric_oracles(verdict):
    rng = np.random.default_rng(2024)
    roc_err = 0.0
    for _ in range(100):
        s, y = _random_set(rng, int(rng.integers(2, 201)))
        roc_err = max(roc_err, abs(auc_roc(s, y) - pairwise_auc(s, y)))
    pr_err = 0.0
    for _ in range(100):
        s, y = _random_set(rng, int(rng.integers(2, 21)))
        pr_err = max(pr_err, abs(auc_pr(s, y) - enumerated_auc_pr(list(s), list(y))))
        assert len(enumerated_pr(list(s), list(y))) == len(np.unique(s))
    ok = roc_err <= 1e-12 and pr_err <= 1e-12
    verdict("metric oracles", ok, f"AUC ROC vs pairwise max err {roc_err:.1e}; "
                                  f"AUC PR vs enumeration max err {pr_err:.1e} (<=1e-12)")


def test_calibration(verdict):
    t0 = time.perf_counter()
    settings = CalibrationSettings(steps=300, lr=2e-2)
    fit_x, fit_y = _calibrated_source(4000, 0)
    test_x, test_y = _calibrated_source(4000, 1)
    cal = fit_calibrator(3 * fit_x, fit_y, settings, seed=0)
    over_before = ece(_p1(3 * test_x), test_y)
    over_after = ece(_p1(cal.apply(3 * test_x)), test_y)
    d_auc_over = abs(auc_roc(_p1(cal.apply(3 * test_x)), test_y) - auc_roc(_p1(3 * test_x), test_y))

    fit_x, fit_y = _calibrated_source(4000, 2)
    test_x, test_y = _calibrated_source(4000, 3)
    cal = fit_calibrator(fit_x, fit_y, settings, seed=0)
    good_before = ece(_p1(test_x), test_y)
    good_after = ece(_p1(cal.apply(test_x)), test_y)
    d_auc_good = abs(auc_roc(_p1(cal.apply(test_x)), test_y) - auc_roc(_p1(test_x), test_y))
    elapsed = time.perf_counter() - t0
    reduction = 1 - over_after / over_before
    ok = (reduction >= 0.5 and good_after <= good_before + 0.01 and max(d_auc_over, d_auc_good) < 0.01
          and elapsed < 120)
    verdict("calibration", ok, f"overconfident ECE {over_before:.4f} -> {over_after:.4f} "
                               f"({reduction:.0%} reduction, >=50%); calibrated {good_before:.4f} -> "
                               f"{good_after:.4f} (<= +0.01); max |dAUC| {max(d_auc_over, d_auc_good):.4f}; "
                               f"{elapsed:.1f}s")


def test_protocol_reproduction(verdict, protocol_run):
    out, elapsed = protocol_run
    s = json.loads((out / "report" / "summary.json").read_text())
    d = {m: s["delta_auc_roc"][m]["mean"] for m in s["delta_auc_roc"]}
    ok = (s["n_runs"] == 8 and d["pe"] >= 0.02 and d["mi"] >= 0.01
          and -0.02 <= d["mi_eu"] <= 0.02 and -0.02 <= d["sigma_delta_eu"] <= 0.02)
    timing = "reused run" if elapsed is None else f"{elapsed / 60:.1f} min on {os.cpu_count()} core(s)"
    verdict("protocol reproduction", ok,
            f"AUC ROC {s['auc_roc']['mean']:.3f}; dAUC@0.5 PE {d['pe']:+.4f} (>=+0.02), "
            f"MI {d['mi']:+.4f} (>=+0.01), MI_EU {d['mi_eu']:+.4f} and sigma_delta_EU "
            f"{d['sigma_delta_eu']:+.4f} (within +-0.02); sigma_delta {d['sigma_delta']:+.4f}; {timing}")


def test_remapping_soundness(verdict, protocol_run):
    out, _ = protocol_run
    unc = load(CONFIGS / "protocol.json")["uncertainty"]
    n_bins, scheme = unc["remap_bins"], unc["remap_binning"]
    recs = [r for run in range(8) for r in read_records(out / "evaluation" / f"run{run}" / "records.csv")]
    probs = np.array([r.prob for r in recs])
    rho, order_ok = {}, True
    for m in ("mi", "sigma_delta"):
        eu = np.array([getattr(r, f"{m}_eu") for r in recs])
        rho[m] = abs(spearmanr(eu, probs)[0])
        # per run, the remap is recomputed from the raw measure and compared bin by bin
        for run in range(8):
            rr = read_records(out / "evaluation" / f"run{run}" / "records.csv")
            p = np.array([r.prob for r in rr])
            raw = np.array([getattr(r, m) for r in rr])
            stored = np.array([getattr(r, f"{m}_eu") for r in rr])
            order_ok &= bool(np.allclose(remap_to_uniform(p, raw, n_bins, scheme), stored, atol=1e-15, rtol=0))
            bins = probability_bins(p, n_bins, scheme)
            for b in np.unique(bins):
                i = np.flatnonzero(bins == b)
                a, e = raw[i], stored[i]
                order_ok &= bool(np.array_equal(np.sign(a[:, None] - a[None, :]), np.sign(e[:, None] - e[None, :])))
    ok = len(recs) >= 1000 and max(rho.values()) < 0.05 and order_ok
    verdict("remapping soundness", ok, f"{len(recs)} records; |Spearman| MI_EU {rho['mi']:.4f}, "
                                       f"sigma_delta_EU {rho['sigma_delta']:.4f} (<0.05); "
                                       f"within-bin order preserved: {order_ok}")


def test_collapse_demo(verdict):
    t0 = time.perf_counter()
    res = collapse_demo(seed=0)
    elapsed = time.perf_counter() - t0
    dev = min(res.deviations.values())
    ok = res.median_ratio < 3 and dev > 1 and elapsed < 300
    verdict("collapse demo", ok, f"median R {res.median_ratio:.2f} (<3); min |mean - truth| at removed "
                                 f"clusters {dev:.2f} (>1); far-field std / train std "
                                 f"{res.far_std / res.train_std:.1f}; {elapsed:.1f}s")


def test_determinism(verdict, tmp_path):
    paths = []
    for name in ("a", "b"):
        assert main(["run-all", "--config", str(CONFIGS / "tiny.json"), "--out", str(tmp_path / name)]) == 0
        paths.append(tmp_path / name / "report" / "summary.json")
    same = paths[0].read_bytes() == paths[1].read_bytes()
    verdict("determinism", same, f"tiny pipeline twice with seed 3, float64: summary.json byte-identical = {same}")
