import math

import numpy as np
import pytest

from uqlab import autodiff as ad
from uqlab.data import ConceptVocabulary, Episode
from uqlab.embedding import encode_episode, make_batch
from uqlab.transformer import (ConfigError, ModelConfig, TrainSettings, TransformerClassifier, batch_loss,
                               evaluate_auc, train)

from conftest import grad_check

VOCAB = ConceptVocabulary(["gcs=1", "gcs=2"], ["hr", "sbp"], {"hr": 80.0, "sbp": 120.0},
                          {"hr": 15.0, "sbp": 20.0})


def _episodes():
    return [
        Episode("a", [0.5, 3.0, 7.0], ["hr", "gcs=1", "sbp"], [90.0, np.nan, 110.0], 1),
        Episode("b", [1.0, 2.0, 2.5], ["sbp", "hr", "gcs=2"], [130.0, 70.0, np.nan], 0),
    ]


def _tiny(kind="deterministic", dtype="float64", seed=0, **kw):
    cfg = ModelConfig(d_model=4, heads=2, layers=1, dropout=0.0, head_kind=kind, dtype=dtype, **kw)
    return TransformerClassifier(cfg, VOCAB, np.random.default_rng(seed))


def _batch():
    return make_batch([encode_episode(e, VOCAB) for e in _episodes()])


def _toy_items(n, seed):
    """Two value concepts; the label is the sign of the first one's value."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        x = rng.normal(size=2)
        ep = Episode(f"t{i}", [1.0, 2.0], ["hr", "sbp"], [80 + 15 * x[0], 120 + 20 * x[1]], int(x[0] > 0))
        items.append(encode_episode(ep, VOCAB))
    return items


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=6, heads=4)

    def test_odd_width_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=5, heads=1)

    def test_round_trip(self):
        cfg = ModelConfig(d_model=8, heads=2, head_kind="bayesian")
        assert ModelConfig(**cfg.to_dict()) == cfg


class TestEndToEndGradient:
    @pytest.mark.parametrize("kind", ["deterministic", "bayesian"])
    def test_full_loss_matches_finite_differences(self, kind):
        model = _tiny(kind)
        batch = _batch()

        def loss():
            # fixed stream, so every evaluation sees the same radial draw
            return batch_loss(model, batch, np.random.default_rng(7), c_kl=0.1)[0]

        assert grad_check(loss, model.parameters()) < 1e-3


class TestForward:
    def test_attention_rows_sum_to_one(self):
        model = TransformerClassifier(ModelConfig(d_model=8, heads=2, layers=2, dropout=0.0), VOCAB,
                                      np.random.default_rng(0))
        att = []
        model.features(_batch(), attention=att)
        assert len(att) == 2
        for a in att:
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    def test_single_token_sequence_is_finite(self):
        ep = Episode("s", [4.0], ["hr"], [95.0], 1)
        out = _tiny().forward(make_batch([encode_episode(ep, VOCAB)]))
        assert out.shape == (1, 2) and np.isfinite(out.data).all()

    def test_tied_timestamps_are_order_free(self):
        model = _tiny()
        a = Episode("p", [2.0, 2.0, 5.0], ["hr", "gcs=1", "sbp"], [90.0, np.nan, 100.0], 1)
        b = Episode("p", [2.0, 2.0, 5.0], ["gcs=1", "hr", "sbp"], [np.nan, 90.0, 100.0], 1)
        la = model.forward(make_batch([encode_episode(a, VOCAB)])).data
        lb = model.forward(make_batch([encode_episode(b, VOCAB)])).data
        assert np.max(np.abs(la - lb)) < 1e-9

    def test_padding_does_not_change_logits(self):
        model = _tiny()
        eps = _episodes()
        short = Episode("c", [1.0], ["gcs=2"], [np.nan], 0)
        alone = model.forward(make_batch([encode_episode(short, VOCAB)])).data
        padded = model.forward(make_batch([encode_episode(eps[0], VOCAB), encode_episode(short, VOCAB)])).data
        np.testing.assert_allclose(padded[1], alone[0], atol=1e-12)

    def test_logit_shift_leaves_probabilities(self):
        logits = _tiny().forward(_batch())
        np.testing.assert_allclose(ad.softmax(logits).data, ad.softmax(logits + 3.7).data, atol=1e-14)


class TestTraining:
    def test_separable_toy_reaches_high_accuracy(self):
        items = _toy_items(200, 0)
        cfg = ModelConfig(d_model=8, heads=2, layers=1, dropout=0.0)
        model = TransformerClassifier(cfg, VOCAB, np.random.default_rng(1))
        # no eval fold: the kept epoch is the one with the lowest training loss
        train(model, items, [], TrainSettings(lr=3e-3, max_epochs=50, patience=50), np.random.default_rng(2))
        logits = model.predict_logits(items)
        acc = np.mean((logits[:, 1] > logits[:, 0]) == np.array([it.label for it in items]))
        assert acc > 0.95

    def test_first_epoch_loss_near_ln2(self):
        items = _toy_items(64, 3)
        model = _tiny()
        res = train(model, items, items, TrainSettings(max_epochs=1), np.random.default_rng(0))
        assert abs(res.log[0]["train_loss"] - math.log(2)) < 0.1

    def test_same_seed_same_log(self, tmp_path):
        items = _toy_items(40, 4)
        logs = []
        for _ in range(2):
            model = _tiny("bayesian", seed=5)
            logs.append(train(model, items, items[:20], TrainSettings(max_epochs=3),
                              np.random.default_rng(9)).log)
        assert logs[0] == logs[1]

    def test_log_file_is_json_lines(self, tmp_path):
        import json
        items = _toy_items(30, 5)
        path = tmp_path / "log.jsonl"
        train(_tiny(), items, items, TrainSettings(max_epochs=2), np.random.default_rng(0), log_path=path)
        lines = [json.loads(x) for x in path.read_text().splitlines()]
        assert [x["epoch"] for x in lines] == [1, 2]
        assert {"train_loss", "eval_auc"} <= set(lines[0])

    def test_checkpoint_round_trip(self, tmp_path):
        model = _tiny("bayesian")
        model.save(tmp_path / "ck", {"note": 1})
        loaded, meta = TransformerClassifier.load(tmp_path / "ck")
        assert meta["note"] == 1
        np.testing.assert_array_equal(loaded.forward(_batch()).data, model.forward(_batch()).data)

    def test_radial_layers_flagged_in_manifest(self, tmp_path):
        import json
        _tiny("bayesian").save(tmp_path / "ck")
        tensors = json.loads((tmp_path / "ck" / "manifest.json").read_text())["tensors"]
        radial = {t["name"] for t in tensors if t.get("radial")}
        assert radial and all(n.startswith("radial") for n in radial)

    def test_float32_checkpoint_round_trip(self, tmp_path):
        model = _tiny(dtype="float32")
        model.save(tmp_path / "ck")
        loaded, _ = TransformerClassifier.load(tmp_path / "ck")
        assert loaded.parameters()[0].dtype == np.float32
        np.testing.assert_array_equal(loaded.forward(_batch()).data, model.forward(_batch()).data)

    def test_evaluate_auc_single_class_is_none(self):
        items = [it for it in _toy_items(20, 6) if it.label == 1]
        assert evaluate_auc(_tiny(), items) is None
