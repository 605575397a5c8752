import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uqlab import ensemble as ens_mod
from uqlab.data import ConceptVocabulary, Episode
from uqlab.embedding import encode_episode
from uqlab.ensemble import (EnsembleModel, MemberResult, RunData, SearchGrid, config_hash, predict_ensemble,
                            predict_models, read_manifest, run_search, select_top)
from uqlab.transformer import ModelConfig, TrainingDivergence, TrainSettings, TransformerClassifier

VOCAB = ConceptVocabulary(["a"], ["hr"])


def _member(i, auc, d_model=32, n_params=None, status="ok"):
    cfg = ModelConfig(d_model=d_model, heads=2).to_dict()
    return MemberResult(i, cfg, 0, [auc, auc], [f"m{i}/run0"], n_params or d_model * 100, status)


def _runs(n_runs=2):
    rng = np.random.default_rng(0)
    out = []
    for r in range(n_runs):
        items = []
        for i in range(16):
            x = rng.normal()
            items.append(encode_episode(Episode(f"{r}-{i}", [1.0, 2.0], ["a", "hr"], [np.nan, x], int(x > 0)),
                                        VOCAB))
        out.append(RunData(r, VOCAB, items[:10], items[10:]))
    return out


class TestGrid:
    def test_sample_within_grid_and_reproducible(self):
        grid = SearchGrid(n_models=20)
        pts = grid.sample(3)
        assert pts == grid.sample(3) and len(pts) == 20
        for p in pts:
            assert p["d_model"] in grid.d_model and p["heads"] in grid.heads and p["layers"] in grid.layers

    def test_invalid(self):
        with pytest.raises(ValueError):
            SearchGrid(n_models=0)
        with pytest.raises(ValueError):
            SearchGrid(heads=())

    def test_config_hash_stable(self):
        cfg = ModelConfig(d_model=8, heads=2)
        assert config_hash(cfg) == config_hash(cfg.to_dict()) != config_hash(ModelConfig(d_model=8, heads=4))


class TestSelection:
    def test_best_first(self):
        picked = select_top([_member(0, 0.7), _member(1, 0.9), _member(2, 0.8)], 2)
        assert [m.member_id for m in picked.members] == [1, 2]

    def test_tie_goes_to_smaller_model(self):
        picked = select_top([_member(0, 0.8, d_model=128), _member(1, 0.8, d_model=32)], 1)
        assert picked.members[0].config["d_model"] == 32

    def test_failed_members_excluded(self):
        picked = select_top([_member(0, 0.99, status="failed"), _member(1, 0.6)], 1)
        assert picked.members[0].member_id == 1

    def test_too_few(self):
        with pytest.raises(ValueError, match="only 2 succeeded"):
            select_top([_member(0, 0.7), _member(1, 0.8)], 3)
        with pytest.raises(ValueError):
            select_top([_member(0, 0.7)], 0)

    @settings(max_examples=50, deadline=None)
    @given(st.permutations(range(6)), st.integers(1, 6))
    def test_order_of_results_is_irrelevant(self, perm, g):
        # repeated AUCs and sizes force the tie-breakers into play
        pool = [_member(i, [0.8, 0.8, 0.7, 0.9, 0.8, 0.7][i], d_model=[32, 64, 32, 32, 32, 64][i])
                for i in range(6)]
        a = [m.member_id for m in select_top(pool, g).members]
        b = [m.member_id for m in select_top([pool[i] for i in perm], g).members]
        assert a == b

    def test_missing_run_checkpoint(self):
        with pytest.raises(FileNotFoundError):
            EnsembleModel([_member(0, 0.8)]).checkpoints(5)


class TestSearch:
    SETTINGS = TrainSettings(max_epochs=2, batch_size=8)
    BASE = ModelConfig(d_model=4, heads=1, dropout=0.0)

    def test_search_and_predict(self, tmp_path):
        grid = SearchGrid(d_model=(4,), heads=(1, 2), layers=(1,), n_models=3)
        results = run_search(grid, _runs(), self.BASE, self.SETTINGS, seed=1, out_dir=tmp_path)
        assert [r.member_id for r in results] == [0, 1, 2]
        assert all(r.status == "ok" and len(r.eval_aucs) == 2 for r in results)
        assert [r.to_dict() for r in read_manifest(tmp_path / "search_manifest.json")] == \
               [r.to_dict() for r in results]
        ens = select_top(results, 2)
        items = _runs()[1].eval_items
        got = predict_ensemble(ens, 1, items)
        assert got.shape == (len(items), 2, 2)
        models = [TransformerClassifier.load(p)[0] for p in ens.checkpoints(1)]
        np.testing.assert_array_equal(got, predict_models(models, items))

    def test_identical_members_have_no_spread(self):
        model = TransformerClassifier(self.BASE, VOCAB, np.random.default_rng(0))
        items = _runs(1)[0].eval_items
        s = predict_models([model, model, model], items)
        assert s.shape == (len(items), 3, 2) and np.all(s == s[:, :1])

    def test_sample_mean_is_member_mean(self):
        models = [TransformerClassifier(self.BASE, VOCAB, np.random.default_rng(i)) for i in range(3)]
        items = _runs(1)[0].eval_items
        want = sum(m.predict_logits(items) for m in models) / 3
        np.testing.assert_allclose(predict_models(models, items).mean(axis=1), want, atol=1e-12)

    def test_divergent_member_recorded(self, tmp_path, monkeypatch):
        real = ens_mod.train

        def flaky(model, *a, **kw):
            if model.config.heads == 2:
                raise TrainingDivergence("loss became nan")
            return real(model, *a, **kw)

        monkeypatch.setattr(ens_mod, "train", flaky)
        grid = SearchGrid(d_model=(4,), heads=(1, 2), layers=(1,), n_models=4)
        results = run_search(grid, _runs(1), self.BASE, self.SETTINGS, seed=1, out_dir=tmp_path)
        failed = [r for r in results if r.status == "failed"]
        assert failed and all("nan" in r.error for r in failed)
        assert all(m.config["heads"] == 1 for m in select_top(results, len(results) - len(failed)).members)

    def test_missing_checkpoint_file(self, tmp_path):
        m = _member(0, 0.8)
        m.checkpoints = [str(tmp_path / "gone" / "run0")]
        with pytest.raises(FileNotFoundError):
            predict_ensemble(EnsembleModel([m]), 0, _runs(1)[0].eval_items)
