import numpy as np
import pytest

from uqlab.zigzag import ZigzagSpec, collapse_demo, zigzag_data

SMALL = dict(ensemble_size=3, hidden=16, epochs=60, grid_points=21)


class TestSpec:
    def test_kept_clusters(self):
        assert ZigzagSpec(n=2, removed=[0]).kept == [-2, -1, 1, 2]

    @pytest.mark.parametrize("kw", [dict(removed=[4]), dict(n=1, removed=[-1, 0, 1]),
                                    dict(points_per_cluster=3), dict(ensemble_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ZigzagSpec(**kw)

    def test_dict(self):
        assert ZigzagSpec().to_dict()["removed"] == [-1, 1]


class TestData:
    def test_cluster_layout(self):
        spec = ZigzagSpec(noise=0.0)
        x, y = zigzag_data(spec, 0)
        assert x.size == 5 * spec.points_per_cluster
        assert set(np.unique(x)) == {-3.0, -2.0, 0.0, 2.0, 3.0}
        np.testing.assert_array_equal(y, (-1.0) ** x)

    def test_noise_level(self):
        x, _ = zigzag_data(ZigzagSpec(noise=0.1, points_per_cluster=2000), 1)
        assert np.std(x - np.round(x)) == pytest.approx(0.1, rel=0.05)


class TestDemo:
    def test_summary_fields_and_determinism(self, tmp_path):
        spec = ZigzagSpec(**SMALL)
        a, b = collapse_demo(spec, seed=2), collapse_demo(spec, seed=2)
        assert a.summary() == b.summary()
        assert set(a.ratios) == {-1, 1} and a.grid.size == 21
        a.write_csv(tmp_path / "p.csv")
        assert (tmp_path / "p.csv").read_text().splitlines()[0] == "x,mean,std"

    def test_single_member_has_no_spread(self):
        res = collapse_demo(ZigzagSpec(**{**SMALL, "ensemble_size": 1}), seed=0)
        assert res.train_std == 0.0 and np.all(res.std == 0.0)

    def test_bayesian_members(self):
        res = collapse_demo(ZigzagSpec(**{**SMALL, "bayesian": True, "ensemble_size": 2, "epochs": 20}), seed=0)
        assert res.train_std > 0 and res.median_ratio is not None

    def test_confident_and_wrong_between_clusters(self):
        res = collapse_demo(ZigzagSpec(), seed=0)
        assert res.median_ratio < 3
        assert min(res.deviations.values()) > 1
        # the spread does grow when extrapolating far outside the data
        assert res.far_std > 3 * res.train_std
