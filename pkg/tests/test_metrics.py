import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stgkit.data import SynthSpec, synth
from stgkit.errors import ContractError, DataError, EmptyMaskError
from stgkit.metrics import NormStats, ha_baseline, ha_table, inverse_zscore, masked_metrics, zscore
from stgkit.oracles import loop_metrics
from stgkit.verify import metric_oracle_errors

values = st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: v == 0 or abs(v) > 1e-3)


class TestMaskedMetrics:
    def test_perfect_prediction(self):
        r = masked_metrics([1.0, -2.0, 3.0], [1.0, -2.0, 3.0])
        assert (r.mae, r.rmse, r.mape) == (0.0, 0.0, 0.0)

    def test_zero_truth_ignored(self):
        r = masked_metrics([999.0, 12.0], [0.0, 10.0])
        assert r.mae == pytest.approx(2.0, abs=1e-15)
        assert r.rmse == pytest.approx(2.0, abs=1e-15)
        assert r.mape == pytest.approx(20.0, abs=1e-12)
        assert r.masked_count == 1 and r.total_count == 2

    def test_loop_oracle_4x5(self, rng):
        truth = rng.uniform(1, 10, (4, 5))
        truth[1, 2] = 0.0
        pred = truth + rng.standard_normal((4, 5))
        r = masked_metrics(pred, truth)
        ref = loop_metrics(pred, truth)
        np.testing.assert_allclose((r.mae, r.rmse, r.mape), ref, rtol=1e-12)

    def test_many_random_instances(self):
        err, ordered = metric_oracle_errors(200, seed=4)
        assert err <= 1e-12 and ordered

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            masked_metrics([1.0, 2.0], [0.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            masked_metrics(np.ones(3), np.ones(4))

    def test_horizon_breakdown(self, rng):
        truth = rng.uniform(1, 5, (2, 12, 3))
        pred = truth.copy()
        pred[:, 5] += 1.0  # only horizon 6 is off
        r = masked_metrics(pred, truth, horizon_axis=1)
        assert sorted(r.horizons) == [3, 6, 12]
        assert r.horizons[3]["mae"] == 0.0 and r.horizons[12]["mae"] == 0.0
        assert r.horizons[6]["mae"] == pytest.approx(1.0)
        assert r.mae == pytest.approx(1.0 / 12)

    def test_short_horizon_reports_available_steps(self, rng):
        truth = rng.uniform(1, 5, (4, 3))
        assert sorted(masked_metrics(truth, truth, horizon_axis=1).horizons) == [3]

    def test_json_and_csv(self, rng):
        truth = rng.uniform(1, 5, (2, 12, 3))
        r = masked_metrics(truth + 0.5, truth, horizon_axis=1)
        payload = json.loads(r.to_json())
        assert payload["mae"] == pytest.approx(0.5)
        assert set(payload["horizons"]) == {"3", "6", "12"}
        lines = r.to_csv().splitlines()
        assert lines[0] == "horizon,mae,rmse,mape"
        assert [ln.split(",")[0] for ln in lines[1:]] == ["3", "6", "12", "average"]

    @given(arrays(np.float64, (3, 4), elements=values), arrays(np.float64, (3, 4), elements=values),
           st.floats(0.01, 100))
    @settings(max_examples=60, deadline=None)
    def test_scaling_covariance(self, pred, truth, c):
        if not (truth != 0).any():
            return
        a = masked_metrics(pred, truth)
        b = masked_metrics(pred * c, truth * c)
        assert math.isclose(b.mae, c * a.mae, rel_tol=1e-12, abs_tol=1e-9)
        assert math.isclose(b.rmse, c * a.rmse, rel_tol=1e-12, abs_tol=1e-9)
        assert math.isclose(b.mape, a.mape, rel_tol=1e-12, abs_tol=1e-9)

    @given(arrays(np.float64, (3, 4), elements=values), arrays(np.float64, (3, 4), elements=values),
           arrays(np.float64, (3, 4), elements=values))
    @settings(max_examples=60, deadline=None)
    def test_mask_invariance_and_ordering(self, pred, truth, junk):
        if not (truth != 0).any():
            return
        a = masked_metrics(pred, truth)
        b = masked_metrics(np.where(truth == 0, junk, pred), truth)
        assert (a.mae, a.rmse, a.mape) == (b.mae, b.rmse, b.mape)
        assert a.mae <= a.rmse * (1 + 1e-12)


class TestZscore:
    def test_examples(self):
        s = NormStats(np.array([10.0]), np.array([4.0]))
        assert zscore(np.array([10.0]), s).tolist() == [0.0]
        assert zscore(np.array([14.0]), s).tolist() == [1.0]

    def test_round_trip(self, rng):
        s = NormStats(np.array([55.0]), np.array([17.0]))
        x = rng.uniform(0, 200, (100, 1))
        assert np.abs(inverse_zscore(zscore(x, s), s) - x).max() <= 1e-12
        assert np.abs(zscore(inverse_zscore(x, s), s) - x).max() <= 1e-12

    def test_zero_sigma_rejected(self):
        with pytest.raises(DataError):
            NormStats(np.array([1.0]), np.array([0.0]))
        with pytest.raises(DataError):
            NormStats.fit(np.ones((5, 2, 1)))

    def test_population_std(self):
        s = NormStats.fit(np.array([1.0, 3.0]).reshape(2, 1, 1))
        assert s.mu.tolist() == [2.0] and s.sigma.tolist() == [1.0]


class TestHistoricalAverage:
    def test_table_fallback_to_node_mean(self):
        readings = np.array([[[2.0]], [[4.0]], [[0.0]]])
        table = ha_table(readings, np.array([1, 1, 2]), np.array([1, 1, 1]), steps_per_day=1)
        assert table[0, 0, 0, 0] == 3.0
        assert table[1, 0, 0, 0] == 3.0  # only a zero seen there: node mean
        assert table[5, 0, 0, 0] == 3.0  # never seen

    def test_constant_series(self):
        ds = synth(SynthSpec(n_nodes=3, days=14, noise=0.0, alpha=0.0, missing_rate=0.0, interval_minutes=60))
        const = type(ds)(np.full_like(ds.readings, 42.0), ds.day_of_week, ds.step_of_day,
                         ds.graph, ds.interval_minutes, ds.start)
        assert ha_baseline(const).mae == 0.0

    def test_periodic_data_exact(self):
        ds = synth(SynthSpec(n_nodes=4, days=21, noise=0.0, alpha=0.0, missing_rate=0.0, interval_minutes=15))
        assert ha_baseline(ds).mae <= 1e-12

    def test_noise_band(self):
        # A deviation field of unit-variance Gaussians scaled by 5 gives E|noise| = 5 sqrt(2 / pi).
        ds = synth(SynthSpec())
        expected = 5.0 * math.sqrt(2.0 / math.pi)
        mae = ha_baseline(ds).mae
        assert 0.7 * expected <= mae <= 1.0 * expected
