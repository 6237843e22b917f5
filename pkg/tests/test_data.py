import logging
from dataclasses import replace
from datetime import datetime

import numpy as np
import pytest

from stgkit.data import (
    SynthSpec,
    StDataset,
    gather_batch,
    load_dataset,
    make_windows,
    save_dataset,
    split_bounds,
    synth,
    window_starts,
)
from stgkit.errors import ConfigError, LoadError
from stgkit.graph import random_graph
from stgkit.metrics import ha_baseline


def tiny(steps=10, nodes=2, interval=5):
    values = np.arange(steps * nodes, dtype=np.float64).reshape(steps, nodes) * 1.5 + 0.25
    return StDataset.from_readings(values, random_graph(nodes, 1, 0), interval, datetime(2024, 3, 4, 6, 0))


@pytest.fixture(scope="module")
def small_synth():
    return synth(SynthSpec(n_nodes=8, days=3, interval_minutes=15))


class TestSplits:
    @pytest.mark.parametrize("n,sizes", [(100, (60, 20, 20)), (101, (61, 20, 20)), (10, (6, 2, 2)), (7, (5, 1, 1))])
    def test_sizes(self, n, sizes):
        b = split_bounds(n)
        assert tuple(hi - lo for lo, hi in (b["train"], b["val"], b["test"])) == sizes

    def test_contiguous_and_ordered(self):
        b = split_bounds(2017)
        assert b["train"][0] == 0 and b["train"][1] == b["val"][0]
        assert b["val"][1] == b["test"][0] and b["test"][1] == 2017

    def test_unknown_split(self):
        with pytest.raises(ConfigError):
            tiny().bounds("holdout")


class TestWindows:
    def test_exact_fit_gives_one_window(self):
        ds = tiny(steps=100)
        assert len(make_windows(ds, "val", 12, 8)) == 1

    def test_count(self):
        ds = tiny(steps=100)
        assert len(make_windows(ds, "train", 10, 46)) == 5
        assert len(window_starts(ds, "train", 12, 12)) == 60 - 24 + 1

    def test_too_short(self):
        with pytest.raises(ConfigError):
            window_starts(tiny(steps=100), "test", 12, 12)

    def test_windows_alias_backing_data(self):
        ds = tiny(steps=100)
        windows = make_windows(ds, "train", 3, 2)
        (w0, y0), (w1, _) = windows[0], windows[1]
        assert np.shares_memory(w0.x, ds.readings) and np.shares_memory(y0, ds.readings)
        # A sentinel written into the backing array shows up in both overlapping views.
        ds.readings[1, 0, 0] = -777.0
        assert w0.x[1, 0, 0] == -777.0 and w1.x[0, 0, 0] == -777.0

    def test_no_window_crosses_a_split(self, small_synth):
        for split in ("train", "val", "test"):
            lo, hi = small_synth.bounds(split)
            starts = window_starts(small_synth, split, 12, 12)
            assert starts.min() >= lo and starts.max() + 24 <= hi

    def test_gather_batch_matches_windows(self, small_synth):
        windows = make_windows(small_synth, "val", 4, 3)
        starts = window_starts(small_synth, "val", 4, 3)[[0, 5, 9]]
        batch, target = gather_batch(small_synth, starts, 4, 3)
        for row, i in enumerate((0, 5, 9)):
            np.testing.assert_array_equal(batch.x[row], windows[i][0].x)
            np.testing.assert_array_equal(batch.step_of_day[row], windows[i][0].step_of_day)
            np.testing.assert_array_equal(target[row], windows[i][1])


class TestFiles:
    @pytest.mark.parametrize("fmt", ["csv", "stgt"])
    def test_round_trip_bitwise(self, tmp_path, fmt):
        ds = tiny()
        save_dataset(ds, tmp_path / fmt, fmt)
        back = load_dataset(tmp_path / fmt)
        assert back.readings.tobytes() == ds.readings.tobytes()
        np.testing.assert_array_equal(back.graph.adjacency, ds.graph.adjacency)
        assert back.start == ds.start and back.interval_minutes == 5
        np.testing.assert_array_equal(back.step_of_day, ds.step_of_day)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(LoadError, match="manifest"):
            load_dataset(tmp_path)

    def test_backwards_timestamp_names_line(self, tmp_path):
        save_dataset(tiny(steps=3), tmp_path, "csv")
        lines = (tmp_path / "readings.csv").read_text().splitlines()
        lines[3], lines[5] = lines[5], lines[3]
        (tmp_path / "readings.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(LoadError, match=r"readings.csv:4"):
            load_dataset(tmp_path)

    def test_gap_in_grid(self, tmp_path):
        save_dataset(tiny(steps=4), tmp_path, "csv")
        lines = (tmp_path / "readings.csv").read_text().splitlines()
        del lines[3:5]
        (tmp_path / "readings.csv").write_text("\n".join(lines) + "\n")
        with pytest.raises(LoadError, match="grid"):
            load_dataset(tmp_path)

    def test_node_count_mismatch(self, tmp_path):
        save_dataset(tiny(), tmp_path)
        (tmp_path / "graph.txt").write_text("nodes=3\n0 1 1.0\n")
        with pytest.raises(LoadError, match="nodes"):
            load_dataset(tmp_path)

    def test_bad_value_names_line(self, tmp_path):
        save_dataset(tiny(steps=2), tmp_path, "csv")
        text = (tmp_path / "readings.csv").read_text().replace(",0.25\n", ",abc\n")
        (tmp_path / "readings.csv").write_text(text)
        with pytest.raises(LoadError, match=r"readings.csv:2"):
            load_dataset(tmp_path)


class TestSynth:
    def test_deterministic_and_nonnegative(self):
        spec = SynthSpec(n_nodes=5, days=2)
        a, b = synth(spec), synth(spec)
        assert a.readings.tobytes() == b.readings.tobytes()
        assert (a.readings >= 0).all()

    def test_seed_changes_data(self):
        a = synth(SynthSpec(n_nodes=5, days=2, seed=1))
        b = synth(SynthSpec(n_nodes=5, days=2, seed=2))
        assert not np.array_equal(a.readings, b.readings)

    def test_missing_rate(self):
        ds = synth(SynthSpec(n_nodes=10, days=7, missing_rate=0.1))
        assert abs((ds.readings == 0).mean() - 0.1) < 0.01

    def test_noiseless_repeats_daily_profile(self):
        ds = synth(SynthSpec(n_nodes=4, days=14, noise=0.0, alpha=0.0, missing_rate=0.0))
        spd = ds.steps_per_day
        # Same weekday one week apart is identical; weekdays share one curve.
        np.testing.assert_array_equal(ds.readings[:spd], ds.readings[7 * spd : 8 * spd])
        np.testing.assert_array_equal(ds.readings[:spd], ds.readings[spd : 2 * spd])
        assert ha_baseline(ds).mae == 0.0

    def test_double_peak_on_weekdays(self):
        ds = synth(SynthSpec(n_nodes=1, days=1, noise=0.0, missing_rate=0.0, interval_minutes=60))
        series = ds.readings[:, 0, 0]
        assert series[8] > series[12] < series[17]
        assert series[3] < series[8]

    def test_neighbours_correlate_more(self):
        spec = SynthSpec(n_nodes=30, days=7, missing_rate=0.0)
        noisy, clean = synth(spec), synth(replace(spec, noise=0.0))
        dev = noisy.readings[:, :, 0] - clean.readings[:, :, 0]
        corr = np.corrcoef(dev.T)
        adj = noisy.graph.adjacency > 0
        off = ~np.eye(30, dtype=bool)
        assert adj.any() and (off & ~adj).any()
        assert corr[adj].mean() > corr[off & ~adj].mean()

    def test_tiny_radius_warns(self, caplog):
        caplog.set_level(logging.WARNING, logger="stgkit")
        ds = synth(SynthSpec(n_nodes=4, days=1, radius=1e-6))
        assert ds.graph.n_edges == 0
        assert "connects no node pairs" in caplog.text

    @pytest.mark.parametrize("kw", [{"alpha": 1.5}, {"noise": -1.0}, {"missing_rate": 1.0},
                                    {"persistence": 1.0}, {"n_nodes": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            synth(SynthSpec(**kw))
