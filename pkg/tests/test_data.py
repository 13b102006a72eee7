import json
import math

import numpy as np
import pytest

from svfm import data as dg


class TestClassification:
    def test_moons_balance_and_bounds(self):
        d = dg.gen_classification("moons", 1000, seed=0)
        assert d["x"].shape == (1000, 2)
        counts = np.bincount(d["y"])
        assert counts.tolist() == [500, 500]
        assert np.all(d["x"][:, 0] >= -2) and np.all(d["x"][:, 0] <= 3)
        assert np.all(d["x"][:, 1] >= -1.5) and np.all(d["x"][:, 1] <= 2)

    def test_circles_radial_separation(self):
        d = dg.gen_classification("circles", 1000, seed=0)
        r = np.linalg.norm(d["x"], axis=1)
        inner_max = r[d["y"] == 0].max()
        outer_min = r[d["y"] == 1].min()
        assert inner_max < outer_min - 3 * 0.1

    def test_xor_determinism_and_labels(self):
        a = dg.gen_classification("xor", 500, seed=3)
        b = dg.gen_classification("xor", 500, seed=3)
        assert np.array_equal(a["x"], b["x"]) and np.array_equal(a["y"], b["y"])
        # labels follow the sign of the blob centre product
        centers = np.round(a["x"])  # noise sigma ~0.22, centres at +-1
        same_sign = (np.sign(a["x"][:, 0] * a["x"][:, 1]) > 0).astype(int)
        assert (same_sign == a["y"]).mean() > 0.9

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            dg.gen_classification("spirals", 10, seed=0)


class TestFailureTasks:
    def test_crossing_two_configurations(self):
        d = dg.gen_failure_task("crossing", 100, seed=0)
        pairs = {(float(s), float(t)) for s, t in zip(d["start"][:, 0], d["target"][:, 0])}
        assert pairs == {(-1.0, 1.0), (1.0, -1.0)}

    def test_splitting_mean_and_support(self):
        d = dg.gen_failure_task("splitting", 10_000, seed=1)
        assert np.all(d["start"] == 0.0)
        assert set(np.unique(d["target"])) == {-1.0, 1.0}
        assert abs(d["target"].mean()) < 3 / math.sqrt(10_000)

    def test_scaling_statistics(self):
        d = dg.gen_failure_task("scaling", 10_000, seed=2)
        assert np.all(d["start"] == 0.0)
        assert abs(d["target"].std() - 0.25) < 0.1 * 0.25

    def test_one_to_many_property(self):
        for name in ("splitting", "scaling"):
            d = dg.gen_failure_task(name, 100, seed=3)
            starts, targets = d["start"], d["target"]
            assert np.unique(starts, axis=0).shape[0] == 1
            assert np.unique(targets, axis=0).shape[0] >= 2


class TestCyclic:
    def test_signal_values(self):
        assert dg.cyclic_signal(0.0) == 0.0
        assert abs(dg.cyclic_signal(2 * math.pi) - 2 * math.pi / 10) < 1e-12
        assert abs(dg.cyclic_signal(10 * math.pi) - math.pi) < 1e-12

    def test_sample_structure(self):
        s = dg.gen_cyclic(1, 40, seed=0)
        assert s.t_X[0] == 0.0
        assert abs(s.t_X[-1] - 2 * math.pi) < 1e-12
        assert s.X.shape == (41, 1)


class TestHomeTrajectories:
    def test_day_regime_uniform_endpoints(self):
        spec = dg.HomePathSpec.default()
        walks = dg.gen_home_trajectories(spec, 4000, "day", seed=0)
        names = spec.endpoint_names
        counts = {nm: 0 for nm in names}
        for w in walks:
            counts[w["endpoint"]] += 1
        sigma = math.sqrt(0.25 * 0.75 / 4000)
        for nm in names:
            assert abs(counts[nm] / 4000 - 0.25) < 3 * sigma

    def test_night_regime_landing_probability(self):
        spec = dg.HomePathSpec.default()
        walks = dg.gen_home_trajectories(spec, 4000, "night", seed=1)
        frac = sum(w["endpoint"] == "landing" for w in walks) / 4000
        sigma = math.sqrt(0.9 * 0.1 / 4000)
        assert abs(frac - 0.9) < 3 * sigma

    def test_paths_start_near_origin(self):
        spec = dg.HomePathSpec.default()
        walks = dg.gen_home_trajectories(spec, 50, "mixed", seed=2)
        for w in walks:
            start = np.asarray(w["X"][0])
            assert np.linalg.norm(start - np.asarray(spec.origin)) <= 3 * spec.noise_scale_m

    def test_timestamps_and_windows(self):
        spec = dg.HomePathSpec.default()
        for regime, (lo, hi) in (("day", (8.0, 20.0)), ("night", (20.0, 32.0))):
            walks = dg.gen_home_trajectories(spec, 200, regime, seed=3)
            for w in walks:
                t = np.asarray(w["t"])
                assert np.all(np.diff(t) > 0)
                dur = (t[-1] - t[0]) * 3600
                assert 5.0 <= dur <= 10.0
                start = t[0] if t[0] >= lo % 24 or regime == "day" else t[0] + 24
                if regime == "day":
                    assert 8.0 <= t[0] <= 20.0
                else:
                    assert t[0] >= 20.0 or t[0] <= 8.0

    def test_determinism(self):
        spec = dg.HomePathSpec.default()
        a = dg.gen_home_trajectories(spec, 20, "mixed", seed=7)
        b = dg.gen_home_trajectories(spec, 20, "mixed", seed=7)
        assert json.dumps(a) == json.dumps(b)

    def test_waypoints_inside_bounds_validated(self):
        spec = dg.HomePathSpec.default()
        bad = dict(
            bounds=spec.bounds,
            origin=spec.origin,
            paths={"exit": [[0.0, 0.0], [99.0, 0.0]]},
            regimes={"day": {"window": [8, 20], "probabilities": {"exit": 1.0}}},
            walk_duration_s=spec.walk_duration_s,
            noise_scale_m=spec.noise_scale_m,
            samples_per_walk=spec.samples_per_walk,
        )
        with pytest.raises(ValueError):
            dg.HomePathSpec(**bad)


class TestSerialization:
    def test_classification_round_trip(self, tmp_path):
        d = dg.gen_classification("moons", 50, seed=4)
        path = tmp_path / "c.jsonl"
        dg.save_classification_jsonl(path, d)
        back = dg.load_classification_jsonl(path)
        assert np.array_equal(back["x"], d["x"])
        assert np.array_equal(back["y"], d["y"])

    def test_endpoint_round_trip(self, tmp_path):
        d = dg.gen_failure_task("splitting", 30, seed=5)
        path = tmp_path / "e.jsonl"
        dg.save_endpoint_jsonl(path, d)
        back = dg.load_endpoint_jsonl(path)
        assert np.array_equal(back["start"], d["start"])
        assert np.array_equal(back["target"], d["target"])
        assert back["task"] == "splitting"

    def test_trajectories_round_trip(self, tmp_path):
        spec = dg.HomePathSpec.default()
        walks = dg.gen_home_trajectories(spec, 5, "day", seed=6)
        path = tmp_path / "t.jsonl"
        dg.save_trajectories_jsonl(path, walks)
        back = dg.load_trajectories_jsonl(path)
        assert json.dumps(back) == json.dumps(walks)

    def test_trajectory_sample_invariants(self):
        spec = dg.HomePathSpec.default()
        walks = dg.gen_home_trajectories(spec, 10, "mixed", seed=8)
        for w in walks:
            s = dg.trajectory_sample(w)
            assert s.t_X.size >= 2
            assert np.all(np.diff(s.t_X) > 0)
