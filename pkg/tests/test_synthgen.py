"""Synthetic scenario generator: kinematics, determinism, label bookkeeping."""

import numpy as np
import pytest

from trajmine.data_model import DT, ingest_csv, window_examples
from trajmine.synthgen import (
    BRAKE_DURATION,
    RARE_KINDS,
    ScenarioSpec,
    flags_from_json,
    flags_to_json,
    gen_dataset,
    gen_scenario,
    tracks_to_csv,
)


class TestGenScenario:
    def test_car_follow_constant_velocity(self):
        spec = ScenarioSpec(kind="car_follow", noise_std=0.0, initial_speed=20.0, seed=3)
        tracks, rare = gen_scenario(spec)
        assert rare is False
        target = tracks[0]
        steps = np.diff(target.longitudinal)
        np.testing.assert_allclose(steps, 2.0, atol=1e-9)

    def test_sudden_brake_speed_drop(self):
        spec = ScenarioSpec(
            kind="sudden_brake", noise_std=0.0, initial_speed=22.0, seed=5, brake_decel=5.0
        )
        tracks, rare = gen_scenario(spec)
        assert rare is True
        target = tracks[0]
        vel = np.diff(target.longitudinal) / DT
        drop = vel[:3].mean() - vel[-3:].mean()
        assert drop == pytest.approx(5.0 * BRAKE_DURATION, abs=1e-6)

    def test_brake_entirely_inside_future_window(self):
        for seed in range(10):
            spec = ScenarioSpec(kind="sudden_brake", noise_std=0.0, seed=seed)
            target = gen_scenario(spec)[0][0]
            vel = np.diff(target.longitudinal) / DT
            # speed still nominal at the prediction frame, reduced at the end
            assert vel[:29].std() < 1e-9
            assert vel[-1] < vel[0] - 5.0

    def test_cancelled_lane_change_bounded_excursion(self):
        spec = ScenarioSpec(kind="cancelled_lane_change", noise_std=0.0, seed=2)
        target = gen_scenario(spec)[0][0]
        excursion = np.abs(target.lateral - target.lateral[0])
        assert 0.9 < excursion.max() <= 1.5 + 1e-9
        assert excursion[-1] < 0.2  # returned to the original lane position

    def test_lane_change_moves_one_lane(self):
        spec = ScenarioSpec(kind="lane_change", noise_std=0.0, seed=4)
        target = gen_scenario(spec)[0][0]
        shift = abs(target.lateral[-1] - target.lateral[0])
        assert shift == pytest.approx(3.6, abs=0.5)

    def test_determinism(self):
        spec = ScenarioSpec(kind="exit_accelerate", seed=11)
        a, _ = gen_scenario(spec)
        b, _ = gen_scenario(spec)
        assert len(a) == len(b)
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.longitudinal, tb.longitudinal)
            np.testing.assert_array_equal(ta.lateral, tb.lateral)

    def test_neighbor_count(self):
        for seed in range(8):
            tracks, _ = gen_scenario(ScenarioSpec(kind="car_follow", seed=seed))
            assert 3 <= len(tracks) - 1 <= 8

    def test_tracks_pass_invariants(self):
        tracks, _ = gen_scenario(ScenarioSpec(kind="lane_change", seed=9))
        for t in tracks:
            t.validate()

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            gen_scenario(ScenarioSpec(kind="wheelie"))
        with pytest.raises(ValueError):
            gen_scenario(ScenarioSpec(kind="car_follow", duration=5.0))


class TestGenDataset:
    def test_rare_count_exact(self):
        data = gen_dataset(60, rare_rate=0.05, seed=1)
        assert sum(data.rare_flags.values()) == round(0.05 * 60)

    def test_rare_rate_extremes(self):
        assert not any(gen_dataset(10, 0.0, seed=0).rare_flags.values())
        assert all(gen_dataset(10, 1.0, seed=0).rare_flags.values())

    def test_one_example_per_target(self):
        data = gen_dataset(12, rare_rate=0.25, seed=3)
        examples = window_examples(data.tracks, stride=50)
        target_examples = [ex for ex in examples if ex.target_id in data.rare_flags]
        assert len(target_examples) == 12

    def test_scenarios_time_disjoint(self):
        data = gen_dataset(5, rare_rate=0.2, seed=4)
        spans = {}
        for t in data.tracks:
            base = t.vehicle_id // 100
            lo, hi = spans.get(base, (t.first_frame, t.last_frame))
            spans[base] = (min(lo, t.first_frame), max(hi, t.last_frame))
        ordered = [spans[k] for k in sorted(spans)]
        assert all(a[1] < b[0] for a, b in zip(ordered, ordered[1:]))

    def test_determinism(self):
        a = gen_dataset(8, 0.25, seed=9)
        b = gen_dataset(8, 0.25, seed=9)
        assert a.rare_flags == b.rare_flags
        for ta, tb in zip(a.tracks, b.tracks):
            np.testing.assert_array_equal(ta.longitudinal, tb.longitudinal)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            gen_dataset(10, 1.5, seed=0)


class TestRoundtrip:
    def test_csv_reingests_identically(self, tmp_path):
        data = gen_dataset(6, 0.5, seed=7)
        path = tmp_path / "tracks.csv"
        path.write_text(tracks_to_csv(data.tracks))
        tracks = ingest_csv(path, unit="meters")
        by_key = {(t.vehicle_id, t.first_frame): t for t in tracks}
        assert len(tracks) == len(data.tracks)
        for orig in data.tracks:
            back = by_key[(orig.vehicle_id, orig.first_frame)]
            np.testing.assert_array_equal(back.longitudinal, orig.longitudinal)
            np.testing.assert_array_equal(back.lateral, orig.lateral)
            np.testing.assert_array_equal(back.lane_ids, orig.lane_ids)

    def test_flags_json_roundtrip(self):
        flags = {101: True, 201: False, 301: True}
        assert flags_from_json(flags_to_json(flags)) == flags

    def test_rare_kinds_flagged(self):
        for kind in RARE_KINDS:
            _, rare = gen_scenario(ScenarioSpec(kind=kind, seed=0))
            assert rare
