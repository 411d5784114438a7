"""CSV ingestion, example windowing, and dataset splitting."""

import numpy as np
import pytest

from trajmine.data_model import (
    DT,
    FUTURE_FRAMES,
    HISTORY_FRAMES,
    VehicleTrack,
    examples_from_jsonl,
    examples_to_jsonl,
    ingest_csv,
    split_dataset,
    window_examples,
)
from trajmine.errors import DataError, SchemaError

HEADER = "Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID\n"


def write_csv(tmp_path, rows, header=HEADER):
    path = tmp_path / "tracks.csv"
    path.write_text(header + "".join(rows))
    return path


def make_track(vehicle_id=1, n=80, speed=20.0, start_frame=0, lane=2, lat=5.4):
    frames = np.arange(start_frame, start_frame + n)
    return VehicleTrack(
        vehicle_id=vehicle_id,
        times=frames * DT,
        lateral=np.full(n, lat),
        longitudinal=100.0 + speed * frames * DT,
        lane_ids=np.full(n, lane, dtype=np.int64),
    )


class TestIngest:
    def test_two_rows_meters(self, tmp_path):
        path = write_csv(tmp_path, ["7,100,6.0,100.0,2\n", "7,101,6.0,101.0,2\n"])
        tracks = ingest_csv(path, unit="meters")
        assert len(tracks) == 1
        track = tracks[0]
        assert track.vehicle_id == 7 and len(track) == 2
        assert track.times[1] - track.times[0] == pytest.approx(DT, rel=1e-12)
        np.testing.assert_allclose(track.longitudinal, [100.0, 101.0])

    def test_feet_conversion(self, tmp_path):
        path = write_csv(tmp_path, ["7,100,6.0,100.0,2\n", "7,101,6.0,101.0,2\n"])
        track = ingest_csv(path, unit="feet")[0]
        np.testing.assert_allclose(track.longitudinal, [30.48, 30.7848], atol=1e-12)

    def test_duplicate_frame_names_vehicle(self, tmp_path):
        path = write_csv(tmp_path, ["9,100,6.0,100.0,2\n", "9,100,6.0,101.0,2\n"])
        with pytest.raises(DataError, match="vehicle 9"):
            ingest_csv(path)

    def test_decreasing_frame_names_vehicle(self, tmp_path):
        path = write_csv(tmp_path, ["3,101,6.0,100.0,2\n", "3,100,6.0,101.0,2\n"])
        with pytest.raises(DataError, match="vehicle 3"):
            ingest_csv(path)

    def test_missing_column_is_schema_error(self, tmp_path):
        path = write_csv(tmp_path, ["7,100,6.0,2\n"], header="Vehicle_ID,Frame_ID,Local_X,Lane_ID\n")
        with pytest.raises(SchemaError, match="Local_Y"):
            ingest_csv(path)

    def test_nonfinite_rows_rejected_and_reported(self, tmp_path, caplog):
        path = write_csv(
            tmp_path,
            ["7,100,6.0,100.0,2\n", "7,101,nan,101.0,2\n", "7,102,6.0,102.0,2\n"],
        )
        with caplog.at_level("WARNING"):
            tracks = ingest_csv(path)
        assert "row" in caplog.text.lower() and "3" in caplog.text
        # the surviving rows have a frame gap, so the track splits in two
        assert [len(t) for t in tracks] == [1, 1]

    def test_gap_splits_track(self, tmp_path):
        path = write_csv(
            tmp_path,
            ["7,100,6.0,100.0,2\n", "7,101,6.0,101.0,2\n", "7,105,6.0,105.0,2\n"],
        )
        tracks = ingest_csv(path)
        assert [len(t) for t in tracks] == [2, 1]
        assert all(t.vehicle_id == 7 for t in tracks)
        for t in tracks:
            t.validate()

    def test_bad_unit(self, tmp_path):
        path = write_csv(tmp_path, ["7,100,6.0,100.0,2\n"])
        with pytest.raises(ValueError):
            ingest_csv(path, unit="furlongs")


class TestWindowing:
    def test_exact_80_frames_single_example(self):
        examples = window_examples([make_track(n=80)], stride=1)
        assert len(examples) == 1
        ex = examples[0]
        # T sits at the 30th frame (index 29)
        assert ex.frame_pred == 29
        assert len(ex.history) == HISTORY_FRAMES and len(ex.future) == FUTURE_FRAMES
        ex.validate()

    def test_90_frames_stride_10_matches_enumeration(self):
        track = make_track(n=90)
        examples = window_examples([track], stride=10)
        # oracle: enumerate admissible prediction indices by hand
        admissible = [
            i for i in range(0, 90, 1)
            if i >= HISTORY_FRAMES - 1 and i + FUTURE_FRAMES <= 89
        ]
        expected = admissible[::10]
        assert [ex.frame_pred for ex in examples] == expected
        assert len(examples) == 2

    def test_79_frames_yields_nothing(self):
        assert window_examples([make_track(n=79)], stride=1) == []

    def test_stride_spacing(self):
        examples = window_examples([make_track(n=200)], stride=7)
        frames = [ex.frame_pred for ex in examples]
        assert all(b - a == 7 for a, b in zip(frames, frames[1:]))

    def test_scene_ids_require_window_overlap(self):
        target = make_track(vehicle_id=1, n=80)
        overlapping = make_track(vehicle_id=2, n=10, start_frame=75)
        disjoint = make_track(vehicle_id=3, n=10, start_frame=90)
        examples = window_examples([target, overlapping, disjoint], stride=1)
        assert examples[0].scene_ids == (2,)

    def test_all_examples_satisfy_invariants(self):
        tracks = [make_track(vehicle_id=i, n=80 + 13 * i) for i in range(1, 5)]
        for ex in window_examples(tracks, stride=3):
            ex.validate()

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            window_examples([make_track()], stride=0)


class TestSplit:
    def test_cardinality_and_disjointness(self):
        split = split_dataset(10, 0.2, seed=1)
        assert len(split.eval_indices) == 2 and len(split.train_indices) == 8
        assert not set(split.eval_indices) & set(split.train_indices)

    def test_determinism(self):
        a = split_dataset(100, 0.3, seed=7)
        b = split_dataset(100, 0.3, seed=7)
        np.testing.assert_array_equal(a.eval_indices, b.eval_indices)
        np.testing.assert_array_equal(a.train_indices, b.train_indices)

    def test_2000_quarter(self):
        split = split_dataset(2000, 0.25, seed=0)
        assert len(split.eval_indices) == 500 and len(split.train_indices) == 1500

    def test_bad_fraction(self):
        for frac in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                split_dataset(10, frac, seed=0)

    def test_too_few_examples(self):
        with pytest.raises(ValueError):
            split_dataset(1, 0.5, seed=0)


class TestSerialization:
    def test_roundtrip(self):
        examples = window_examples([make_track(n=90), make_track(vehicle_id=2, n=85)], stride=10)
        text = examples_to_jsonl(examples, meta={"config_hash": "h1"})
        loaded, meta = examples_from_jsonl(text)
        assert meta["config_hash"] == "h1"
        assert len(loaded) == len(examples)
        for a, b in zip(examples, loaded):
            assert a.target_id == b.target_id and a.t_pred == b.t_pred
            np.testing.assert_array_equal(a.history.longitudinal, b.history.longitudinal)
            np.testing.assert_array_equal(a.future.times, b.future.times)
            assert a.scene_ids == b.scene_ids

    def test_ingest_window_serialize_deterministic(self, tmp_path):
        rows = [f"7,{100 + i},6.0,{100.0 + 2.0 * i},2\n" for i in range(90)]
        rows += [f"8,{120 + i},9.0,{80.0 + 1.9 * i},3\n" for i in range(85)]
        path = write_csv(tmp_path, rows)
        texts = []
        for _ in range(2):
            examples = window_examples(ingest_csv(path), stride=10)
            texts.append(examples_to_jsonl(examples))
        assert texts[0] == texts[1]

    def test_reject_garbage(self):
        with pytest.raises(DataError):
            examples_from_jsonl('{"kind": "something-else"}\n')
