"""Trajectory records, NGSIM-style CSV ingestion, and example windowing.

All internal units are meters and seconds at a fixed 10 Hz frame rate. A
prediction example is a 30-frame history window ending at the prediction
time T (inclusive) plus the 50 future frames, 80 frames = 8 s total.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, SchemaError

logger = logging.getLogger(__name__)

FRAME_RATE = 10.0
DT = 1.0 / FRAME_RATE
HISTORY_FRAMES = 30
FUTURE_FRAMES = 50
EXAMPLE_FRAMES = HISTORY_FRAMES + FUTURE_FRAMES
FEET_TO_METERS = 0.3048

CSV_COLUMNS = ("Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "Lane_ID")


@dataclass(frozen=True)
class TrajectoryPoint:
    time: float
    lateral_pos: float
    longitudinal_pos: float
    lane_id: int


@dataclass
class VehicleTrack:
    """Contiguous 10 Hz samples of one vehicle (gap-free by construction)."""

    vehicle_id: int
    times: np.ndarray
    lateral: np.ndarray
    longitudinal: np.ndarray
    lane_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def frames(self) -> np.ndarray:
        """Integer frame indices (time / 0.1 s, rounded)."""
        return np.round(self.times * FRAME_RATE).astype(np.int64)

    @property
    def first_frame(self) -> int:
        return int(round(self.times[0] * FRAME_RATE))

    @property
    def last_frame(self) -> int:
        return int(round(self.times[-1] * FRAME_RATE))

    def point(self, i: int) -> TrajectoryPoint:
        return TrajectoryPoint(
            time=float(self.times[i]),
            lateral_pos=float(self.lateral[i]),
            longitudinal_pos=float(self.longitudinal[i]),
            lane_id=int(self.lane_ids[i]),
        )

    @property
    def points(self) -> list[TrajectoryPoint]:
        return [self.point(i) for i in range(len(self))]

    def slice(self, start: int, stop: int) -> "VehicleTrack":
        return VehicleTrack(
            vehicle_id=self.vehicle_id,
            times=self.times[start:stop],
            lateral=self.lateral[start:stop],
            longitudinal=self.longitudinal[start:stop],
            lane_ids=self.lane_ids[start:stop],
        )

    def validate(self) -> None:
        if len(self) == 0:
            raise DataError(f"vehicle {self.vehicle_id}: empty track")
        if not (np.all(np.isfinite(self.lateral)) and np.all(np.isfinite(self.longitudinal))):
            raise DataError(f"vehicle {self.vehicle_id}: non-finite positions")
        steps = np.diff(self.times)
        if len(self) > 1 and not np.allclose(steps, DT, atol=1e-9):
            raise DataError(
                f"vehicle {self.vehicle_id}: time steps are not a constant {DT} s"
            )


@dataclass
class Example:
    """One prediction instance: 30-frame history through T, 50-frame future."""

    target_id: int
    t_pred: float
    history: VehicleTrack
    future: VehicleTrack
    scene_ids: tuple[int, ...]

    @property
    def frame_pred(self) -> int:
        return int(round(self.t_pred * FRAME_RATE))

    @property
    def window_frames(self) -> tuple[int, int]:
        """Inclusive frame span of the full 8 s window."""
        f = self.frame_pred
        return f - (HISTORY_FRAMES - 1), f + FUTURE_FRAMES

    def validate(self) -> None:
        if len(self.history) != HISTORY_FRAMES:
            raise DataError(f"history has {len(self.history)} frames, expected {HISTORY_FRAMES}")
        if len(self.future) != FUTURE_FRAMES:
            raise DataError(f"future has {len(self.future)} frames, expected {FUTURE_FRAMES}")
        if self.history.vehicle_id != self.target_id or self.future.vehicle_id != self.target_id:
            raise DataError("history/future do not belong to the target vehicle")
        if not math.isclose(self.history.times[-1], self.t_pred, abs_tol=1e-9):
            raise DataError("history must end exactly at the prediction time")
        self.history.validate()
        self.future.validate()


@dataclass
class DatasetSplit:
    train_indices: np.ndarray
    eval_indices: np.ndarray


def ingest_csv(path, unit: str = "meters") -> list[VehicleTrack]:
    """Read an NGSIM-shaped CSV into per-vehicle tracks.

    Requires columns Vehicle_ID, Frame_ID, Local_X, Local_Y, Lane_ID with
    Frame_ID at 10 Hz. Rows with non-finite values are rejected (row numbers
    logged); Frame_ID must be strictly increasing within each vehicle; frame
    gaps split a vehicle into maximal contiguous sub-tracks.
    """
    if unit not in ("meters", "feet"):
        raise ValueError(f"unit must be 'meters' or 'feet', got {unit!r}")
    scale = FEET_TO_METERS if unit == "feet" else 1.0

    per_vehicle: dict[int, list[tuple[int, float, float, int]]] = {}
    rejected: list[int] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [c.strip() for c in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing required column(s) {missing}")
        idx = {c: header.index(c) for c in CSV_COLUMNS}

        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                veh = int(float(row[idx["Vehicle_ID"]]))
                frame = int(float(row[idx["Frame_ID"]]))
                x = float(row[idx["Local_X"]])
                y = float(row[idx["Local_Y"]])
                lane = int(float(row[idx["Lane_ID"]]))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: row {row_no}: unparsable value ({exc})") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                rejected.append(row_no)
                continue
            rows = per_vehicle.setdefault(veh, [])
            if rows and frame <= rows[-1][0]:
                raise DataError(
                    f"{path}: vehicle {veh}: Frame_ID not strictly increasing "
                    f"at row {row_no} (frame {frame} after {rows[-1][0]})"
                )
            rows.append((frame, x, y, lane))

    if rejected:
        shown = ", ".join(str(r) for r in rejected[:20])
        more = "" if len(rejected) <= 20 else f" (+{len(rejected) - 20} more)"
        logger.warning("%s: rejected %d non-finite row(s): %s%s", path, len(rejected), shown, more)

    tracks: list[VehicleTrack] = []
    for veh in sorted(per_vehicle):
        rows = per_vehicle[veh]
        frames = np.array([r[0] for r in rows], dtype=np.int64)
        # split at frame gaps into maximal contiguous runs
        cuts = np.nonzero(np.diff(frames) != 1)[0] + 1
        for chunk in np.split(np.arange(len(rows)), cuts):
            sel = [rows[i] for i in chunk]
            tracks.append(
                VehicleTrack(
                    vehicle_id=veh,
                    times=np.array([r[0] for r in sel], dtype=np.float64) * DT,
                    lateral=np.array([r[1] for r in sel]) * scale,
                    longitudinal=np.array([r[2] for r in sel]) * scale,
                    lane_ids=np.array([r[3] for r in sel], dtype=np.int64),
                )
            )
    return tracks


def window_examples(tracks: list[VehicleTrack], stride: int = 50) -> list[Example]:
    """Slice every track into examples at every admissible prediction time.

    T is admissible when the target has a full 30-frame history ending at T
    and a 50-frame future; consecutive T for one track are `stride` frames
    apart. scene_ids collects all other vehicle ids overlapping the 8 s window.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ids = np.array([t.vehicle_id for t in tracks], dtype=np.int64)
    starts = np.array([t.first_frame for t in tracks], dtype=np.int64)
    ends = np.array([t.last_frame for t in tracks], dtype=np.int64)

    examples = []
    for k, track in enumerate(tracks):
        n = len(track)
        for i in range(HISTORY_FRAMES - 1, n - FUTURE_FRAMES, stride):
            f_pred = track.first_frame + i
            wa, wb = f_pred - (HISTORY_FRAMES - 1), f_pred + FUTURE_FRAMES
            overlap = (starts <= wb) & (ends >= wa) & (ids != track.vehicle_id)
            examples.append(
                Example(
                    target_id=track.vehicle_id,
                    t_pred=float(track.times[i]),
                    history=track.slice(i - (HISTORY_FRAMES - 1), i + 1),
                    future=track.slice(i + 1, i + 1 + FUTURE_FRAMES),
                    scene_ids=tuple(sorted(set(ids[overlap].tolist()))),
                )
            )
    return examples


def split_dataset(n_examples: int, eval_fraction: float, seed: int) -> DatasetSplit:
    """Seed-deterministic disjoint train/eval index split with |eval| = round(f*n)."""
    if n_examples < 2:
        raise ValueError("need at least 2 examples to split")
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError("eval_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_examples)
    n_eval = int(round(eval_fraction * n_examples))
    return DatasetSplit(
        train_indices=np.sort(perm[n_eval:]),
        eval_indices=np.sort(perm[:n_eval]),
    )


def _track_record(track: VehicleTrack) -> dict:
    return {
        "times": track.times.tolist(),
        "lat": track.lateral.tolist(),
        "lon": track.longitudinal.tolist(),
        "lane": track.lane_ids.tolist(),
    }


def _track_from_record(vehicle_id: int, rec: dict) -> VehicleTrack:
    return VehicleTrack(
        vehicle_id=vehicle_id,
        times=np.asarray(rec["times"], dtype=np.float64),
        lateral=np.asarray(rec["lat"], dtype=np.float64),
        longitudinal=np.asarray(rec["lon"], dtype=np.float64),
        lane_ids=np.asarray(rec["lane"], dtype=np.int64),
    )


def examples_to_jsonl(examples: list[Example], meta: dict | None = None) -> str:
    """Serialize examples as line-delimited JSON; first line is a meta record."""
    lines = [json.dumps({"kind": "trajmine-examples", **(meta or {})}, sort_keys=True)]
    for ex in examples:
        lines.append(
            json.dumps(
                {
                    "target_id": ex.target_id,
                    "t_pred": ex.t_pred,
                    "history": _track_record(ex.history),
                    "future": _track_record(ex.future),
                    "scene_ids": list(ex.scene_ids),
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + "\n"


def examples_from_jsonl(text: str) -> tuple[list[Example], dict]:
    lines = text.splitlines()
    if not lines:
        raise DataError("empty example file")
    meta = json.loads(lines[0])
    if meta.get("kind") != "trajmine-examples":
        raise DataError("not an example file (missing meta record)")
    examples = []
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        examples.append(
            Example(
                target_id=rec["target_id"],
                t_pred=rec["t_pred"],
                history=_track_from_record(rec["target_id"], rec["history"]),
                future=_track_from_record(rec["target_id"], rec["future"]),
                scene_ids=tuple(rec["scene_ids"]),
            )
        )
    return examples, meta
