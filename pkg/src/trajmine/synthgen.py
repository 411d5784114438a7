"""Synthetic highway traffic with controllable rates of rare maneuvers.

Each scenario is one target vehicle plus 3-8 constant-velocity neighbors on a
multi-lane road, sampled at 10 Hz with additive Gaussian position noise.
Common kinds are steady car following and completed lane changes; rare kinds
(cancelled lane change, sudden brake, accelerating exit) carry ground-truth
flags so mining enrichment can be measured against injected labels.

Scenarios in a dataset are separated in time (disjoint frame ranges), so
scene assignment never mixes vehicles from different scenarios.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data_model import DT, VehicleTrack

COMMON_KINDS = ("car_follow", "lane_change")
RARE_KINDS = ("cancelled_lane_change", "sudden_brake", "exit_accelerate")
ALL_KINDS = COMMON_KINDS + RARE_KINDS

LANE_WIDTH = 3.6
BRAKE_DURATION = 1.5
# frames of padding between consecutive scenarios' time ranges
SCENARIO_FRAME_GAP = 20


@dataclass
class ScenarioSpec:
    kind: str
    duration: float = 8.0
    lane_count: int = 4
    initial_speed: float = 20.0
    noise_std: float = 0.05
    seed: int = 0
    brake_decel: float | None = None  # None draws from [4, 6] m/s^2

    def validate(self) -> None:
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.duration < 8.0:
            raise ValueError("duration must be >= 8 s")
        if self.lane_count < 2:
            raise ValueError("lane_count must be >= 2")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass
class LabeledDataset:
    tracks: list[VehicleTrack]
    rare_flags: dict[int, bool]  # target vehicle_id -> injected-rare flag


def _lane_center(lane: int) -> float:
    return (lane - 0.5) * LANE_WIDTH


def _const_speed(t: np.ndarray, x0: float, v: float) -> np.ndarray:
    return x0 + v * t


def _brake_profile(t: np.ndarray, x0: float, v0: float, t_b: float, decel: float) -> np.ndarray:
    """Position under v0 until t_b, uniform decel for BRAKE_DURATION, then constant."""
    t_e = t_b + BRAKE_DURATION
    tau = np.clip(t - t_b, 0.0, BRAKE_DURATION)
    after = np.maximum(t - t_e, 0.0)
    return x0 + v0 * t - 0.5 * decel * tau ** 2 - decel * BRAKE_DURATION * after


def _accel_profile(t: np.ndarray, x0: float, v0: float, t_a: float, accel: float) -> np.ndarray:
    tau = np.maximum(t - t_a, 0.0)
    return x0 + v0 * t + 0.5 * accel * tau ** 2


def _sigmoid_shift(t: np.ndarray, t_c: float, amplitude: float, tau: float = 0.45) -> np.ndarray:
    return amplitude / (1.0 + np.exp(-(t - t_c) / tau))


def _bump_shift(t: np.ndarray, t_c: float, amplitude: float, width: float = 0.9) -> np.ndarray:
    return amplitude * np.exp(-(((t - t_c) / width) ** 2))


def _track(vehicle_id, start_frame, lat, lon, lane_count):
    n = lat.shape[0]
    frames = np.arange(start_frame, start_frame + n, dtype=np.int64)
    lanes = np.clip(np.floor(lat / LANE_WIDTH).astype(np.int64) + 1, 1, lane_count)
    return VehicleTrack(
        vehicle_id=vehicle_id,
        times=frames * DT,
        lateral=lat,
        longitudinal=lon,
        lane_ids=lanes,
    )


def gen_scenario(spec: ScenarioSpec, start_frame: int = 0, id_base: int = 0):
    """Generate one scenario; returns (tracks, rare_flag). Deterministic per seed.

    The target always has a same-lane leader; remaining neighbors are
    constant-velocity traffic in random lanes. All vehicles cover the full
    duration, so scene factors can be present across a whole example window.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = int(round(spec.duration / DT))
    t = np.arange(n) * DT
    v0 = spec.initial_speed
    rare = spec.kind in RARE_KINDS

    lane = int(rng.integers(2, spec.lane_count)) if spec.lane_count > 2 else 1
    lat0 = _lane_center(lane)
    x0 = 100.0

    # target maneuver
    lat = np.full(n, lat0)
    if spec.kind == "car_follow":
        lon = _const_speed(t, x0, v0)
        headway = rng.uniform(1.2, 2.0)
    elif spec.kind == "lane_change":
        headway = rng.uniform(1.2, 2.0)
        direction = _pick_direction(rng, lane, spec.lane_count)
        t_c = rng.uniform(2.0, 5.5)
        lat = lat0 + _sigmoid_shift(t, t_c, direction * LANE_WIDTH)
        lon = _const_speed(t, x0, v0)
    elif spec.kind == "cancelled_lane_change":
        headway = rng.uniform(1.2, 2.0)
        direction = _pick_direction(rng, lane, spec.lane_count)
        t_c = rng.uniform(3.8, 5.5)
        lat = lat0 + _bump_shift(t, t_c, direction * rng.uniform(1.0, 1.5))
        lon = _const_speed(t, x0, v0)
    elif spec.kind == "sudden_brake":
        headway = rng.uniform(1.2, 2.0)
        decel = spec.brake_decel if spec.brake_decel is not None else rng.uniform(4.0, 6.0)
        t_b = rng.uniform(3.2, 5.5)
        lon = _brake_profile(t, x0, v0, t_b, decel)
    else:  # exit_accelerate
        headway = rng.uniform(1.5, 2.0)
        direction = 1 if lane < spec.lane_count else -1
        t_c = rng.uniform(3.0, 4.5)
        lat = lat0 + _sigmoid_shift(t, t_c, direction * LANE_WIDTH)
        lon = _accel_profile(t, x0, v0, t_c - 0.5, 2.0)

    tracks = []
    noisy = lambda arr: arr + rng.normal(0.0, spec.noise_std, n) if spec.noise_std else arr
    tracks.append(_track(id_base + 1, start_frame, noisy(lat), noisy(lon), spec.lane_count))

    # leader in the target's start lane; causes the brake in sudden_brake
    gap0 = v0 * headway
    if spec.kind == "sudden_brake":
        leader_lon = _brake_profile(t, x0 + gap0, v0, max(t_b - 0.5, 0.1), decel)
    else:
        leader_lon = _const_speed(t, x0 + gap0, v0)
    leader_lat = np.full(n, lat0)
    tracks.append(_track(id_base + 2, start_frame, noisy(leader_lat), noisy(leader_lon), spec.lane_count))

    n_others = int(rng.integers(2, 8))  # 3..8 neighbors including the leader
    for j in range(n_others):
        other_lane = int(rng.integers(1, spec.lane_count + 1))
        offset = rng.uniform(12.0, 55.0) * (1 if rng.random() < 0.5 else -1)
        if other_lane == lane and offset > 0:
            offset += gap0 + 15.0  # keep the leader the nearest same-lane vehicle ahead
        speed = v0 + rng.uniform(-2.5, 2.5)
        o_lat = np.full(n, _lane_center(other_lane))
        o_lon = _const_speed(t, x0 + offset, speed)
        tracks.append(_track(id_base + 3 + j, start_frame, noisy(o_lat), noisy(o_lon), spec.lane_count))

    return tracks, rare


def _pick_direction(rng, lane: int, lane_count: int) -> int:
    options = []
    if lane > 1:
        options.append(-1)
    if lane < lane_count:
        options.append(1)
    return int(options[rng.integers(len(options))])


def gen_dataset(n_examples: int, rare_rate: float, seed: int,
                noise_std: float = 0.05, lane_count: int = 4) -> LabeledDataset:
    """Generate n_examples single-example scenarios, round(rare_rate*n) rare."""
    if not 0.0 <= rare_rate <= 1.0:
        raise ValueError("rare_rate must be in [0, 1]")
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    master = np.random.default_rng(seed)
    child_seeds = np.random.SeedSequence(seed).generate_state(n_examples)
    n_rare = int(round(rare_rate * n_examples))
    rare_slots = np.zeros(n_examples, dtype=bool)
    rare_slots[master.permutation(n_examples)[:n_rare]] = True

    frames_per_scenario = int(round(8.0 / DT)) + SCENARIO_FRAME_GAP
    tracks: list[VehicleTrack] = []
    flags: dict[int, bool] = {}
    for i in range(n_examples):
        if rare_slots[i]:
            kind = RARE_KINDS[master.integers(len(RARE_KINDS))]
        else:
            kind = COMMON_KINDS[master.integers(len(COMMON_KINDS))]
        spec = ScenarioSpec(
            kind=kind,
            duration=8.0,
            lane_count=lane_count,
            initial_speed=float(master.uniform(18.0, 28.0)),
            noise_std=noise_std,
            seed=int(child_seeds[i]),
        )
        scen_tracks, rare = gen_scenario(
            spec, start_frame=i * frames_per_scenario, id_base=i * 100
        )
        tracks.extend(scen_tracks)
        flags[scen_tracks[0].vehicle_id] = rare
    return LabeledDataset(tracks=tracks, rare_flags=flags)


def tracks_to_csv(tracks: list[VehicleTrack]) -> str:
    """Emit the CSV schema `ingest_csv` reads (meters, 10 Hz frames)."""
    lines = ["Vehicle_ID,Frame_ID,Local_X,Local_Y,Lane_ID"]
    for track in sorted(tracks, key=lambda t: (t.vehicle_id, t.first_frame)):
        frames = track.frames
        for i in range(len(track)):
            lines.append(
                f"{track.vehicle_id},{frames[i]},{float(track.lateral[i])!r},"
                f"{float(track.longitudinal[i])!r},{track.lane_ids[i]}"
            )
    return "\n".join(lines) + "\n"


def flags_to_json(flags: dict[int, bool]) -> str:
    return json.dumps({str(k): bool(v) for k, v in sorted(flags.items())}, sort_keys=True, indent=0)


def flags_from_json(text: str) -> dict[int, bool]:
    return {int(k): bool(v) for k, v in json.loads(text).items()}
