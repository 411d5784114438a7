"""Scene factor assignment, window partitioning, and per-segment feature extraction.

An example's window (history-only "X", 3 s, or full trajectory "Z", 8 s) is
tiled into M segments; each segment contributes 26 values: lateral and
longitudinal velocity and acceleration for the target (TV), its left-front
(LF), center-front (CF), right-front (RF) neighbors and the average of the
remaining scene vehicles (OT), longitudinal gaps TV->LF/CF/RF, and
longitudinal relative velocities TV-LF/CF/RF. Concatenation gives a 26*M
vector.

Missing factors are imputed (velocity <- TV's, acceleration <- 0, gap <- 200 m,
relative velocity <- 0) and flagged in a per-dimension mask; standardization
rewrites imputed entries to exactly zero so they stay density-neutral.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .data_model import DT, FRAME_RATE, Example, VehicleTrack
from .errors import DataError
from .standardize import (  # noqa: F401  (re-exported module surface)
    STD_FLOOR,
    Standardizer,
    apply_standardizer,
    fit_standardizer,
)

SCOPE_HISTORY = "X"  # 3 s history window ending at T
SCOPE_FULL = "Z"  # full 8 s window
SCOPE_LENGTH_S = {SCOPE_HISTORY: 3.0, SCOPE_FULL: 8.0}

OT_RADIUS_M = 60.0
GAP_SENTINEL_M = 200.0
N_SEGMENT_FEATURES = 26

FEAT_MAGIC = b"TRAJMINE-FEAT-1\n"

_FACTOR_SLOTS = ("lf", "cf", "rf")
FEATURE_NAMES = (
    [f"{who}_vel_{ax}" for who in ("tv", "lf", "cf", "rf", "ot") for ax in ("lat", "lon")]
    + [f"{who}_acc_{ax}" for who in ("tv", "lf", "cf", "rf", "ot") for ax in ("lat", "lon")]
    + [f"gap_{who}" for who in _FACTOR_SLOTS]
    + [f"relvel_{who}" for who in _FACTOR_SLOTS]
)


@dataclass
class PartitionScheme:
    mode: str  # "fixsegnum" or "fixseglen"
    kappa: float

    def validate(self) -> None:
        if self.mode not in ("fixsegnum", "fixseglen"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        if self.mode == "fixsegnum":
            if self.kappa < 1 or self.kappa != int(self.kappa):
                raise ValueError("fixsegnum kappa must be a positive integer")
        elif self.kappa <= 0:
            raise ValueError("fixseglen kappa must be > 0 seconds")

    @classmethod
    def parse(cls, text: str) -> "PartitionScheme":
        """Parse 'fixsegnum:5' / 'fixseglen:1.4' (as used by config and CLI)."""
        try:
            mode, kappa = text.lower().split(":")
            scheme = cls(mode=mode.strip(), kappa=float(kappa))
        except ValueError:
            raise ValueError(
                f"bad partition scheme {text!r}, expected e.g. 'fixsegnum:5'"
            ) from None
        scheme.validate()
        return scheme

    @property
    def tag(self) -> str:
        kappa = int(self.kappa) if self.kappa == int(self.kappa) else self.kappa
        return f"{self.mode}_{kappa}"


@dataclass
class SceneFactors:
    """Factor vehicles fixed at the prediction time for the whole example."""

    lf_id: int | None
    cf_id: int | None
    rf_id: int | None
    ot_ids: tuple[int, ...]

    def slot_id(self, slot: str) -> int | None:
        return {"lf": self.lf_id, "cf": self.cf_id, "rf": self.rf_id}[slot]


@dataclass
class SegmentFeatures:
    values: np.ndarray  # (26,)
    mask: np.ndarray  # (26,) bool, False where imputed


@dataclass
class FeatureVector:
    scope: str
    values: np.ndarray  # (26*M,)
    mask: np.ndarray  # (26*M,) bool


@dataclass
class FeatureMatrix:
    """Stacked raw (unstandardized) feature vectors for a dataset."""

    values: np.ndarray  # (n, 26*M)
    mask: np.ndarray  # (n, 26*M) bool
    scope: str
    scheme: PartitionScheme
    n_segments: int
    config_hash: str = ""

    @property
    def dim_names(self) -> list[str]:
        return [f"s{j}.{name}" for j in range(self.n_segments) for name in FEATURE_NAMES]


class TrackIndex:
    """Frame-indexed lookup over (possibly gap-split) vehicle tracks."""

    def __init__(self, tracks: list[VehicleTrack]):
        self._by_id: dict[int, list[VehicleTrack]] = {}
        for track in tracks:
            self._by_id.setdefault(track.vehicle_id, []).append(track)
        for runs in self._by_id.values():
            runs.sort(key=lambda t: t.first_frame)

    def covering(self, vehicle_id: int, first: int, last: int) -> VehicleTrack | None:
        """The contiguous run containing every frame in [first, last], if any."""
        for track in self._by_id.get(vehicle_id, ()):
            if track.first_frame <= first and track.last_frame >= last:
                return track
        return None

    def at(self, vehicle_id: int, frame: int):
        """(lateral, longitudinal, lane) at a frame, or None if absent."""
        for track in self._by_id.get(vehicle_id, ()):
            if track.first_frame <= frame <= track.last_frame:
                i = frame - track.first_frame
                return float(track.lateral[i]), float(track.longitudinal[i]), int(track.lane_ids[i])
        return None

    def window_slice(self, vehicle_id: int, first: int, last: int):
        """Largest covered sub-span of [first, last]: (offset, lat, lon) or None."""
        best = None
        for track in self._by_id.get(vehicle_id, ()):
            a = max(first, track.first_frame)
            b = min(last, track.last_frame)
            if b >= a and (best is None or b - a > best[0]):
                i = a - track.first_frame
                n = b - a + 1
                best = (b - a, a - first, track.lateral[i : i + n], track.longitudinal[i : i + n])
        if best is None:
            return None
        return best[1], best[2], best[3]


def _as_index(tracks) -> TrackIndex:
    return tracks if isinstance(tracks, TrackIndex) else TrackIndex(tracks)


def assign_scene_factors(example: Example, tracks) -> SceneFactors:
    """Pick LF/CF/RF as the nearest vehicles strictly ahead at time T in the
    adjacent-left, same, and adjacent-right lanes; a factor must additionally
    be present over the example's full window, else it is absent. OT is every
    other scene vehicle within +-60 m longitudinally at T.
    """
    index = _as_index(tracks)
    f_pred = example.frame_pred
    first, last = example.window_frames
    tv_lon = float(example.history.longitudinal[-1])
    tv_lane = int(example.history.lane_ids[-1])

    nearest: dict[str, tuple[float, int]] = {}
    lane_of_slot = {"lf": tv_lane - 1, "cf": tv_lane, "rf": tv_lane + 1}
    present_at_t: dict[int, float] = {}
    for vid in example.scene_ids:
        if vid == example.target_id:
            continue
        state = index.at(vid, f_pred)
        if state is None:
            continue
        _, lon, lane = state
        present_at_t[vid] = lon
        if lon <= tv_lon:
            continue
        gap = lon - tv_lon
        for slot, slot_lane in lane_of_slot.items():
            if lane == slot_lane:
                if slot not in nearest or (gap, vid) < nearest[slot]:
                    nearest[slot] = (gap, vid)

    assigned: dict[str, int | None] = {}
    for slot in _FACTOR_SLOTS:
        vid = nearest.get(slot, (None, None))[1]
        if vid is not None and index.covering(vid, first, last) is None:
            vid = None
        assigned[slot] = vid

    taken = {v for v in assigned.values() if v is not None}
    ot = tuple(
        sorted(
            vid
            for vid, lon in present_at_t.items()
            if vid not in taken and abs(lon - tv_lon) <= OT_RADIUS_M
        )
    )
    return SceneFactors(lf_id=assigned["lf"], cf_id=assigned["cf"], rf_id=assigned["rf"], ot_ids=ot)


def partition(window_length_s: float, scheme: PartitionScheme) -> list[tuple[int, int]]:
    """Tile the window into ordered, non-overlapping frame ranges [start, end).

    fixsegnum(k): k segments with frame counts differing by at most one.
    fixseglen(k): ceil(T/k) segments of k seconds, last truncated to the
    remainder. Raises when kappa exceeds the window.
    """
    scheme.validate()
    n_frames = int(round(window_length_s * FRAME_RATE))
    if scheme.mode == "fixsegnum":
        m = int(scheme.kappa)
        if m > n_frames:
            raise ValueError(f"fixsegnum kappa {m} exceeds frame count {n_frames}")
        base, rem = divmod(n_frames, m)
        ranges = []
        start = 0
        for j in range(m):
            size = base + (1 if j < rem else 0)
            ranges.append((start, start + size))
            start += size
        return ranges
    if scheme.kappa > window_length_s:
        raise ValueError(
            f"fixseglen kappa {scheme.kappa} s exceeds the {window_length_s} s window"
        )
    ranges = []
    start = 0
    j = 1
    while start < n_frames:
        end = min(int(round(j * scheme.kappa * FRAME_RATE)), n_frames)
        ranges.append((start, end))
        start = end
        j += 1
    return ranges


def n_segments(scope: str, scheme: PartitionScheme) -> int:
    return len(partition(SCOPE_LENGTH_S[scope], scheme))


def _derivatives(lat: np.ndarray, lon: np.ndarray):
    """Per-frame velocity/acceleration: central differences, one-sided at edges."""
    vlat = np.gradient(lat, DT)
    vlon = np.gradient(lon, DT)
    alat = np.gradient(vlat, DT)
    alon = np.gradient(vlon, DT)
    return vlat, vlon, alat, alon


class _WindowData:
    """Per-frame kinematics of TV, factors, and OT vehicles over one scope window."""

    def __init__(self, example: Example, factors: SceneFactors, index: TrackIndex, scope: str):
        if scope not in SCOPE_LENGTH_S:
            raise ValueError(f"scope must be one of {sorted(SCOPE_LENGTH_S)}, got {scope!r}")
        if scope == SCOPE_HISTORY:
            lat = example.history.lateral
            lon = example.history.longitudinal
            first = example.window_frames[0]
            last = example.frame_pred
        else:
            lat = np.concatenate([example.history.lateral, example.future.lateral])
            lon = np.concatenate([example.history.longitudinal, example.future.longitudinal])
            first, last = example.window_frames
        self.n = lat.shape[0]
        self.tv_lon = lon
        self.tv = _derivatives(lat, lon)

        self.factor: dict[str, tuple | None] = {}
        for slot in _FACTOR_SLOTS:
            vid = factors.slot_id(slot)
            if vid is None:
                self.factor[slot] = None
                continue
            track = index.covering(vid, first, last)
            if track is None:  # factor assigned on the full window; scope is a sub-span
                self.factor[slot] = None
                continue
            i = first - track.first_frame
            f_lat = track.lateral[i : i + self.n]
            f_lon = track.longitudinal[i : i + self.n]
            self.factor[slot] = (f_lon, *_derivatives(f_lat, f_lon))

        self.others = []
        for vid in factors.ot_ids:
            sl = index.window_slice(vid, first, last)
            if sl is None:
                continue
            offset, o_lat, o_lon = sl
            if o_lat.shape[0] < 2:  # can't difference a single sample
                continue
            self.others.append((offset, _derivatives(o_lat, o_lon)))


def _segment_row(win: _WindowData, start: int, end: int):
    values = np.empty(N_SEGMENT_FEATURES)
    mask = np.ones(N_SEGMENT_FEATURES, dtype=bool)
    sl = slice(start, end)
    tv_vlat, tv_vlon, tv_alat, tv_alon = (a[sl].mean() for a in win.tv)
    values[0], values[1] = tv_vlat, tv_vlon
    values[10], values[11] = tv_alat, tv_alon

    for k, slot in enumerate(_FACTOR_SLOTS):
        vel_cols = (2 + 2 * k, 3 + 2 * k)
        acc_cols = (12 + 2 * k, 13 + 2 * k)
        gap_col = 20 + k
        rel_col = 23 + k
        data = win.factor[slot]
        if data is None:
            values[vel_cols[0]], values[vel_cols[1]] = tv_vlat, tv_vlon
            values[acc_cols[0]] = values[acc_cols[1]] = 0.0
            values[gap_col] = GAP_SENTINEL_M
            values[rel_col] = 0.0
            for col in (*vel_cols, *acc_cols, gap_col, rel_col):
                mask[col] = False
            continue
        f_lon, f_vlat, f_vlon, f_alat, f_alon = data
        values[vel_cols[0]] = f_vlat[sl].mean()
        values[vel_cols[1]] = f_vlon[sl].mean()
        values[acc_cols[0]] = f_alat[sl].mean()
        values[acc_cols[1]] = f_alon[sl].mean()
        values[gap_col] = (f_lon[sl] - win.tv_lon[sl]).mean()
        values[rel_col] = (win.tv[1][sl] - f_vlon[sl]).mean()

    # OT: average of per-vehicle segment means over vehicles covering the segment
    sums = np.zeros(4)
    count = 0
    for offset, (o_vlat, o_vlon, o_alat, o_alon) in win.others:
        a = max(start, offset)
        b = min(end, offset + o_vlat.shape[0])
        if b <= a:
            continue
        lo, hi = a - offset, b - offset
        sums += (o_vlat[lo:hi].mean(), o_vlon[lo:hi].mean(),
                 o_alat[lo:hi].mean(), o_alon[lo:hi].mean())
        count += 1
    if count:
        ot_vlat, ot_vlon, ot_alat, ot_alon = sums / count
        values[8], values[9] = ot_vlat, ot_vlon
        values[18], values[19] = ot_alat, ot_alon
    else:
        values[8], values[9] = tv_vlat, tv_vlon
        values[18] = values[19] = 0.0
        mask[[8, 9, 18, 19]] = False
    return values, mask


def segment_features(example: Example, factors: SceneFactors, frames: tuple[int, int],
                     tracks, scope: str = SCOPE_HISTORY) -> SegmentFeatures:
    """Features of one segment (frame range relative to the scope window)."""
    win = _WindowData(example, factors, _as_index(tracks), scope)
    start, end = frames
    if not 0 <= start < end <= win.n:
        raise ValueError(f"segment range {frames} outside the {win.n}-frame window")
    values, mask = _segment_row(win, start, end)
    return SegmentFeatures(values=values, mask=mask)


def extract_feature_vector(example: Example, scope: str, scheme: PartitionScheme,
                           tracks, factors: SceneFactors | None = None) -> FeatureVector:
    """26*M-dimensional descriptor of the example's scope window."""
    index = _as_index(tracks)
    if factors is None:
        factors = assign_scene_factors(example, index)
    ranges = partition(SCOPE_LENGTH_S[scope], scheme)
    win = _WindowData(example, factors, index, scope)
    values = np.empty(N_SEGMENT_FEATURES * len(ranges))
    mask = np.empty(N_SEGMENT_FEATURES * len(ranges), dtype=bool)
    for j, (start, end) in enumerate(ranges):
        v, m = _segment_row(win, start, end)
        values[j * N_SEGMENT_FEATURES : (j + 1) * N_SEGMENT_FEATURES] = v
        mask[j * N_SEGMENT_FEATURES : (j + 1) * N_SEGMENT_FEATURES] = m
    return FeatureVector(scope=scope, values=values, mask=mask)


def extract_features(examples: list[Example], tracks, scope: str,
                     scheme: PartitionScheme, config_hash: str = "") -> FeatureMatrix:
    """Extract all examples' vectors into one matrix (factors assigned per example)."""
    index = _as_index(tracks)
    m = n_segments(scope, scheme)
    dim = N_SEGMENT_FEATURES * m
    values = np.empty((len(examples), dim))
    mask = np.empty((len(examples), dim), dtype=bool)
    for i, example in enumerate(examples):
        fv = extract_feature_vector(example, scope, scheme, index)
        values[i] = fv.values
        mask[i] = fv.mask
    return FeatureMatrix(values=values, mask=mask, scope=scope, scheme=scheme,
                         n_segments=m, config_hash=config_hash)


def save_feature_matrix(matrix: FeatureMatrix, path) -> None:
    """Magic + JSON header + f64 values blob + uint8 mask blob."""
    header = {
        "scope": matrix.scope,
        "scheme": {"mode": matrix.scheme.mode, "kappa": matrix.scheme.kappa},
        "n_segments": matrix.n_segments,
        "n_examples": int(matrix.values.shape[0]),
        "dim": int(matrix.values.shape[1]),
        "dim_names": matrix.dim_names,
        "config_hash": matrix.config_hash,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(np.ascontiguousarray(matrix.values, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(matrix.mask, dtype=np.uint8).tobytes())


def load_feature_matrix(path) -> FeatureMatrix:
    with open(path, "rb") as f:
        if f.read(len(FEAT_MAGIC)) != FEAT_MAGIC:
            raise DataError(f"{path}: not a feature matrix file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    n, dim = header["n_examples"], header["dim"]
    need = n * dim * 8 + n * dim
    if len(blob) != need:
        raise DataError(f"{path}: payload is {len(blob)} bytes, expected {need}")
    values = np.frombuffer(blob[: n * dim * 8], dtype="<f8").reshape(n, dim).copy()
    mask = np.frombuffer(blob[n * dim * 8 :], dtype=np.uint8).reshape(n, dim).astype(bool)
    scheme = PartitionScheme(mode=header["scheme"]["mode"], kappa=header["scheme"]["kappa"])
    return FeatureMatrix(values=values, mask=mask, scope=header["scope"], scheme=scheme,
                         n_segments=header["n_segments"], config_hash=header.get("config_hash", ""))
