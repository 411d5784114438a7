"""Rareness/hardness scoring and percentile-threshold subset mining.

Each example gets two log-densities from the trained flows: one for the
history-scope features (C_x) and one for the full-trajectory features (C_z).
The hardness score is C_z - lambda * C_x: low values flag examples whose
observation looks normal but whose continuation is rare. Mining keeps the
floor(r*N) lowest-scoring examples per criterion, ties broken by ascending
example index, with the threshold reported as the (k+1)-th smallest score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .flow import FlowModel, log_prob_raw


@dataclass
class ScoreTable:
    example_index: np.ndarray  # (n,) int
    hist_logdensity: np.ndarray  # C_x: rareness of the observation window
    full_logdensity: np.ndarray  # C_z: rareness of the whole trajectory
    hardness: np.ndarray  # C_{y|x} = C_z - lambda * C_x
    lam: float

    def __len__(self) -> int:
        return int(self.example_index.shape[0])

    def column(self, name: str) -> np.ndarray:
        return {"hist": self.hist_logdensity, "full": self.full_logdensity,
                "hard": self.hardness}[name]


@dataclass
class MinedSubsets:
    ratio: float
    lam: float
    thr_hist: float  # delta_X
    thr_full: float  # delta_Z
    thr_hard: float  # delta_Y
    rare_hist_idx: np.ndarray  # lowest C_x examples
    rare_full_idx: np.ndarray  # lowest C_z examples
    hard_idx: np.ndarray  # lowest C_{y|x} examples

    def named(self) -> dict[str, np.ndarray]:
        return {"rare_hist": self.rare_hist_idx, "rare_full": self.rare_full_idx,
                "hard": self.hard_idx}


def _values_mask(features):
    if hasattr(features, "values"):
        return features.values, features.mask
    return np.asarray(features, dtype=np.float64), None


def score_examples(model_x: FlowModel, model_z: FlowModel, features_x, features_z,
                   lam: float) -> ScoreTable:
    """Log-densities of index-aligned feature sets under the two flows."""
    vx, mx = _values_mask(features_x)
    vz, mz = _values_mask(features_z)
    if vx.shape[0] != vz.shape[0]:
        raise ConfigError(
            f"feature sets are not index-aligned: {vx.shape[0]} vs {vz.shape[0]} rows"
        )
    if vx.shape[1] != model_x.dim:
        raise ConfigError(
            f"history-scope features have dim {vx.shape[1]} but the model expects {model_x.dim}"
        )
    if vz.shape[1] != model_z.dim:
        raise ConfigError(
            f"full-scope features have dim {vz.shape[1]} but the model expects {model_z.dim}"
        )
    c_x = np.asarray(log_prob_raw(model_x, vx, mx), dtype=np.float64)
    c_z = np.asarray(log_prob_raw(model_z, vz, mz), dtype=np.float64)
    return ScoreTable(
        example_index=np.arange(vx.shape[0], dtype=np.int64),
        hist_logdensity=c_x,
        full_logdensity=c_z,
        hardness=c_z - lam * c_x,
        lam=lam,
    )


def mine(scores: np.ndarray, ratio: float) -> tuple[float, np.ndarray]:
    """The floor(ratio*N) lowest-scoring indices plus the selection threshold.

    Ties are broken by ascending example index (stable sort), so the result
    is deterministic; the threshold is the (k+1)-th smallest score, +inf when
    the whole dataset is selected.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise ValueError("scores must be a non-empty 1-D array")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"mining ratio must be in (0, 1], got {ratio}")
    n = scores.shape[0]
    k = math.floor(ratio * n)
    order = np.argsort(scores, kind="stable")
    threshold = float(scores[order[k]]) if k < n else math.inf
    return threshold, np.sort(order[:k])


def mine_all(table: ScoreTable, ratio: float) -> MinedSubsets:
    thr_hist, d_hist = mine(table.hist_logdensity, ratio)
    thr_full, d_full = mine(table.full_logdensity, ratio)
    thr_hard, d_hard = mine(table.hardness, ratio)
    return MinedSubsets(
        ratio=ratio, lam=table.lam,
        thr_hist=thr_hist, thr_full=thr_full, thr_hard=thr_hard,
        rare_hist_idx=d_hist, rare_full_idx=d_full, hard_idx=d_hard,
    )


def scores_to_csv(table: ScoreTable, config_hash: str = "") -> str:
    lines = [f"# config_hash={config_hash} lambda={table.lam!r}",
             "example_index,C_x,C_z,C_yx"]
    for i in range(len(table)):
        lines.append(
            f"{table.example_index[i]},{float(table.hist_logdensity[i])!r},"
            f"{float(table.full_logdensity[i])!r},{float(table.hardness[i])!r}"
        )
    return "\n".join(lines) + "\n"


def scores_from_csv(text: str) -> tuple[ScoreTable, str]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or not lines[0].startswith("#"):
        raise DataError("not a score table (missing meta comment line)")
    meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
    rows = [ln.split(",") for ln in lines[2:]]
    idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
    c_x = np.array([float(r[1]) for r in rows])
    c_z = np.array([float(r[2]) for r in rows])
    c_yx = np.array([float(r[3]) for r in rows])
    table = ScoreTable(example_index=idx, hist_logdensity=c_x, full_logdensity=c_z,
                       hardness=c_yx, lam=float(meta["lambda"]))
    return table, meta.get("config_hash", "")


def mined_to_csv(table: ScoreTable, subsets: MinedSubsets, config_hash: str = "") -> str:
    in_dx = np.zeros(len(table), dtype=int)
    in_dz = np.zeros(len(table), dtype=int)
    in_dyx = np.zeros(len(table), dtype=int)
    in_dx[subsets.rare_hist_idx] = 1
    in_dz[subsets.rare_full_idx] = 1
    in_dyx[subsets.hard_idx] = 1
    lines = [f"# config_hash={config_hash} r={subsets.ratio!r} lambda={subsets.lam!r}",
             "example_index,C_x,C_z,C_yx,in_dx,in_dz,in_dyx"]
    for i in range(len(table)):
        lines.append(
            f"{table.example_index[i]},{float(table.hist_logdensity[i])!r},"
            f"{float(table.full_logdensity[i])!r},{float(table.hardness[i])!r},"
            f"{in_dx[i]},{in_dz[i]},{in_dyx[i]}"
        )
    return "\n".join(lines) + "\n"


def mined_from_csv(text: str) -> tuple[MinedSubsets, str]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or not lines[0].startswith("#"):
        raise DataError("not a mined-subset table (missing meta comment line)")
    meta = dict(kv.split("=", 1) for kv in lines[0][1:].split())
    rows = [ln.split(",") for ln in lines[2:]]
    idx = np.array([int(r[0]) for r in rows], dtype=np.int64)
    sel = {}
    for col, pos in (("dx", 4), ("dz", 5), ("dyx", 6)):
        sel[col] = idx[np.array([r[pos] == "1" for r in rows], dtype=bool)]
    scores = {
        "hist": np.array([float(r[1]) for r in rows]),
        "full": np.array([float(r[2]) for r in rows]),
        "hard": np.array([float(r[3]) for r in rows]),
    }
    ratio = float(meta["r"])
    thr = {}
    for col, key in (("hist", "dx"), ("full", "dz"), ("hard", "dyx")):
        k = sel[key].shape[0]
        order = np.argsort(scores[col], kind="stable")
        thr[col] = float(scores[col][order[k]]) if k < idx.shape[0] else math.inf
    subsets = MinedSubsets(
        ratio=ratio, lam=float(meta["lambda"]),
        thr_hist=thr["hist"], thr_full=thr["full"], thr_hard=thr["hard"],
        rare_hist_idx=sel["dx"], rare_full_idx=sel["dz"], hard_idx=sel["dyx"],
    )
    return subsets, meta.get("config_hash", "")


def subsets_summary(subsets: MinedSubsets) -> dict:
    """JSON summary per the external interface: r, lambda, and the thresholds."""
    def _finite(x: float):
        return x if math.isfinite(x) else None  # r=1.0 has no threshold

    return {
        "r": subsets.ratio,
        "lambda": subsets.lam,
        "delta_x": _finite(subsets.thr_hist),
        "delta_z": _finite(subsets.thr_full),
        "delta_y": _finite(subsets.thr_hard),
        "sizes": {name: int(idx.shape[0]) for name, idx in subsets.named().items()},
    }
