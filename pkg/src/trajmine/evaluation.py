"""Constant-velocity Kalman baseline, reference labels, and mining metrics.

The predictor filters a 4-state (position, velocity) constant-velocity model
over the 30-frame history with position-only measurements (Joseph-form
updates), then rolls the state forward 50 frames open loop. Errors are the
Euclidean displacement at the 5 s horizon point; subset RMSE, its relative
change against the full dataset, and coverage of top-error reference labels
quantify how critical a mined subset is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data_model import DT, FUTURE_FRAMES, Example
from .errors import NumericError, UndefinedMetricError
from .mining import MinedSubsets, ScoreTable


@dataclass
class KalmanConfig:
    process_noise_accel_std: float = 1.0  # white-acceleration model, m/s^2
    measurement_noise_std: float = 0.5  # m
    initial_velocity_window: int = 2  # frames used for the finite-difference init

    def validate(self) -> None:
        if self.process_noise_accel_std <= 0 or self.measurement_noise_std <= 0:
            raise ValueError("Kalman noise parameters must be positive")
        if self.initial_velocity_window < 2:
            raise ValueError("initial_velocity_window must be >= 2 frames")


@dataclass
class SubsetMetrics:
    size: int
    err: float
    delta_err: float
    cov_ref: float
    cov_ext: float | None = None


@dataclass
class EvalReport:
    r: float
    err_full: float
    subsets: dict[str, SubsetMetrics]
    per_example_errors: np.ndarray
    random_seed: int
    histograms: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (bin_edges, counts)


def kalman_cv_batch(histories: np.ndarray, horizon: int, config: KalmanConfig) -> np.ndarray:
    """Filter each (T, 2) history and predict `horizon` future positions."""
    config.validate()
    histories = np.ascontiguousarray(histories, dtype=np.float64)
    if histories.ndim != 3 or histories.shape[2] != 2:
        raise ValueError("histories must have shape (n, T, 2)")
    if histories.shape[1] < config.initial_velocity_window:
        raise ValueError("history shorter than the velocity init window")
    preds, pdiag = kernels.kalman_cv_batch(
        histories, horizon, DT,
        config.process_noise_accel_std, config.measurement_noise_std,
        config.initial_velocity_window,
    )
    if not np.all(np.isfinite(preds)) or not np.all(pdiag > 0.0):
        raise NumericError("Kalman filter covariance degenerated")
    return preds


def kalman_cv_predict(history: np.ndarray, horizon: int, config: KalmanConfig) -> np.ndarray:
    """Single-example convenience wrapper around the batch kernel."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[1] != 2:
        raise ValueError("history must have shape (T, 2)")
    return kalman_cv_batch(history[None, :, :], horizon, config)[0]


def example_arrays(examples: list[Example]) -> tuple[np.ndarray, np.ndarray]:
    """(histories (n, 30, 2), futures (n, 50, 2)) as (lateral, longitudinal)."""
    n = len(examples)
    hist = np.empty((n, len(examples[0].history), 2)) if n else np.empty((0, 0, 2))
    fut = np.empty((n, FUTURE_FRAMES, 2))
    for i, ex in enumerate(examples):
        hist[i, :, 0] = ex.history.lateral
        hist[i, :, 1] = ex.history.longitudinal
        fut[i, :, 0] = ex.future.lateral
        fut[i, :, 1] = ex.future.longitudinal
    return hist, fut


def predict_examples(examples: list[Example], config: KalmanConfig) -> tuple[np.ndarray, np.ndarray]:
    """(predictions, ground truth), both (n, 50, 2)."""
    hist, fut = example_arrays(examples)
    return kalman_cv_batch(hist, FUTURE_FRAMES, config), fut


def terminal_errors(predicted: np.ndarray, ground_truth: np.ndarray) -> np.ndarray:
    """Per-example Euclidean displacement error at the 5 s horizon point."""
    predicted, ground_truth = _aligned(predicted, ground_truth)
    return np.linalg.norm(predicted[:, -1, :] - ground_truth[:, -1, :], axis=1)


def rmse5(predicted: np.ndarray, ground_truth: np.ndarray, horizon_averaged: bool = False) -> float:
    """RMSE of displacement at the 5 s mark (or averaged over the horizon)."""
    predicted, ground_truth = _aligned(predicted, ground_truth)
    sq = np.sum((predicted - ground_truth) ** 2, axis=2)
    if horizon_averaged:
        return float(np.sqrt(np.mean(sq)))
    return float(np.sqrt(np.mean(sq[:, -1])))


def _aligned(predicted, ground_truth):
    predicted = np.asarray(predicted, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if predicted.ndim == 2:
        predicted = predicted[None, :, :]
    if ground_truth.ndim == 2:
        ground_truth = ground_truth[None, :, :]
    if predicted.shape != ground_truth.shape:
        raise ValueError(
            f"prediction/truth shape mismatch: {predicted.shape} vs {ground_truth.shape}"
        )
    return predicted, ground_truth


def top_error_indices(errors: np.ndarray, ratio: float) -> np.ndarray:
    """floor(ratio*N) largest-error indices, ties broken by ascending index."""
    errors = np.asarray(errors, dtype=np.float64)
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    k = math.floor(ratio * errors.shape[0])
    order = np.argsort(-errors, kind="stable")
    return np.sort(order[:k])


def reference_labels(examples: list[Example], ratio: float, config: KalmanConfig) -> np.ndarray:
    """Model-irrelevant reference: the examples the CV Kalman predictor misses most."""
    preds, fut = predict_examples(examples, config)
    return top_error_indices(terminal_errors(preds, fut), ratio)


def delta_err(err_subset: float, err_full: float) -> float:
    """Relative prediction-error change of a subset vs the full dataset."""
    if err_full <= 0.0:
        raise UndefinedMetricError("delta_err undefined: full-dataset error is zero")
    return (err_subset - err_full) / err_full


def coverage(mined: np.ndarray, target: np.ndarray) -> float:
    """|mined trimmed to target| / |target|."""
    target = np.asarray(target)
    if target.size == 0:
        raise UndefinedMetricError("coverage undefined: empty target set")
    return float(np.intersect1d(mined, target).size / target.size)


def random_baseline(n: int, ratio: float, seed: int) -> np.ndarray:
    """floor(ratio*n) uniform indices without replacement, seed-deterministic."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    k = math.floor(ratio * n)
    return np.sort(np.random.default_rng(seed).permutation(n)[:k])


def build_report(
    table: ScoreTable,
    subsets: MinedSubsets,
    per_example_errors: np.ndarray,
    ratio: float,
    random_seed: int = 0,
    histogram_bins: int = 50,
    external_errors: np.ndarray | None = None,
) -> EvalReport:
    """Subset errors, relative changes, and reference coverage for one mining ratio.

    Evaluates the three mined subsets plus a seeded random subset and the
    Kalman-reference subset. When a downstream model's per-example errors are
    supplied, its top-error coverage is reported per subset as well.
    """
    errors = np.asarray(per_example_errors, dtype=np.float64)
    n = errors.shape[0]
    if n != len(table):
        raise ValueError("error column and score table are not index-aligned")
    err_full = float(np.sqrt(np.mean(errors ** 2)))
    reference = top_error_indices(errors, ratio)
    ext_top = None
    if external_errors is not None:
        external_errors = np.asarray(external_errors, dtype=np.float64)
        if external_errors.shape[0] != n:
            raise ValueError("external error column is not index-aligned")
        ext_top = top_error_indices(external_errors, ratio)

    members = dict(subsets.named())
    members["random"] = random_baseline(n, ratio, random_seed)
    members["reference"] = reference

    rows = {}
    for name, idx in members.items():
        if idx.size == 0:
            raise UndefinedMetricError(f"subset {name!r} is empty at r={ratio}")
        err = float(np.sqrt(np.mean(errors[idx] ** 2)))
        rows[name] = SubsetMetrics(
            size=int(idx.size),
            err=err,
            delta_err=delta_err(err, err_full),
            cov_ref=coverage(idx, reference),
            cov_ext=None if ext_top is None else coverage(idx, ext_top),
        )

    histograms = {}
    for name in ("hist", "full", "hard"):
        counts, edges = np.histogram(table.column(name), bins=histogram_bins)
        histograms[name] = (edges, counts)
    return EvalReport(
        r=ratio,
        err_full=err_full,
        subsets=rows,
        per_example_errors=errors,
        random_seed=random_seed,
        histograms=histograms,
    )


def report_to_dict(report: EvalReport, config_hash: str = "") -> dict:
    return {
        "config_hash": config_hash,
        "r": report.r,
        "err_full": report.err_full,
        "random_seed": report.random_seed,
        "subsets": {
            name: {
                "size": m.size,
                "err": m.err,
                "delta_err": m.delta_err,
                "cov_ref": m.cov_ref,
                **({} if m.cov_ext is None else {"cov_ext": m.cov_ext}),
            }
            for name, m in sorted(report.subsets.items())
        },
    }


def errors_to_csv(errors: np.ndarray, config_hash: str = "") -> str:
    lines = [f"# config_hash={config_hash}", "example_index,error_m"]
    lines += [f"{i},{float(e)!r}" for i, e in enumerate(errors)]
    return "\n".join(lines) + "\n"


def errors_from_csv(text: str) -> np.ndarray:
    """Read a per-example error CSV (example_index, error_m), '#' comments allowed."""
    rows = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.lower().startswith("example_index"):
            continue
        idx, err = line.split(",")[:2]
        rows[int(idx)] = float(err)
    if not rows:
        raise UndefinedMetricError("external error file contains no rows")
    n = max(rows) + 1
    out = np.zeros(n)
    for i, e in rows.items():
        out[i] = e
    return out


def histograms_to_csv(report: EvalReport, config_hash: str = "") -> str:
    lines = [f"# config_hash={config_hash}", "score,bin_left,bin_right,count"]
    for name, (edges, counts) in sorted(report.histograms.items()):
        for j in range(counts.shape[0]):
            lines.append(f"{name},{float(edges[j])!r},{float(edges[j + 1])!r},{int(counts[j])}")
    return "\n".join(lines) + "\n"
