"""Per-dimension standardization fit on training feature matrices.

Fitting uses only observed (non-imputed) entries per dimension; applying
maps x -> (x - mean) / std and rewrites imputed entries to exactly 0 so that
missing scene factors stay density-neutral.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

STD_FLOOR = 1e-6


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def apply(self, values: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        """Standardize a (n, d) matrix or a (d,) vector; mask=False entries become 0."""
        values = np.asarray(values, dtype=np.float64)
        out = (values - self.mean) / self.std
        if mask is not None:
            out = np.where(np.asarray(mask, dtype=bool), out, 0.0)
        return out

    def log_det_correction(self) -> float:
        """Log-density offset between raw and standardized space: -sum(log std)."""
        return -float(np.sum(np.log(self.std)))


def fit_standardizer(values: np.ndarray, mask: np.ndarray | None = None) -> Standardizer:
    """Fit per-dimension mean/std over observed entries; std floored at 1e-6.

    Raises DataError for any dimension with zero observed entries.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise ValueError("standardizer fit needs a (n>=2, d) matrix")
    n, d = values.shape
    if mask is None:
        mean = values.mean(axis=0)
        std = values.std(axis=0)
    else:
        mask = np.asarray(mask, dtype=bool)
        counts = mask.sum(axis=0)
        missing = np.nonzero(counts == 0)[0]
        if missing.size:
            raise DataError(
                f"cannot standardize: dimension(s) {missing.tolist()} have no observed entries"
            )
        msk = mask.astype(np.float64)
        mean = (values * msk).sum(axis=0) / counts
        var = (((values - mean) ** 2) * msk).sum(axis=0) / counts
        std = np.sqrt(var)
    return Standardizer(mean=mean, std=np.maximum(std, STD_FLOOR))


def apply_standardizer(standardizer: Standardizer, values, mask=None) -> np.ndarray:
    return standardizer.apply(values, mask)
