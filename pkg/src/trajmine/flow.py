"""NICE-style normalizing flow: additive coupling layers plus a diagonal scaling layer.

The forward map sends a feature vector to a latent with standard-normal base
density. Couplings hold one half of the vector fixed and add an MLP of the
fixed half to the other half, so they are volume preserving; the single
scaling layer v_i -> v_i * exp(s_i) carries the entire log-determinant.

Odd input dimensions are padded with one constant-zero dimension so the
half-split stays well defined. The pad never receives coupling shifts, its
scale is pinned to zero, and it is excluded from the base density and the
log-determinant, so the density over the real dimensions stays exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError, NumericError
from .standardize import Standardizer

LOG_2PI = float(np.log(2.0 * np.pi))
MAGIC = b"TRAJMINE-FLOW-1\n"


@dataclass
class CouplingLayer:
    """One additive coupling step. parity 0 holds the first half fixed, 1 the second."""

    parity: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    mask_pad: bool = False  # zero the shift into the trailing pad dimension

    @property
    def width(self) -> int:
        return 2 * self.w1.shape[0]


@dataclass
class ScalingLayer:
    log_scale: np.ndarray

    def log_det(self, n_real: int | None = None) -> float:
        n = self.log_scale.shape[0] if n_real is None else n_real
        return float(np.sum(self.log_scale[:n]))


@dataclass
class FlowModel:
    dim: int
    hidden: int
    parities: np.ndarray  # (L,) uint8, alternating
    w1: np.ndarray  # (L, half, hidden)
    b1: np.ndarray  # (L, hidden)
    w2: np.ndarray  # (L, hidden, hidden)
    b2: np.ndarray  # (L, hidden)
    w3: np.ndarray  # (L, hidden, half)
    b3: np.ndarray  # (L, half)
    log_scale: np.ndarray  # (dim_padded,)
    standardizer: Standardizer | None = None
    config_hash: str = ""

    @property
    def dim_padded(self) -> int:
        return self.dim + (self.dim % 2)

    @property
    def half(self) -> int:
        return self.dim_padded // 2

    @property
    def n_couplings(self) -> int:
        return int(self.parities.shape[0])

    @property
    def couplings(self) -> list[CouplingLayer]:
        pad = self.dim < self.dim_padded
        return [
            CouplingLayer(
                parity=int(self.parities[i]),
                w1=self.w1[i], b1=self.b1[i],
                w2=self.w2[i], b2=self.b2[i],
                w3=self.w3[i], b3=self.b3[i],
                mask_pad=pad,
            )
            for i in range(self.n_couplings)
        ]

    @property
    def scaling(self) -> ScalingLayer:
        return ScalingLayer(log_scale=self.log_scale)

    def param_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter arrays, in the fixed serialization/update order."""
        return [
            ("w1", self.w1), ("b1", self.b1),
            ("w2", self.w2), ("b2", self.b2),
            ("w3", self.w3), ("b3", self.b3),
            ("log_scale", self.log_scale),
        ]

    @property
    def n_params(self) -> int:
        return sum(a.size for _, a in self.param_arrays())

    def copy(self) -> "FlowModel":
        return FlowModel(
            dim=self.dim, hidden=self.hidden, parities=self.parities.copy(),
            w1=self.w1.copy(), b1=self.b1.copy(), w2=self.w2.copy(), b2=self.b2.copy(),
            w3=self.w3.copy(), b3=self.b3.copy(), log_scale=self.log_scale.copy(),
            standardizer=self.standardizer, config_hash=self.config_hash,
        )

    def _kernel_args(self) -> tuple:
        return (self.parities, self.w1, self.b1, self.w2, self.b2, self.w3,
                self.b3, self.log_scale, self.dim)


def new_flow(dim: int, n_couplings: int = 4, hidden: int = 64, seed=0) -> FlowModel:
    """Random-init flow: weights ~ N(0, 1/fan_in), biases and log-scales zero.

    Parities alternate 0,1,0,... Draw order is fixed (per layer: w1, w2, w3)
    so identical seeds give identical parameters.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if n_couplings < 0:
        raise ValueError("n_couplings must be >= 0")
    dp = dim + (dim % 2)
    h = dp // 2
    rng = np.random.default_rng(seed)
    w1 = np.empty((n_couplings, h, hidden))
    w2 = np.empty((n_couplings, hidden, hidden))
    w3 = np.empty((n_couplings, hidden, h))
    for i in range(n_couplings):
        w1[i] = rng.standard_normal((h, hidden)) / np.sqrt(h)
        w2[i] = rng.standard_normal((hidden, hidden)) / np.sqrt(hidden)
        w3[i] = rng.standard_normal((hidden, h)) / np.sqrt(hidden)
    return FlowModel(
        dim=dim,
        hidden=hidden,
        parities=np.arange(n_couplings, dtype=np.uint8) % 2,
        w1=w1,
        b1=np.zeros((n_couplings, hidden)),
        w2=w2,
        b2=np.zeros((n_couplings, hidden)),
        w3=w3,
        b3=np.zeros((n_couplings, h)),
        log_scale=np.zeros(dp),
    )


def _as_batch(v, width: int, what: str = "input") -> tuple[np.ndarray, bool]:
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[None, :]
    if v.ndim != 2 or v.shape[1] != width:
        raise ValueError(f"{what} must have width {width}, got shape {v.shape}")
    return v, single


def _pad_batch(model: FlowModel, v: np.ndarray) -> np.ndarray:
    if model.dim == model.dim_padded:
        return np.ascontiguousarray(v)
    out = np.zeros((v.shape[0], model.dim_padded))
    out[:, : model.dim] = v
    return out


def _net_shift(x: np.ndarray, layer: CouplingLayer) -> np.ndarray:
    h1 = np.tanh(x @ layer.w1 + layer.b1)
    h2 = np.tanh(h1 @ layer.w2 + layer.b2)
    return h2 @ layer.w3 + layer.b3


def coupling_forward(v, layer: CouplingLayer):
    """Apply one additive coupling: fixed half copied, moved half += net(fixed half)."""
    v, single = _as_batch(v, layer.width)
    h = layer.width // 2
    out = v.copy()
    if layer.parity == 0:
        shift = _net_shift(v[:, :h], layer)
        if layer.mask_pad:
            shift[:, -1] = 0.0
        out[:, h:] += shift
    else:
        out[:, :h] += _net_shift(v[:, h:], layer)
    return out[0] if single else out


def coupling_inverse(u, layer: CouplingLayer):
    """Exact algebraic inverse of `coupling_forward` (subtract the same shift)."""
    u, single = _as_batch(u, layer.width)
    h = layer.width // 2
    out = u.copy()
    if layer.parity == 0:
        shift = _net_shift(u[:, :h], layer)
        if layer.mask_pad:
            shift[:, -1] = 0.0
        out[:, h:] -= shift
    else:
        out[:, :h] -= _net_shift(u[:, h:], layer)
    return out[0] if single else out


def flow_forward(model: FlowModel, v):
    """Map data to latent: returns (b, log_det) with log_det = sum of log-scales."""
    v, single = _as_batch(v, model.dim)
    b = kernels.flow_forward_batch(_pad_batch(model, v), *model._kernel_args())
    if not np.all(np.isfinite(b)):
        raise NumericError("flow forward produced non-finite values")
    b = b[:, : model.dim]
    log_det = model.scaling.log_det(model.dim)
    return (b[0] if single else b), log_det


def flow_inverse(model: FlowModel, b):
    """Map latent back to data space; exact inverse of `flow_forward`."""
    b, single = _as_batch(b, model.dim, "latent")
    v = kernels.flow_inverse_batch(_pad_batch(model, b), *model._kernel_args())
    v = v[:, : model.dim]
    return v[0] if single else v


def log_prob(model: FlowModel, v):
    """Exact log-density log p(b) + log_det, with standard-normal base."""
    v, single = _as_batch(v, model.dim)
    logp = kernels.flow_logprob_batch(_pad_batch(model, v), *model._kernel_args())
    if not np.all(np.isfinite(logp)):
        bad = np.nonzero(~np.isfinite(logp))[0]
        raise NumericError(f"non-finite log-density at row(s) {bad.tolist()[:8]}")
    return float(logp[0]) if single else logp


def log_prob_raw(model: FlowModel, values, mask=None):
    """Log-density of raw (unstandardized) features.

    Applies the model's standardizer and adds the affine correction
    -sum(log std); a constant offset, so rankings match `log_prob`.
    """
    if model.standardizer is None:
        return log_prob(model, values)
    z = model.standardizer.apply(values, mask)
    return log_prob(model, z) + model.standardizer.log_det_correction()


def sample(model: FlowModel, n: int, seed=0) -> np.ndarray:
    """Draw n latents from the base normal and invert the flow; seed-deterministic."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((n, model.dim))
    return flow_inverse(model, b)


def save_flow(model: FlowModel, path, config_hash: str | None = None) -> None:
    """Write magic + JSON header + little-endian f64 parameter blob."""
    header = {
        "dim": model.dim,
        "hidden": model.hidden,
        "n_couplings": model.n_couplings,
        "parities": [int(p) for p in model.parities],
        "standardizer": None
        if model.standardizer is None
        else {
            "mean": model.standardizer.mean.tolist(),
            "std": model.standardizer.std.tolist(),
        },
        "config_hash": model.config_hash if config_hash is None else config_hash,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in model.param_arrays())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(blob)


def load_flow(path) -> FlowModel:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a flow model file (bad magic)")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    dim = header["dim"]
    hidden = header["hidden"]
    L = header["n_couplings"]
    dp = dim + (dim % 2)
    h = dp // 2
    shapes = [(L, h, hidden), (L, hidden), (L, hidden, hidden), (L, hidden),
              (L, hidden, h), (L, h), (dp,)]
    flat = np.frombuffer(blob, dtype="<f8")
    expect = sum(int(np.prod(s)) for s in shapes)
    if flat.size != expect:
        raise DataError(f"{path}: parameter blob has {flat.size} values, expected {expect}")
    arrays = []
    off = 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(np.ascontiguousarray(flat[off : off + size].reshape(s)))
        off += size
    std = header.get("standardizer")
    standardizer = None
    if std is not None:
        standardizer = Standardizer(
            mean=np.asarray(std["mean"], dtype=np.float64),
            std=np.asarray(std["std"], dtype=np.float64),
        )
    return FlowModel(
        dim=dim,
        hidden=hidden,
        parities=np.asarray(header["parities"], dtype=np.uint8),
        w1=arrays[0], b1=arrays[1], w2=arrays[2], b2=arrays[3],
        w3=arrays[4], b3=arrays[5], log_scale=arrays[6],
        standardizer=standardizer,
        config_hash=header.get("config_hash", ""),
    )
