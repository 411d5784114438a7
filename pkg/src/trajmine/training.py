"""Maximum-likelihood training of the flow by Adam on the mean negative log-likelihood.

The gradient is computed analytically (reverse mode through the coupling MLPs
and the scaling layer, inside the kernel backend); finite differences are a
verification harness only, never the training path.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericError, TrainingError
from .flow import FlowModel, new_flow, _as_batch, _pad_batch

logger = logging.getLogger(__name__)

GRAD_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3", "log_scale")
# L2 decay applies to weight matrices only, not biases or log-scales.
DECAYED = ("w1", "w2", "w3")
FD_SUBSAMPLE_ABOVE = 10_000


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    seed: int = 0
    patience: int = 20
    val_fraction: float = 0.1
    n_couplings: int = 4
    hidden: int = 64

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_param: str
    n_checked: int
    epsilon: float


@dataclass
class TrainLog:
    """Epoch 0 is the pre-training evaluation; epochs 1..n follow each update pass."""

    epochs: list[int] = field(default_factory=list)
    train_nll: list[float] = field(default_factory=list)
    val_nll: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    grad_check: GradCheckReport | None = None

    def append(self, epoch: int, train_nll: float, val_nll: float) -> None:
        self.epochs.append(epoch)
        self.train_nll.append(train_nll)
        self.val_nll.append(val_nll)

    def write_csv(self, path, config_hash: str = "") -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# config_hash={config_hash} best_epoch={self.best_epoch}\n")
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_nll", "val_nll"])
            for e, t, v in zip(self.epochs, self.train_nll, self.val_nll):
                writer.writerow([e, repr(t), repr(v)])


def nll(model: FlowModel, batch) -> float:
    """Mean negative log-likelihood of a standardized batch."""
    batch, _ = _as_batch(batch, model.dim, "batch")
    if batch.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    logp = kernels.flow_logprob_batch(_pad_batch(model, batch), *model._kernel_args())
    if not np.all(np.isfinite(logp)):
        bad = np.nonzero(~np.isfinite(logp))[0]
        raise NumericError(f"non-finite log-density at batch row(s) {bad.tolist()[:8]}")
    return float(-np.mean(logp))


def nll_and_grad(model: FlowModel, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its exact reverse-mode gradient w.r.t. every parameter array."""
    batch, _ = _as_batch(batch, model.dim, "batch")
    if batch.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    out = kernels.flow_nll_grad_batch(_pad_batch(model, batch), *model._kernel_args())
    logp, grads = out[0], out[1:]
    if not np.all(np.isfinite(logp)):
        bad = np.nonzero(~np.isfinite(logp))[0]
        raise NumericError(f"non-finite log-density at batch row(s) {bad.tolist()[:8]}")
    return float(-np.mean(logp)), dict(zip(GRAD_NAMES, grads))


def grad_nll(model: FlowModel, batch) -> dict[str, np.ndarray]:
    return nll_and_grad(model, batch)[1]


def finite_diff_check(
    model: FlowModel,
    batch,
    epsilon: float = 1e-5,
    max_params: int = 256,
    seed: int = 0,
    grad_fn=None,
) -> GradCheckReport:
    """Central-difference check of the analytic gradient.

    Checks every parameter, or a seeded random subsample of `max_params` when
    the model exceeds 10^4 parameters. Relative error uses a small absolute
    floor so noise on near-zero gradients does not dominate the report.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if grad_fn is None:
        grad_fn = grad_nll
    grads = grad_fn(model, batch)
    params = model.param_arrays()
    sizes = [a.size for _, a in params]
    total = sum(sizes)
    coords = [(i, j) for i, (_, a) in enumerate(params) for j in range(a.size)]
    if total > FD_SUBSAMPLE_ABOVE:
        rng = np.random.default_rng(seed)
        pick = rng.choice(total, size=min(max_params, total), replace=False)
        coords = [coords[k] for k in sorted(pick)]

    max_rel = 0.0
    max_abs = 0.0
    worst = ""
    for i, j in coords:
        name, arr = params[i]
        orig = arr.flat[j]
        arr.flat[j] = orig + epsilon
        up = nll(model, batch)
        arr.flat[j] = orig - epsilon
        down = nll(model, batch)
        arr.flat[j] = orig
        fd = (up - down) / (2.0 * epsilon)
        an = grads[name].flat[j]
        abs_err = abs(an - fd)
        rel = abs_err / max(abs(an), abs(fd), 1e-3)
        if abs_err > max_abs:
            max_abs = abs_err
        if rel >= max_rel:
            max_rel = rel
            idx = np.unravel_index(j, arr.shape)
            worst = f"{name}[{','.join(str(k) for k in idx)}]"
    return GradCheckReport(
        max_rel_error=max_rel,
        max_abs_error=max_abs,
        worst_param=worst,
        n_checked=len(coords),
        epsilon=epsilon,
    )


def train(features, config: TrainConfig) -> tuple[FlowModel, TrainLog]:
    """Fit a flow on standardized feature rows; deterministic per config.seed.

    Splits off a validation fraction, early-stops on its NLL with the
    configured patience, and returns the parameters of the best validation
    epoch plus the full log (including a final gradient check).
    """
    config.validate()
    X = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    if X.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, d = X.shape
    if n < 2 * config.batch_size:
        raise ValueError(
            f"need at least 2*batch_size={2 * config.batch_size} rows, got {n}"
        )

    ss = np.random.SeedSequence(config.seed)
    s_init, s_order = ss.spawn(2)
    model = new_flow(d, config.n_couplings, config.hidden, seed=s_init)
    rng = np.random.default_rng(s_order)

    n_val = max(1, int(round(config.val_fraction * n)))
    perm = rng.permutation(n)
    x_val = X[np.sort(perm[:n_val])]
    x_train = X[np.sort(perm[n_val:])]

    params = [a for _, a in model.param_arrays()]
    names = [name for name, _ in model.param_arrays()]
    mom1 = [np.zeros_like(p) for p in params]
    mom2 = [np.zeros_like(p) for p in params]
    decay = [name in DECAYED for name in names]

    log = TrainLog()
    log.append(0, nll(model, x_train), nll(model, x_val))
    best_val = log.val_nll[0]
    best = [p.copy() for p in params]
    log.best_epoch = 0
    since_best = 0
    step = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(x_train.shape[0])
        for start in range(0, order.shape[0], config.batch_size):
            batch = x_train[order[start : start + config.batch_size]]
            try:
                loss, grads = nll_and_grad(model, batch)
            except NumericError as exc:
                raise TrainingError(f"diverged at epoch {epoch}: {exc}", log=log) from exc
            step += 1
            c1 = 1.0 - config.beta1 ** step
            c2 = 1.0 - config.beta2 ** step
            for k, p in enumerate(params):
                g = grads[names[k]]
                if decay[k] and config.weight_decay:
                    g = g + config.weight_decay * p
                mom1[k] = config.beta1 * mom1[k] + (1.0 - config.beta1) * g
                mom2[k] = config.beta2 * mom2[k] + (1.0 - config.beta2) * (g * g)
                p -= config.learning_rate * (mom1[k] / c1) / (np.sqrt(mom2[k] / c2) + config.eps)

        try:
            train_nll = nll(model, x_train)
            val_nll = nll(model, x_val)
        except NumericError as exc:
            raise TrainingError(f"diverged at epoch {epoch}: {exc}", log=log) from exc
        log.append(epoch, train_nll, val_nll)
        if val_nll < best_val:
            best_val = val_nll
            best = [p.copy() for p in params]
            log.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                log.stopped_early = True
                break

    for p, b in zip(params, best):
        p[...] = b
    log.grad_check = finite_diff_check(model, X[: min(8, n)], epsilon=1e-5)
    logger.info(
        "trained d=%d flow: best epoch %d, val NLL %.4f, grad check %.2e",
        d, log.best_epoch, best_val, log.grad_check.max_rel_error,
    )
    return model, log
