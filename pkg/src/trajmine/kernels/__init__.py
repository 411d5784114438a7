"""Numeric hot-path kernels with a numba fast path and a pure-numpy fallback.

Both backends expose the same functions with identical semantics:

    flow_forward_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real)
    flow_inverse_batch(b, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real)
    flow_logprob_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real)
    flow_nll_grad_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real)
    kalman_cv_batch(hist, n_future, dt, q_std, r_std, vel_window)

Backend selection is controlled by the TRAJMINE_NUMBA environment variable,
read once at first use: "0"/"false"/"off"/"no" forces the numpy path,
anything else (the default) uses numba when it imports, falling back to
numpy otherwise. Tests and the benchmark switch at runtime via
`use_backend("numpy"|"numba"|"auto")`.
"""

from __future__ import annotations

import logging
import os

logger = logging.getLogger(__name__)

_ACTIVE = None
_ACTIVE_NAME = ""


def _import_backend(name: str):
    if name == "numpy":
        from . import _numpy as mod
    elif name == "numba":
        from . import _numba as mod
    else:
        raise ValueError(f"unknown kernel backend {name!r} (expected 'numpy' or 'numba')")
    return mod


def _default_name() -> str:
    flag = os.environ.get("TRAJMINE_NUMBA", "auto").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return "numpy"
    try:
        _import_backend("numba")
    except ImportError as exc:
        logger.warning("numba unavailable (%s); using pure-numpy kernels", exc)
        return "numpy"
    return "numba"


def use_backend(name: str | None = None) -> str:
    """Select the kernel backend; None or "auto" re-reads the environment flag."""
    global _ACTIVE, _ACTIVE_NAME
    if name is None or name == "auto":
        name = _default_name()
    _ACTIVE = _import_backend(name)
    _ACTIVE_NAME = name
    return name


def _backend():
    if _ACTIVE is None:
        use_backend()
    return _ACTIVE


def backend_name() -> str:
    """Name of the backend currently in effect ('numpy' or 'numba')."""
    _backend()
    return _ACTIVE_NAME


def flow_forward_batch(*args):
    return _backend().flow_forward_batch(*args)


def flow_inverse_batch(*args):
    return _backend().flow_inverse_batch(*args)


def flow_logprob_batch(*args):
    return _backend().flow_logprob_batch(*args)


def flow_nll_grad_batch(*args):
    return _backend().flow_nll_grad_batch(*args)


def kalman_cv_batch(*args):
    return _backend().kalman_cv_batch(*args)
