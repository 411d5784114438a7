"""Pure-numpy reference implementations of the hot-path kernels.

Layout conventions shared with the numba twin:

* Flow parameters are stacked across coupling layers: w1 (L, h, H), b1 (L, H),
  w2 (L, H, H), b2 (L, H), w3 (L, H, h), b3 (L, h), where h is half the
  (possibly padded, even) vector width and H the hidden width.
* `parities[i] == 0` holds the first half fixed and shifts the second half;
  `1` is the mirror image.
* `n_real` is the unpadded dimension. When n_real < width, the last dimension
  is a constant-zero pad: coupling shifts into it are masked out and it is
  excluded from the base density and the log-determinant.
"""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


def _mlp_forward(x, w1, b1, w2, b2, w3, b3):
    h1 = np.tanh(x @ w1 + b1)
    h2 = np.tanh(h1 @ w2 + b2)
    return h1, h2, h2 @ w3 + b3


def _logp_rows(b, log_scale, n_real):
    const = -0.5 * n_real * LOG_2PI + float(np.sum(log_scale[:n_real]))
    return const - 0.5 * np.sum(b[:, :n_real] * b[:, :n_real], axis=1)


def flow_forward_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real):
    n, dp = v.shape
    h = dp // 2
    u = v.copy()
    for i in range(parities.shape[0]):
        if parities[i] == 0:
            _, _, shift = _mlp_forward(u[:, :h], w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
            if n_real < dp:
                shift[:, h - 1] = 0.0
            u[:, h:] += shift
        else:
            _, _, shift = _mlp_forward(u[:, h:], w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
            u[:, :h] += shift
    return u * np.exp(log_scale)


def flow_inverse_batch(b, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real):
    n, dp = b.shape
    h = dp // 2
    u = b * np.exp(-log_scale)
    for i in range(parities.shape[0] - 1, -1, -1):
        if parities[i] == 0:
            _, _, shift = _mlp_forward(u[:, :h], w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
            if n_real < dp:
                shift[:, h - 1] = 0.0
            u[:, h:] -= shift
        else:
            _, _, shift = _mlp_forward(u[:, h:], w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
            u[:, :h] -= shift
    return u


def flow_logprob_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real):
    b = flow_forward_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real)
    return _logp_rows(b, log_scale, n_real)


def flow_nll_grad_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real):
    n, dp = v.shape
    h = dp // 2
    L = parities.shape[0]
    H = w1.shape[2]
    xs = np.empty((L, n, h))
    h1s = np.empty((L, n, H))
    h2s = np.empty((L, n, H))

    u = v.copy()
    for i in range(L):
        if parities[i] == 0:
            x = u[:, :h].copy()
        else:
            x = u[:, h:].copy()
        h1, h2, shift = _mlp_forward(x, w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
        xs[i], h1s[i], h2s[i] = x, h1, h2
        if parities[i] == 0:
            if n_real < dp:
                shift[:, h - 1] = 0.0
            u[:, h:] += shift
        else:
            u[:, :h] += shift

    es = np.exp(log_scale)
    b = u * es
    logp = _logp_rows(b, log_scale, n_real)

    # d(mean nll)/db, then back through scaling and couplings.
    gb = b / n
    gs = np.sum(gb * b, axis=0) - 1.0
    if n_real < dp:
        gs[dp - 1] = 0.0
    gu = gb * es

    gw1 = np.zeros_like(w1)
    gb1 = np.zeros_like(b1)
    gw2 = np.zeros_like(w2)
    gb2 = np.zeros_like(b2)
    gw3 = np.zeros_like(w3)
    gb3 = np.zeros_like(b3)
    for i in range(L - 1, -1, -1):
        if parities[i] == 0:
            gshift = gu[:, h:].copy()
            if n_real < dp:
                gshift[:, h - 1] = 0.0
        else:
            gshift = gu[:, :h].copy()
        x, h1, h2 = xs[i], h1s[i], h2s[i]
        gw3[i] = h2.T @ gshift
        gb3[i] = np.sum(gshift, axis=0)
        gh2 = gshift @ w3[i].T
        gz2 = gh2 * (1.0 - h2 * h2)
        gw2[i] = h1.T @ gz2
        gb2[i] = np.sum(gz2, axis=0)
        gh1 = gz2 @ w2[i].T
        gz1 = gh1 * (1.0 - h1 * h1)
        gw1[i] = x.T @ gz1
        gb1[i] = np.sum(gz1, axis=0)
        gx = gz1 @ w1[i].T
        if parities[i] == 0:
            gu[:, :h] += gx
        else:
            gu[:, h:] += gx

    return logp, gw1, gb1, gw2, gb2, gw3, gb3, gs


def kalman_cv_batch(hist, n_future, dt, q_std, r_std, vel_window):
    """Constant-velocity Kalman filter over each history, then open-loop rollout.

    hist: (n, T, 2) positions. Returns (predictions (n, n_future, 2),
    final filtered covariance diagonals (n, 4)).
    """
    n, T, _ = hist.shape
    q2 = q_std * q_std
    r2 = r_std * r_std
    F = np.array([[1.0, 0.0, dt, 0.0],
                  [0.0, 1.0, 0.0, dt],
                  [0.0, 0.0, 1.0, 0.0],
                  [0.0, 0.0, 0.0, 1.0]])
    # Discrete white-acceleration process noise, per axis.
    Q = q2 * np.array([[dt ** 4 / 4, 0.0, dt ** 3 / 2, 0.0],
                       [0.0, dt ** 4 / 4, 0.0, dt ** 3 / 2],
                       [dt ** 3 / 2, 0.0, dt ** 2, 0.0],
                       [0.0, dt ** 3 / 2, 0.0, dt ** 2]])
    I4 = np.eye(4)

    w = vel_window
    x = np.zeros((n, 4))
    x[:, 0] = hist[:, 0, 0]
    x[:, 1] = hist[:, 0, 1]
    x[:, 2] = (hist[:, w - 1, 0] - hist[:, 0, 0]) / ((w - 1) * dt)
    x[:, 3] = (hist[:, w - 1, 1] - hist[:, 0, 1]) / ((w - 1) * dt)
    P = np.zeros((n, 4, 4))
    P[:, 0, 0] = r2
    P[:, 1, 1] = r2
    P[:, 2, 2] = 2.0 * r2 / (dt * dt)
    P[:, 3, 3] = 2.0 * r2 / (dt * dt)

    for k in range(1, T):
        x = x @ F.T
        P = F @ P @ F.T + Q
        resid = hist[:, k, :] - x[:, :2]
        det = ((P[:, 0, 0] + r2) * (P[:, 1, 1] + r2) - P[:, 0, 1] * P[:, 1, 0])
        sinv = np.empty((n, 2, 2))
        sinv[:, 0, 0] = (P[:, 1, 1] + r2) / det
        sinv[:, 1, 1] = (P[:, 0, 0] + r2) / det
        sinv[:, 0, 1] = -P[:, 0, 1] / det
        sinv[:, 1, 0] = -P[:, 1, 0] / det
        K = P[:, :, :2] @ sinv
        x = x + (K @ resid[:, :, None])[:, :, 0]
        # Joseph form: P = (I-KH) P (I-KH)^T + K R K^T with H = [I2 0].
        KH = np.zeros((n, 4, 4))
        KH[:, :, 0] = K[:, :, 0]
        KH[:, :, 1] = K[:, :, 1]
        A = I4 - KH
        P = A @ P @ A.transpose(0, 2, 1) + r2 * (K @ K.transpose(0, 2, 1))

    pdiag = np.stack([P[:, 0, 0], P[:, 1, 1], P[:, 2, 2], P[:, 3, 3]], axis=1)
    preds = np.empty((n, n_future, 2))
    for k in range(n_future):
        x = x @ F.T
        preds[:, k, 0] = x[:, 0]
        preds[:, k, 1] = x[:, 1]
    return preds, pdiag
