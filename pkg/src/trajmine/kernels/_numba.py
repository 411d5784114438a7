"""Numba-jitted twins of the numpy kernels.

Same signatures and semantics as `_numpy`; see that module for the layout
conventions. Kernels are compiled sequentially (no parallel reductions) so
results are reproducible run to run; they agree with the numpy path to
floating-point noise, not necessarily bit for bit (libm vs vectorized tanh).
"""

from __future__ import annotations

import numpy as np
from numba import njit

LOG_2PI = float(np.log(2.0 * np.pi))


@njit(cache=True)
def _mlp_forward(x, w1, b1, w2, b2, w3, b3):
    h1 = np.tanh(np.dot(x, w1) + b1)
    h2 = np.tanh(np.dot(h1, w2) + b2)
    out = np.dot(h2, w3) + b3
    return h1, h2, out


@njit(cache=True)
def _logp_rows(b, log_scale, n_real):
    n = b.shape[0]
    sld = 0.0
    for j in range(n_real):
        sld += log_scale[j]
    const = -0.5 * n_real * LOG_2PI + sld
    logp = np.empty(n)
    for r in range(n):
        sq = 0.0
        for j in range(n_real):
            sq += b[r, j] * b[r, j]
        logp[r] = const - 0.5 * sq
    return logp


@njit(cache=True)
def flow_forward_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real):
    n, dp = v.shape
    h = dp // 2
    u = v.copy()
    for i in range(parities.shape[0]):
        if parities[i] == 0:
            fixed = np.ascontiguousarray(u[:, :h])
            _, _, shift = _mlp_forward(fixed, w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
            if n_real < dp:
                shift[:, h - 1] = 0.0
            u[:, h:] += shift
        else:
            fixed = np.ascontiguousarray(u[:, h:])
            _, _, shift = _mlp_forward(fixed, w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
            u[:, :h] += shift
    return u * np.exp(log_scale)


@njit(cache=True)
def flow_inverse_batch(b, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real):
    n, dp = b.shape
    h = dp // 2
    u = b * np.exp(-log_scale)
    for i in range(parities.shape[0] - 1, -1, -1):
        if parities[i] == 0:
            fixed = np.ascontiguousarray(u[:, :h])
            _, _, shift = _mlp_forward(fixed, w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
            if n_real < dp:
                shift[:, h - 1] = 0.0
            u[:, h:] -= shift
        else:
            fixed = np.ascontiguousarray(u[:, h:])
            _, _, shift = _mlp_forward(fixed, w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
            u[:, :h] -= shift
    return u


@njit(cache=True)
def flow_logprob_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real):
    b = flow_forward_batch(v, parities, w1, b1, w2, b2, w3, b3, log_scale, n_real)
    return _logp_rows(b, log_scale, n_real)


@njit(cache=True)
def _colsum(a):
    out = np.zeros(a.shape[1])
    for r in range(a.shape[0]):
        for c in range(a.shape[1]):
            out[c] += a[r, c]
    return out


@njit(cache=True)
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
            x = np.ascontiguousarray(u[:, :h])
        else:
            x = np.ascontiguousarray(u[:, h:])
        h1, h2, shift = _mlp_forward(x, w1[i], b1[i], w2[i], b2[i], w3[i], b3[i])
        xs[i] = x
        h1s[i] = h1
        h2s[i] = h2
        if parities[i] == 0:
            if n_real < dp:
                shift[:, h - 1] = 0.0
            u[:, h:] += shift
        else:
            u[:, :h] += shift

    es = np.exp(log_scale)
    b = u * es
    logp = _logp_rows(b, log_scale, n_real)

    gb = b / n
    gs = _colsum(gb * b) - 1.0
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
            gshift = np.ascontiguousarray(gu[:, h:]).copy()
            if n_real < dp:
                gshift[:, h - 1] = 0.0
        else:
            gshift = np.ascontiguousarray(gu[:, :h]).copy()
        x = np.ascontiguousarray(xs[i])
        h1 = np.ascontiguousarray(h1s[i])
        h2 = np.ascontiguousarray(h2s[i])
        gw3[i] = np.dot(np.ascontiguousarray(h2.T), gshift)
        gb3[i] = _colsum(gshift)
        gh2 = np.dot(gshift, np.ascontiguousarray(w3[i].T))
        gz2 = gh2 * (1.0 - h2 * h2)
        gw2[i] = np.dot(np.ascontiguousarray(h1.T), gz2)
        gb2[i] = _colsum(gz2)
        gh1 = np.dot(gz2, np.ascontiguousarray(w2[i].T))
        gz1 = gh1 * (1.0 - h1 * h1)
        gw1[i] = np.dot(np.ascontiguousarray(x.T), gz1)
        gb1[i] = _colsum(gz1)
        gx = np.dot(gz1, np.ascontiguousarray(w1[i].T))
        if parities[i] == 0:
            gu[:, :h] += gx
        else:
            gu[:, h:] += gx

    return logp, gw1, gb1, gw2, gb2, gw3, gb3, gs


@njit(cache=True)
def kalman_cv_batch(hist, n_future, dt, q_std, r_std, vel_window):
    # Hand-unrolled 4x4 algebra: BLAS dispatch costs more than the math at
    # this size. F = [[1,0,dt,0],[0,1,0,dt],[0,0,1,0],[0,0,0,1]], H = [I2 0].
    n, T, _ = hist.shape
    q2 = q_std * q_std
    r2 = r_std * r_std
    q11 = q2 * dt ** 4 / 4
    q13 = q2 * dt ** 3 / 2
    q33 = q2 * dt ** 2

    preds = np.empty((n, n_future, 2))
    pdiag = np.empty((n, 4))
    w = vel_window
    K = np.empty((4, 2))
    AP = np.empty((4, 4))
    for e in range(n):
        x = np.empty(4)
        x[0] = hist[e, 0, 0]
        x[1] = hist[e, 0, 1]
        x[2] = (hist[e, w - 1, 0] - hist[e, 0, 0]) / ((w - 1) * dt)
        x[3] = (hist[e, w - 1, 1] - hist[e, 0, 1]) / ((w - 1) * dt)
        P = np.zeros((4, 4))
        P[0, 0] = r2
        P[1, 1] = r2
        P[2, 2] = 2.0 * r2 / (dt * dt)
        P[3, 3] = 2.0 * r2 / (dt * dt)

        for k in range(1, T):
            # predict: x = F x, P = F P F^T + Q
            x[0] += dt * x[2]
            x[1] += dt * x[3]
            for j in range(4):
                P[0, j] += dt * P[2, j]
                P[1, j] += dt * P[3, j]
            for i in range(4):
                P[i, 0] += dt * P[i, 2]
                P[i, 1] += dt * P[i, 3]
            P[0, 0] += q11
            P[1, 1] += q11
            P[0, 2] += q13
            P[2, 0] += q13
            P[1, 3] += q13
            P[3, 1] += q13
            P[2, 2] += q33
            P[3, 3] += q33

            # update: K = P H^T S^-1 with S = H P H^T + R (2x2, closed-form inverse)
            r0 = hist[e, k, 0] - x[0]
            r1 = hist[e, k, 1] - x[1]
            s00 = P[0, 0] + r2
            s11 = P[1, 1] + r2
            s01 = P[0, 1]
            s10 = P[1, 0]
            det = s00 * s11 - s01 * s10
            i00 = s11 / det
            i11 = s00 / det
            i01 = -s01 / det
            i10 = -s10 / det
            for i in range(4):
                K[i, 0] = P[i, 0] * i00 + P[i, 1] * i10
                K[i, 1] = P[i, 0] * i01 + P[i, 1] * i11
            for i in range(4):
                x[i] += K[i, 0] * r0 + K[i, 1] * r1
            # Joseph form: P = (I-KH) P (I-KH)^T + r2 K K^T
            for i in range(4):
                for j in range(4):
                    AP[i, j] = P[i, j] - K[i, 0] * P[0, j] - K[i, 1] * P[1, j]
            for i in range(4):
                for j in range(4):
                    P[i, j] = (AP[i, j] - AP[i, 0] * K[j, 0] - AP[i, 1] * K[j, 1]
                               + r2 * (K[i, 0] * K[j, 0] + K[i, 1] * K[j, 1]))

        pdiag[e, 0] = P[0, 0]
        pdiag[e, 1] = P[1, 1]
        pdiag[e, 2] = P[2, 2]
        pdiag[e, 3] = P[3, 3]
        for k in range(n_future):
            x[0] += dt * x[2]
            x[1] += dt * x[3]
            preds[e, k, 0] = x[0]
            preds[e, k, 1] = x[1]
    return preds, pdiag
