"""Compiled inner loops for one LSTM direction.

Arrays are time-major ``(T, B, ...)`` with batch rows sorted by decreasing
length, so the rows still inside their sequence at time ``t`` are the
prefix ``[:active[t]]``.  Entries of output and cache arrays at padded
positions are neither read nor written, so callers decide how to fill them.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def _tanh(x):
    # expm1 keeps full relative precision near zero
    if x >= 0.0:
        e = math.expm1(-2.0 * x)
        return -e / (2.0 + e)
    e = math.expm1(2.0 * x)
    return e / (2.0 + e)


@njit(cache=True)
def direction_forward(xp, U, active, reverse, gates, tanh_c, h_prev, c_prev, out):
    T, B, G = xp.shape
    H = G // 4
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for s in range(T):
        t = T - 1 - s if reverse else s
        n = active[t]
        if n == 0:
            continue
        z = xp[t, :n] + np.dot(h[:n], U)
        for b in range(n):
            for j in range(H):
                ig = _sigmoid(z[b, j])
                fg = _sigmoid(z[b, H + j])
                og = _sigmoid(z[b, 2 * H + j])
                gg = _tanh(z[b, 3 * H + j])
                gates[t, b, j] = ig
                gates[t, b, H + j] = fg
                gates[t, b, 2 * H + j] = og
                gates[t, b, 3 * H + j] = gg
                cp = c[b, j]
                c_prev[t, b, j] = cp
                h_prev[t, b, j] = h[b, j]
                cn = fg * cp + ig * gg
                tc = _tanh(cn)
                tanh_c[t, b, j] = tc
                c[b, j] = cn
                hn = og * tc
                h[b, j] = hn
                out[t, b, j] = hn


@njit(cache=True)
def direction_backward(dout, U, active, reverse, gates, tanh_c, c_prev, dz):
    T, B, H = dout.shape
    Ut = np.ascontiguousarray(U.T)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for s in range(T):
        t = s if reverse else T - 1 - s
        n = active[t]
        if n == 0:
            continue
        for b in range(n):
            for j in range(H):
                ig = gates[t, b, j]
                fg = gates[t, b, H + j]
                og = gates[t, b, 2 * H + j]
                gg = gates[t, b, 3 * H + j]
                tc = tanh_c[t, b, j]
                dht = dout[t, b, j] + dh[b, j]
                dcn = dc[b, j] + dht * og * (1.0 - tc * tc)
                dz[t, b, j] = dcn * gg * ig * (1.0 - ig)
                dz[t, b, H + j] = dcn * c_prev[t, b, j] * fg * (1.0 - fg)
                dz[t, b, 2 * H + j] = dht * tc * og * (1.0 - og)
                dz[t, b, 3 * H + j] = dcn * ig * (1.0 - gg * gg)
                dc[b, j] = dcn * fg
        dh[:n] = np.dot(dz[t, :n], Ut)
