"""Pure-numpy RGrN sequence kernel (forward unroll and backprop through time).

Cell, per step t over all nodes at once::

    z    = x_t Wx + (h_{t-1} * r) Wh + b          -> gates i, f, o, c~
    q    = tanh(s_{t-1} Wg + bg)
    m    = s_{t-1} + A q
    s_t  = f * m + i * c~
    h_t  = o * tanh(s_t)

``r`` is a fixed recurrent-dropout mask (ones when dropout is off).
Gate blocks in the 4h axis are ordered (i, f, o, c~).
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit


def rgrn_forward(X, A, Wx, Wh, b, Wg, bg, rmask=None):
    T, n, _ = X.shape
    h = Wh.shape[0]
    dtype = X.dtype
    # input contribution for every step in a single GEMM
    Zx = (X.reshape(T * n, -1) @ Wx).reshape(T, n, 4 * h)
    Zx += b
    G = np.empty((T, n, 4 * h), dtype=dtype)
    Q = np.empty((T, n, h), dtype=dtype)
    Mm = np.empty((T, n, h), dtype=dtype)
    S = np.zeros((T + 1, n, h), dtype=dtype)
    Hd = np.zeros((T, n, h), dtype=dtype)
    H = np.empty((T, n, h), dtype=dtype)
    hd = np.zeros((n, h), dtype=dtype)
    for t in range(T):
        s_prev = S[t]
        Hd[t] = hd
        z = Zx[t] + hd @ Wh
        g = G[t]
        g[:, : 3 * h] = expit(z[:, : 3 * h])
        g[:, 3 * h :] = np.tanh(z[:, 3 * h :])
        q = np.tanh(s_prev @ Wg + bg)
        Q[t] = q
        m = s_prev + A @ q
        Mm[t] = m
        s = g[:, h : 2 * h] * m + g[:, :h] * g[:, 3 * h :]
        S[t + 1] = s
        ht = g[:, 2 * h : 3 * h] * np.tanh(s)
        H[t] = ht
        hd = ht if rmask is None else ht * rmask
    cache = (X, A, Wx, Wh, Wg, rmask, G, Q, Mm, S, Hd)
    return H, cache


def rgrn_backward(cache, dH, need_dx=False):
    X, A, Wx, Wh, Wg, rmask, G, Q, Mm, S, Hd = cache
    T, n, _ = X.shape
    h = Wh.shape[0]
    dtype = X.dtype
    DZ = np.empty((T, n, 4 * h), dtype=dtype)
    DQ = np.empty((T, n, h), dtype=dtype)
    dh_carry = np.zeros((n, h), dtype=dtype)
    ds_carry = np.zeros((n, h), dtype=dtype)
    At = A.T
    WhT = Wh.T
    WgT = Wg.T
    for t in range(T - 1, -1, -1):
        g = G[t]
        ig, fg, og, cg = g[:, :h], g[:, h : 2 * h], g[:, 2 * h : 3 * h], g[:, 3 * h :]
        dh = dH[t] + dh_carry
        ts = np.tanh(S[t + 1])
        ds = ds_carry + dh * og * (1.0 - ts * ts)
        dz = DZ[t]
        dz[:, :h] = ds * cg * ig * (1.0 - ig)
        dz[:, h : 2 * h] = ds * Mm[t] * fg * (1.0 - fg)
        dz[:, 2 * h : 3 * h] = dh * ts * og * (1.0 - og)
        dz[:, 3 * h :] = ds * ig * (1.0 - cg * cg)
        dm = ds * fg
        q = Q[t]
        dq = (At @ dm) * (1.0 - q * q)
        DQ[t] = dq
        ds_carry = dm + dq @ WgT
        dhd = dz @ WhT
        dh_carry = dhd if rmask is None else dhd * rmask
    DZ2 = DZ.reshape(T * n, 4 * h)
    DQ2 = DQ.reshape(T * n, h)
    dWx = X.reshape(T * n, -1).T @ DZ2
    dWh = Hd.reshape(T * n, h).T @ DZ2
    db = DZ2.sum(axis=0)
    dWg = S[:-1].reshape(T * n, h).T @ DQ2
    dbg = DQ2.sum(axis=0)
    dX = (DZ2 @ Wx.T).reshape(X.shape) if need_dx else None
    return dX, dWx, dWh, db, dWg, dbg
