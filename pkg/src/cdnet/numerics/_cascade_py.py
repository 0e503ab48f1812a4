"""Pure-numpy cascade kernel, used when the compiled extension is absent.

One shared learn-to-decompose unit applied J times to a batch of rows:

    u_i  = X_i P^T
    p_i  = prelu(u_i)
    h1_i = relu(X_i W1x^T + p_i W1p^T + b1)        W1 = [W1x | W1p]
    h2_i = relu(h1_i W2^T + b2)
    a_i  = h2_i W3^T + b3               (squashed by a sigmoid when sigmoid_alpha)
    X_{i+1} = X_i - a_i p_i,   r_e = sum_i a_i p_i

The compiled module in ``_cascade.pyx`` exposes the same two functions.
"""

from __future__ import annotations

import numpy as np


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def cascade_forward(x0, P, slope, W1, b1, W2, b2, W3, b3, J, sigmoid_alpha=False):
    B, d = x0.shape
    h1n, h2n = W2.shape[1], W2.shape[0]
    dt = x0.dtype
    X = np.empty((J + 1, B, d), dtype=dt)
    U = np.empty((J, B, d), dtype=dt)
    Pr = np.empty((J, B, d), dtype=dt)
    H1 = np.empty((J, B, h1n), dtype=dt)
    H2 = np.empty((J, B, h2n), dtype=dt)
    A = np.empty((J, B), dtype=dt)
    re = np.zeros((B, d), dtype=dt)
    W1x, W1p = W1[:, :d], W1[:, d:]
    w3 = W3[0]
    X[0] = x0
    for i in range(J):
        x = X[i]
        u = x @ P.T
        p = np.where(u >= 0, u, slope * u)
        h1 = np.maximum(x @ W1x.T + p @ W1p.T + b1, 0.0)
        h2 = np.maximum(h1 @ W2.T + b2, 0.0)
        a = h2 @ w3 + b3[0]
        if sigmoid_alpha:
            a = _sigmoid(a)
        f = a[:, None] * p
        re += f
        X[i + 1] = x - f
        U[i], Pr[i], H1[i], H2[i], A[i] = u, p, h1, h2, a
    return re, (X, U, Pr, H1, H2, A)


def cascade_backward(cache, P, slope, W1, W2, W3, g_inputs, g_re, sigmoid_alpha=False):
    """Gradients of a scalar loss given d/d(input_i) and d/d(r_e).

    Returns (g_x0, gP, g_slope, gW1, gb1, gW2, gb2, gW3, gb3).
    """
    X, U, Pr, H1, H2, A = cache
    J, B, d = U.shape
    dt = X.dtype
    gP = np.zeros_like(P)
    gW1 = np.zeros_like(W1)
    gb1 = np.zeros(W1.shape[0], dtype=dt)
    gW2 = np.zeros_like(W2)
    gb2 = np.zeros(W2.shape[0], dtype=dt)
    gW3 = np.zeros_like(W3)
    gb3 = np.zeros(1, dtype=dt)
    g_slope = 0.0
    W1x, W1p = W1[:, :d], W1[:, d:]
    w3 = W3[0]
    if g_re is None:
        g_re = np.zeros((B, d), dtype=dt)
    g_next = np.zeros((B, d), dtype=dt)
    for i in range(J - 1, -1, -1):
        x, u, p, h1, h2, a = X[i], U[i], Pr[i], H1[i], H2[i], A[i]
        gf = g_re - g_next
        gx = g_next if g_inputs is None else g_next + g_inputs[i]
        ga = np.einsum("bd,bd->b", gf, p)
        gp = a[:, None] * gf
        if sigmoid_alpha:
            ga = ga * a * (1.0 - a)
        gW3[0] += ga @ h2
        gb3[0] += ga.sum()
        gh2 = np.outer(ga, w3) * (h2 > 0)
        gW2 += gh2.T @ h1
        gb2 += gh2.sum(axis=0)
        gh1 = (gh2 @ W2) * (h1 > 0)
        gW1[:, :d] += gh1.T @ x
        gW1[:, d:] += gh1.T @ p
        gb1 += gh1.sum(axis=0)
        gx = gx + gh1 @ W1x
        gp += gh1 @ W1p
        neg = u < 0
        g_slope += float(np.sum(gp * np.where(neg, u, 0.0)))
        gu = np.where(neg, slope * gp, gp)
        gP += gu.T @ x
        g_next = gx + gu @ P
    return g_next, gP, g_slope, gW1, gb1, gW2, gb2, gW3, gb3
