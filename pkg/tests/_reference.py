"""Plain numpy reference implementations used as test oracles.

Nothing here touches the autodiff engine: gradients of the TTT inner loss are
written out by hand, so agreement with the library is a real cross-check.
"""

import math

import numpy as np
from scipy.special import erf

EPS = 1e-6


def gelu(x):
    return 0.5 * x * (1 + erf(x / math.sqrt(2)))


def gelu_prime(x):
    return 0.5 * (1 + erf(x / math.sqrt(2))) + x * np.exp(-x * x / 2) / math.sqrt(2 * math.pi)


def layer_norm(c, g, b, eps=EPS):
    mu = c.mean(-1, keepdims=True)
    sd = np.sqrt(c.var(-1, keepdims=True) + eps)
    xhat = (c - mu) / sd
    return xhat * g + b, xhat, sd


def layer_norm_backward(dy, xhat, sd, g):
    dx = dy * g
    return (dx - dx.mean(-1, keepdims=True) - xhat * (dx * xhat).mean(-1, keepdims=True)) / sd


def core(u, W):
    if len(W) == 1:
        return u @ W[0], None
    h = u @ W[0]
    return gelu(h) @ W[1], h


def f(u, W, g, b):
    c, _ = core(u, W)
    return u + layer_norm(c, g, b)[0]


def inner_grad(u, v, W, g, b):
    """Gradient of sum ||f(u; W) - v||^2 over the rows of u, per state matrix."""
    c, h = core(u, W)
    y, xhat, sd = layer_norm(c, g, b)
    dc = layer_norm_backward(2 * (u + y - v), xhat, sd, g)
    if len(W) == 1:
        return [u.T @ dc]
    a = gelu(h)
    dh = (dc @ W[1].T) * gelu_prime(h)
    return [u.T @ dh, a.T @ dc]


def ttt_scan(X, p, b, eta, heads=1):
    """Mini-batched TTT scan on one (T, d) sequence.

    ``p`` maps names to arrays: theta_K/V/Q (k, d), theta_O (d, k), W0 list of
    (heads, ...) arrays, ln_gain/ln_bias (heads, k/heads).
    """
    T = X.shape[0]
    k = p["theta_K"].shape[0]
    kh = k // heads
    U, V, Q = (X @ p[n].T for n in ("theta_K", "theta_V", "theta_Q"))
    Z = np.zeros((T, k))
    for hd in range(heads):
        cols = slice(hd * kh, (hd + 1) * kh)
        W = [w[hd].copy() for w in p["W0"]]
        g, bb = p["ln_gain"][hd], p["ln_bias"][hd]
        for s in range(0, T, b):
            e = min(s + b, T)
            grads = inner_grad(U[s:e, cols], V[s:e, cols], W, g, bb)
            W = [w - (eta / (e - s)) * gw for w, gw in zip(W, grads)]
            Z[s:e, cols] = f(Q[s:e, cols], W, g, bb)
    return Z @ p["theta_O"].T


def attention(X, Wq, Wk, Wv, Wo, admissible):
    """Single-head masked softmax attention, one row at a time."""
    q, k, v = X @ Wq.T, X @ Wk.T, X @ Wv.T
    out = np.zeros_like(v)
    for t in range(X.shape[0]):
        cols = np.flatnonzero(admissible[t])
        s = q[t] @ k[cols].T / math.sqrt(q.shape[1])
        w = np.exp(s - s.max())
        out[t] = (w / w.sum()) @ v[cols]
    return out @ Wo.T


def linear_attn(q, k, v, a):
    """Brute force z_t = sum_{s<=t} (prod_{r=s+1..t} a_r) v_s (k_s . q_t)."""
    T = q.shape[0]
    z = np.zeros((T, v.shape[1]))
    for t in range(T):
        for s in range(t + 1):
            z[t] += np.prod(a[s + 1:t + 1]) * v[s] * (k[s] @ q[t])
    return z


def gated_delta(q, k, v, a, beta):
    """Column-vector form: S_t = a_t S_{t-1} (I - b k k^T) + b v k^T, z_t = S_t q_t."""
    dk = k.shape[1]
    S = np.zeros((v.shape[1], dk))
    z = []
    for t in range(q.shape[0]):
        kt = k[t][:, None]
        S = a[t] * S @ (np.eye(dk) - beta[t] * kt @ kt.T) + beta[t] * v[t][:, None] @ kt.T
        z.append(S @ q[t])
    return np.array(z)
