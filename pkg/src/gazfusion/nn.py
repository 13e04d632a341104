"""Differentiable building blocks on float64 arrays, each with a hand-written backward.

Forward functions return ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache. Leading axes are batch axes.
"""
from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def window_mask(length: int, window: int | None) -> np.ndarray:
    """``(T, T)`` bool, True where ``|t - t'| <= window``; ``None`` means unbounded."""
    idx = np.arange(length)
    if window is None:
        return np.ones((length, length), dtype=bool)
    return np.abs(idx[:, None] - idx[None, :]) <= window


def attention_mask(valid: np.ndarray, window: int | None) -> np.ndarray:
    """``(B, T, T)`` allowed (query, key) pairs: inside the window and not padding.

    A query always sees itself, so padded rows still have a defined softmax.
    """
    T = valid.shape[1]
    win = window_mask(T, window)
    allowed = win[None] & valid[:, None, :]
    allowed |= np.eye(T, dtype=bool)[None]
    return allowed


def dropout_mask(rng: np.random.Generator | None, shape, p: float) -> np.ndarray | None:
    if rng is None or p <= 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


# --- dot-product attention -------------------------------------------------


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, allowed: np.ndarray,
           scale: float):
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    scores = np.where(allowed, scores, -np.inf)
    weights = softmax(scores)
    out = np.matmul(weights, v)
    return out, (q, k, v, weights, scale)


def attend_backward(dout: np.ndarray, cache):
    q, k, v, weights, scale = cache
    dweights = np.matmul(dout, np.swapaxes(v, -1, -2))
    dv = np.matmul(np.swapaxes(weights, -1, -2), dout)
    dscores = weights * (dweights - np.sum(dweights * weights, axis=-1, keepdims=True))
    dscores *= scale
    dq = np.matmul(dscores, k)
    dk = np.matmul(np.swapaxes(dscores, -1, -2), q)
    return dq, dk, dv


# --- layer norm ------------------------------------------------------------


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=axes)
    dbias = np.sum(dy, axis=axes)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


# --- activations / affine ----------------------------------------------------


def gelu(x: np.ndarray):
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy: np.ndarray, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Gradients of ``y = x @ W + b`` with any number of leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


def mlp(x: np.ndarray, W1, b1, W2, b2):
    """One tanh hidden layer."""
    hidden = np.tanh(x @ W1 + b1)
    return hidden @ W2 + b2, (x, hidden)


def mlp_backward(dout: np.ndarray, cache, W1, W2):
    x, hidden = cache
    dhidden, dW2, db2 = linear_backward(dout, hidden, W2)
    dz = dhidden * (1.0 - hidden * hidden)
    dx, dW1, db1 = linear_backward(dz, x, W1)
    return dx, dW1, db1, dW2, db2
