"""Position-wise layers as forward/backward function pairs over numpy arrays.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the cache and the upstream gradient and returns the input gradient plus
parameter gradients.  Linear maps act on the last axis.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def linear_forward(x, W, b):
    return x @ W + b, x


def linear_backward(x, dy, W):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dy @ W.T, dW, db


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(cache, dy):
    xhat, inv, gamma = cache
    lead = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(cache, dy):
    x, cdf = cache
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def prelu_forward(x, slope):
    neg = x < 0
    return np.where(neg, slope * x, x), (x, neg, slope)


def prelu_backward(cache, dy):
    x, neg, slope = cache
    dx = np.where(neg, slope * dy, dy)
    dslope = np.sum(np.where(neg, x * dy, 0.0))
    return dx, np.asarray(dslope)


def dropout_forward(x, rate, rng, train):
    if not train or rate <= 0.0:
        return x, None
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(mask, dy):
    return dy if mask is None else dy * mask


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)
