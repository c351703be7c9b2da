"""Numpy implementations of the kernels; used when the Cython module is absent."""
import numpy as np


def rasterize_polygon(xs, ys, height, width):
    """Even-odd fill of a closed polygon sampled at pixel centres."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0, y0 = xs[None, :], ys[None, :]
    x1, y1 = np.roll(xs, -1)[None, :], np.roll(ys, -1)[None, :]
    py = (np.arange(height, dtype=np.float64) + 0.5)[:, None]
    active = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    cross = np.where(active, cross, -np.inf)
    px = np.arange(width, dtype=np.float64) + 0.5
    hits = (px[None, None, :] < cross[:, :, None]).sum(axis=1)
    return (hits & 1).astype(np.uint8)


def softmax_xent(logits, labels):
    """Row-wise cross-entropy against integer labels; returns (losses, probs)."""
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    total = e.sum(axis=1)
    probs = e / total[:, None]
    rows = np.arange(logits.shape[0])
    losses = np.log(total) - (logits[rows, labels] - mx[:, 0])
    return losses, probs


def softmax_xent_uniform(logits):
    """Row-wise cross-entropy against the uniform distribution; returns (losses, probs)."""
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    e = np.exp(shifted)
    total = e.sum(axis=1)
    probs = e / total[:, None]
    losses = np.log(total) - shifted.sum(axis=1) / logits.shape[1]
    return losses, probs


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, bias1, bias2):
    """One Adam step on flat arrays. Updates ``m`` and ``v`` in place, returns the new parameter."""
    g = grad + weight_decay * param
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / bias1
    vhat = v / bias2
    return param - lr * mhat / (np.sqrt(vhat) + eps)
