# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot loops in :mod:`shortcutlab.kernels`.

Every function here has a numpy twin in ``_pykernels`` with the same
signature and the same floating-point operation order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def rasterize_polygon(const double[::1] xs, const double[::1] ys, int height, int width):
    """Even-odd fill of a closed polygon sampled at pixel centres."""
    cdef Py_ssize_t n = xs.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.zeros((height, width), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] mask = out
    cdef Py_ssize_t r, c, i, j
    cdef double py, px, x0, y0, x1, y1, cross
    for r in range(height):
        py = r + 0.5
        for i in range(n):
            j = i + 1 if i + 1 < n else 0
            x0 = xs[i]
            y0 = ys[i]
            x1 = xs[j]
            y1 = ys[j]
            if (y0 > py) == (y1 > py):
                continue
            cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            for c in range(width):
                px = c + 0.5
                if px < cross:
                    mask[r, c] ^= 1
    return out


def softmax_xent(const double[:, ::1] logits, const long long[::1] labels):
    """Row-wise cross-entropy against integer labels.

    Returns per-row losses and the softmax probabilities.
    """
    cdef Py_ssize_t b = logits.shape[0], n = logits.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] losses = np.empty(b, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] probs = np.empty((b, n), dtype=np.float64)
    cdef double[::1] lv = losses
    cdef double[:, ::1] pv = probs
    cdef Py_ssize_t i, j
    cdef double mx, total
    for i in range(b):
        mx = logits[i, 0]
        for j in range(1, n):
            if logits[i, j] > mx:
                mx = logits[i, j]
        total = 0.0
        for j in range(n):
            pv[i, j] = exp(logits[i, j] - mx)
            total = total + pv[i, j]
        for j in range(n):
            pv[i, j] = pv[i, j] / total
        lv[i] = log(total) - (logits[i, labels[i]] - mx)
    return losses, probs


def softmax_xent_uniform(const double[:, ::1] logits):
    """Row-wise cross-entropy against the uniform distribution."""
    cdef Py_ssize_t b = logits.shape[0], n = logits.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] losses = np.empty(b, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] probs = np.empty((b, n), dtype=np.float64)
    cdef double[::1] lv = losses
    cdef double[:, ::1] pv = probs
    cdef Py_ssize_t i, j
    cdef double mx, total, shifted
    for i in range(b):
        mx = logits[i, 0]
        for j in range(1, n):
            if logits[i, j] > mx:
                mx = logits[i, j]
        total = 0.0
        shifted = 0.0
        for j in range(n):
            pv[i, j] = exp(logits[i, j] - mx)
            total = total + pv[i, j]
            shifted = shifted + (logits[i, j] - mx)
        for j in range(n):
            pv[i, j] = pv[i, j] / total
        lv[i] = log(total) - shifted / n
    return losses, probs


def adam_update(const double[::1] param, const double[::1] grad, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, double weight_decay,
                double bias1, double bias2):
    """One Adam step on flat arrays. Updates ``m`` and ``v`` in place, returns the new parameter."""
    cdef Py_ssize_t n = param.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double g, mhat, vhat
    for i in range(n):
        g = grad[i] + weight_decay * param[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        mhat = m[i] / bias1
        vhat = v[i] / bias2
        ov[i] = param[i] - lr * mhat / (sqrt(vhat) + eps)
    return out
