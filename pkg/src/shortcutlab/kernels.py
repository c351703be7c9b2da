"""Backend selection for the inner-loop kernels.

The compiled ``_ckernels`` module is used when it imports; otherwise the
numpy versions in ``_pykernels`` take over. Set ``SHORTCUTLAB_PURE=1`` to
force the numpy path (the benchmark and the parity tests do this).
"""
import logging
import os

import numpy as np

from . import _pykernels

logger = logging.getLogger(__name__)

BACKEND = "python"
_impl = _pykernels

if os.environ.get("SHORTCUTLAB_PURE", "") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable, using numpy fallback")


def rasterize_polygon(xs, ys, height: int, width: int) -> np.ndarray:
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    return _impl.rasterize_polygon(xs, ys, int(height), int(width))


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return _impl.softmax_xent(logits, labels)


def softmax_xent_uniform(logits: np.ndarray):
    return _impl.softmax_xent_uniform(np.ascontiguousarray(logits, dtype=np.float64))


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, bias1, bias2):
    """Flat-array Adam update. ``m`` and ``v`` must be contiguous float64 and are modified in place."""
    shape = param.shape
    out = _impl.adam_update(
        np.ascontiguousarray(param, dtype=np.float64).ravel(),
        np.ascontiguousarray(grad, dtype=np.float64).ravel(),
        m.reshape(-1),
        v.reshape(-1),
        float(lr), float(beta1), float(beta2), float(eps), float(weight_decay),
        float(bias1), float(bias2),
    )
    return out.reshape(shape)
