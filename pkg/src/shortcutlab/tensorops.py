"""A small define-by-run reverse-mode differentiation engine.

Tensors wrap float64 numpy arrays. Operations executed while a
:class:`GradGraph` is active are appended to that graph's tape; calling
:meth:`GradGraph.backward` walks the tape once in reverse append order.
Outside a graph every operation is a plain forward computation.

Example::

    W = Tensor(np.eye(2), requires_grad=True)
    with GradGraph() as g:
        loss = cross_entropy(affine(x, W, b), label)
        grads = g.backward(loss)
    dW = grads[g.node_id(W)]
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class GraphError(RuntimeError):
    """A gradient-graph contract was violated."""


class Tensor:
    """Dense float64 array with an optional identity in the active gradient graph.

    The wrapped array is treated as immutable once the tensor exists.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_graph", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._graph: Optional[GradGraph] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _not_scalar(t: Tensor):
    raise GraphError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple
    backward: Optional[Callable]
    leaf: Optional[Tensor] = None


_ACTIVE: list = []


class GradGraph:
    """Append-only tape of operation records.

    Inputs always precede outputs in the tape, so the reverse append order
    is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaf_index: dict[int, int] = {}

    def __enter__(self) -> "GradGraph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def node_id(self, t: Tensor) -> Optional[int]:
        """Node index of ``t`` in this graph, or None if it never entered it."""
        if t._graph is self:
            return t.node_id
        return self._leaf_index.get(id(t))

    def _track(self, t: Tensor) -> Optional[int]:
        nid = self.node_id(t)
        if nid is not None or not t.requires_grad:
            return nid
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, leaf=t))
        self._leaf_index[id(t)] = nid
        return nid

    def _record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, backward) -> Tensor:
        ids = tuple(self._track(x) for x in inputs)
        if all(i is None for i in ids):
            return out
        out.node_id = len(self.nodes)
        out._graph = self
        self.nodes.append(_Node(kind, ids, backward))
        return out

    def backward(self, loss: Tensor) -> dict:
        """Gradients of ``loss`` for every requires_grad leaf, keyed by node id.

        Leaves the loss does not depend on receive zero arrays.
        """
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list = [None] * len(self.nodes)
        start = self.node_id(loss)
        if start is not None:
            grads[start] = np.ones_like(loss.data)
            for i in range(start, -1, -1):
                g = grads[i]
                node = self.nodes[i]
                if g is None or node.backward is None:
                    continue
                for j, gj in zip(node.inputs, node.backward(g)):
                    if j is None or gj is None:
                        continue
                    grads[j] = gj if grads[j] is None else grads[j] + gj
        out = {}
        for i, node in enumerate(self.nodes):
            if node.leaf is not None:
                out[i] = grads[i] if grads[i] is not None else np.zeros_like(node.leaf.data)
        return out

    def grads_for(self, grads: dict, tensors) -> list:
        """Look up gradients for ``tensors`` in a map returned by :meth:`backward`."""
        result = []
        for t in tensors:
            nid = self.node_id(t)
            result.append(grads[nid] if nid in grads else np.zeros_like(t.data))
        return result


def active_graph() -> Optional[GradGraph]:
    return _ACTIVE[-1] if _ACTIVE else None


def _op(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(out_data)
    g = active_graph()
    if g is None:
        return out
    return g._record(kind, inputs, out, backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op("add", a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _op("sub", a.data - b.data, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _op("mul", ad * bd, (a, b),
               lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    return _op("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def stop_grad(x: Tensor) -> Tensor:
    """Identity forward; contributes no gradient to ``x``."""
    return _op("stop_grad", x.data, (x,), lambda g: (None,))


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    if axis is None:
        return _op("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = x.data.sum(axis=axis)
    return _op("sum", out, (x,),
               lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x: Tensor) -> Tensor:
    return scale(sum(x), 1.0 / x.size)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _op("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return _op("index", x.data[key], (x,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy-style matmul with leading batch dimensions on either side."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _op("matmul", ad @ bd, (a, b), backward)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """W·x + b for x of shape (n_in,) or a batch (B, n_in); W is (n_out, n_in)."""
    xd, Wd, bd = x.data, W.data, b.data
    if Wd.ndim != 2 or xd.ndim not in (1, 2) or xd.shape[-1] != Wd.shape[1] or bd.shape != (Wd.shape[0],):
        raise ShapeError(f"affine: x {xd.shape}, W {Wd.shape}, b {bd.shape} do not conform")
    out = xd @ Wd.T + bd
    need_x = x.requires_grad or x._graph is not None

    def backward(g):
        gx = g @ Wd if need_x else None
        if xd.ndim == 1:
            return gx, np.outer(g, xd), g
        return gx, g.T @ xd, g.sum(axis=0)

    return _op("affine", out, (x, W, b), backward)


# ---------------------------------------------------------------- probabilities and losses

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _op("softmax", y, (x,),
               lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _op("log_softmax", out, (x,),
               lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def _as_rows(x: Tensor) -> np.ndarray:
    if x.data.ndim == 1:
        return x.data[None, :]
    if x.data.ndim != 2:
        raise ShapeError(f"expected logits of shape (N,) or (B, N), got {x.shape}")
    return x.data


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    rows = _as_rows(logits)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_cls = rows.shape[1]
    if lab.shape != (rows.shape[0],):
        raise ShapeError(f"cross_entropy: {rows.shape[0]} rows but labels of shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= n_cls):
        raise IndexError(f"cross_entropy: label out of range for {n_cls} classes")
    losses, probs = kernels.softmax_xent(rows, lab)
    batch = rows.shape[0]
    shape = logits.shape

    def backward(g):
        d = probs.copy()
        d[np.arange(batch), lab] -= 1.0
        return ((d * (g / batch)).reshape(shape),)

    return _op("cross_entropy", np.asarray(losses.mean()), (logits,), backward)


def cross_entropy_to_uniform(logits: Tensor) -> Tensor:
    """Mean over the batch of -(1/N) Σ_j log softmax(logits)[j]."""
    rows = _as_rows(logits)
    losses, probs = kernels.softmax_xent_uniform(rows)
    batch, n_cls = rows.shape
    shape = logits.shape
    return _op("cross_entropy_to_uniform", np.asarray(losses.mean()), (logits,),
               lambda g: (((probs - 1.0 / n_cls) * (g / batch)).reshape(shape),))


def entropy_sum(p: Tensor) -> Tensor:
    """Σ -p ln p over all entries, with 0 ln 0 taken as 0."""
    pd = p.data
    pos = pd > 0
    logp = np.log(np.where(pos, pd, 1.0))
    return _op("entropy_sum", np.asarray(-(pd * logp).sum()), (p,),
               lambda g: (np.where(pos, -(logp + 1.0), 0.0) * g,))


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)

    @classmethod
    def like(cls, param: Tensor, hyper: AdamHyper) -> "AdamState":
        return cls(np.zeros(param.shape), np.zeros(param.shape), 0, hyper)


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState) -> Tensor:
    """Adam with bias correction; weight decay enters as an L2 term added to the gradient.

    Moments in ``state`` are updated in place. Returns the new parameter tensor.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    h = state.hyper
    state.step_count += 1
    t = state.step_count
    new = kernels.adam_update(
        param.data, grad, state.m, state.v,
        h.learning_rate, h.beta1, h.beta2, h.epsilon, h.weight_decay,
        1.0 - h.beta1 ** t, 1.0 - h.beta2 ** t,
    )
    return Tensor(new, requires_grad=param.requires_grad)


class Adam:
    """Adam over a dict of named parameter tensors.

    ``step`` rebinds entries of the dict to new tensors rather than mutating
    arrays in place.
    """

    def __init__(self, params: dict, names: Sequence[str], hyper: AdamHyper):
        self.names = list(names)
        self.hyper = hyper
        self.states = {n: AdamState.like(params[n], hyper) for n in self.names}

    def step(self, params: dict, grads: dict) -> None:
        for n in self.names:
            params[n] = adam_step(params[n], grads[n], self.states[n])


# ---------------------------------------------------------------- checking

def central_difference(f: Callable[[], float], array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """||a - n|| / max(||a|| + ||n||, floor) over the whole array."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))
