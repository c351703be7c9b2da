"""Loss terms and gradient routing for source, target, cross-independence and association."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import model as M
from . import tensorops as T
from .tensorops import Tensor


@dataclass(frozen=True)
class LossConfig:
    lam: float = 10.0
    gamma: float = 5.0
    alpha: float = 5.0
    beta: float = 20.0
    tau: float = 0.33
    constraint: str = "none"        # none | IL | CI
    association_reg: bool = False

    def __post_init__(self):
        for name in ("lam", "gamma", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.constraint not in ("none", "IL", "CI"):
            raise ValueError(f"constraint must be none, IL or CI, got {self.constraint!r}")


class Batch(NamedTuple):
    """Prepared inputs (B, n_in) and integer labels (B, L).

    Source batches carry one label column per factor; target batches carry
    (attribute, object).
    """
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)


def loss_source(logits: list, labels) -> Tensor:
    """Mean over factors of the batch-mean cross-entropy."""
    labels = np.atleast_2d(np.asarray(labels, dtype=np.int64))
    if not logits:
        raise ValueError("loss_source needs at least one factor")
    if labels.shape[1] != len(logits):
        raise T.ShapeError(f"{len(logits)} heads but labels have {labels.shape[1]} columns")
    total = T.cross_entropy(logits[0], labels[:, 0])
    for k in range(1, len(logits)):
        total = total + T.cross_entropy(logits[k], labels[:, k])
    return T.scale(total, 1.0 / len(logits))


def loss_target(attr_logits: Tensor, obj_logits: Tensor, a, o) -> Tensor:
    return T.scale(T.cross_entropy(attr_logits, a) + T.cross_entropy(obj_logits, o), 0.5)


def loss_ci_adversary(params: M.ModelParams, Z: Tensor, source_labels) -> Tensor:
    """Σ over ordered pairs of CE(H'_{k1k2}(z_{k1}), y^{k2}); Z is detached here."""
    labels = np.atleast_2d(np.asarray(source_labels, dtype=np.int64))
    out = Tensor(np.asarray(0.0))
    for (k1, k2), logits in M.predict_ci(params, T.stop_grad(Z)).items():
        out = out + T.cross_entropy(logits, labels[:, k2])
    return out


def loss_ci(params: M.ModelParams, Z: Tensor) -> Tensor:
    """Σ over ordered pairs of CE to the uniform distribution; the H' weights are frozen."""
    out = Tensor(np.asarray(0.0))
    for logits in M.predict_ci(params, Z, frozen=True).values():
        out = out + T.cross_entropy_to_uniform(logits)
    return out


def loss_entropy(A: Tensor) -> Tensor:
    """Sum of the column entropies of A (natural log)."""
    return T.entropy_sum(A)


def suppress_coefficients(A: np.ndarray, tau: float) -> np.ndarray:
    """Constant weights c with L_Suppress = Σ c·A; ties in the row max go to the lowest index."""
    A = np.asarray(A, dtype=np.float64)
    c = np.zeros_like(A)
    jmax = np.argmax(A, axis=1)
    for i, j in enumerate(jmax):
        top = A[i, j]
        if top > tau:
            c[i] = top - tau
            c[i, j] = 0.0
    return c


def loss_suppress(A: Tensor, tau: float, coefficients: Optional[np.ndarray] = None) -> Tensor:
    c = suppress_coefficients(A.data, tau) if coefficients is None else coefficients
    return T.sum(T.mul(A, Tensor(c)))


def _check(batch: Optional[Batch], what: str) -> None:
    if batch is not None and len(batch) == 0:
        raise ValueError(f"empty {what} batch")


def total_loss(params: M.ModelParams, source: Optional[Batch], target: Optional[Batch],
               config: LossConfig, suppress_coefficients_override: Optional[np.ndarray] = None) -> tuple:
    """Composite loss and a dict of its (unweighted) parts as floats.

    ``source=None`` trains without the source domain; ``target=None`` gives a
    source-only objective. With IL the target branch reads a stop-gradded Z.
    The override pins the suppression weights, which finite-difference checks need.
    """
    _check(source, "source")
    _check(target, "target")
    if source is None and target is None:
        raise ValueError("total_loss needs at least one batch")
    xs = [b.x for b in (source, target) if b is not None]
    Z = M.encode(params, xs[0] if len(xs) == 1 else np.concatenate(xs))
    n_src = len(source) if source is not None else 0
    parts = {}
    terms = []
    if source is not None:
        Zs = Z if target is None else T.index(Z, slice(0, n_src))
        ls = loss_source(M.predict_source(params, Zs), source.y)
        parts["source"] = ls.item()
        terms.append(T.scale(ls, config.lam))
        if config.constraint == "CI" and M.ci_pairs(params):
            lci = loss_ci(params, Zs)
            parts["ci"] = lci.item()
            terms.append(T.scale(lci, config.gamma))
    if target is not None:
        Zt = Z if source is None else T.index(Z, slice(n_src, None))
        if config.constraint == "IL":
            Zt = T.stop_grad(Zt)
        A = M.association(params)
        z_a, z_o = M.apply_association(Zt, A)
        la, lo = M.predict_target(params, z_a, z_o)
        lt = loss_target(la, lo, target.y[:, 0], target.y[:, 1])
        parts["target"] = lt.item()
        terms.insert(0, lt)
    if config.association_reg and params.config.association == "learned":
        A = M.association(params)
        le, lsup = loss_entropy(A), loss_suppress(A, config.tau, suppress_coefficients_override)
        parts["entropy"], parts["suppress"] = le.item(), lsup.item()
        terms += [T.scale(le, config.alpha), T.scale(lsup, config.beta)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    parts["total"] = total.item()
    return total, parts


def value_and_grads(params: M.ModelParams, source: Optional[Batch], target: Optional[Batch],
                    config: LossConfig, names=None) -> tuple:
    """(parts, {name: gradient}) of total_loss for the named parameters."""
    names = params.trainable() if names is None else list(names)
    with T.GradGraph() as g:
        loss, parts = total_loss(params, source, target, config)
        grads = g.backward(loss)
    return parts, dict(zip(names, g.grads_for(grads, [params.tensors[n] for n in names])))


def adversary_value_and_grads(params: M.ModelParams, source: Batch) -> tuple:
    """(L_H', {ci name: gradient}) with Z computed outside the graph."""
    names = params.group("ci.")
    Z = M.encode(params, source.x)
    with T.GradGraph() as g:
        loss = loss_ci_adversary(params, Z, source.y)
        grads = g.backward(loss)
    return loss.item(), dict(zip(names, g.grads_for(grads, [params.tensors[n] for n in names])))


# ---------------------------------------------------------------- gradient check

GRADCHECK_CELLS = tuple((rep, constraint, assoc) for rep in ("global", "factor")
                        for constraint in ("none", "IL", "CI") for assoc in ("manual", "learned"))


def gradcheck_problem(rep: str, constraint: str, assoc: str, seed: int = 0, batch: int = 4) -> tuple:
    """A small random model and (source, target) batches for one architecture cell."""
    cfg = M.ModelConfig(representation=rep, factor_dim=3, encoder_hidden=(7, 6), head_hidden=4,
                        association=assoc, constraint=constraint)
    p = M.init_params(cfg, 10, ("shape", "color", "lightness"), (4, 3, 2), (3, 4), seed=seed)
    rng = np.random.default_rng(seed + 100)
    if assoc == "learned":
        p.tensors["assoc_logits"] = Tensor(rng.normal(size=p.tensors["assoc_logits"].shape) * 1.5,
                                           requires_grad=True)
    src = Batch(rng.normal(size=(batch, p.input_dim)),
                np.stack([rng.integers(0, c, batch) for c in p.source_counts], axis=1))
    tgt = Batch(rng.normal(size=(batch, p.input_dim)),
                np.stack([rng.integers(0, c, batch) for c in p.target_counts], axis=1))
    return p, src, tgt, LossConfig(constraint=constraint, association_reg=(assoc == "learned"))


def gradient_errors(params: M.ModelParams, source: Batch, target: Batch, config: LossConfig,
                    h: float = 1e-6) -> dict:
    """Relative error of every analytic parameter gradient against central differences.

    Stop-gradient edges are reproduced numerically: under IL the encoder is
    differentiated without the target term, and the suppression weights are
    held at their value at the evaluation point. CI heads receive no gradient
    from the main objective, so their entry is the largest absolute analytic
    value, which must be exactly zero.
    """
    names = list(params.tensors)
    _, grads = value_and_grads(params, source, target, config, names)
    frozen = None
    if config.association_reg and params.config.association == "learned":
        frozen = suppress_coefficients(M.association(params).data, config.tau)

    def parts():
        return total_loss(params, source, target, config, frozen)[1]

    def full():
        return parts()["total"]

    def without_target():
        d = parts()
        return d["total"] - d["target"]

    out = {}
    for n in names:
        if n.startswith("ci."):
            out[n] = float(np.abs(grads[n]).max())
            continue
        f = without_target if (config.constraint == "IL" and n.startswith("encoder")) else full
        out[n] = T.relative_error(grads[n], T.central_difference(f, params.tensors[n].data, h))
    return out
