"""Open-world seen/unseen/HM scoring, bias sweeps, linear probes and report files."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from . import tensorops as T
from .datagen import Dataset, write_ppm
from .tensorops import Tensor


class DataError(ValueError):
    """Test labels fall outside the attribute x object grid."""


def harmonic_mean(seen: float, unseen: float) -> float:
    s = seen + unseen
    return 0.0 if s == 0 else 2.0 * seen * unseen / s


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(params: M.ModelParams, pixels: np.ndarray, chunk: int = 512) -> tuple:
    la, lo = [], []
    for i in range(0, len(pixels), chunk):
        a, o = M.target_logits(params, M.prepare_inputs(pixels[i:i + chunk]))
        la.append(a)
        lo.append(o)
    return np.concatenate(la), np.concatenate(lo)


@dataclass
class TestLogits:
    """Head outputs on a labelled test set; scoring reuses them across biases."""
    attr_logits: np.ndarray
    obj_logits: np.ndarray
    a: np.ndarray
    o: np.ndarray

    @classmethod
    def from_dataset(cls, params: M.ModelParams, ds: Dataset, split: str = "test") -> "TestLogits":
        la, lo = _forward(params, ds.splits[split].pixels)
        a, o = ds.pair_labels(split)
        return cls(la, lo, np.asarray(a), np.asarray(o))


def unseen_mask(n_attr: int, n_obj: int, seen_pairs) -> np.ndarray:
    mask = np.ones((n_attr, n_obj), dtype=bool)
    for a, o in seen_pairs:
        mask[a, o] = False
    return mask


def predict_pairs(attr_logits: np.ndarray, obj_logits: np.ndarray, seen_pairs, bias: float = 0.0) -> tuple:
    """Argmax over the full grid of log p(a) + log p(o) + bias·[unseen]; ties go to the smallest (a, o)."""
    n_attr, n_obj = attr_logits.shape[1], obj_logits.shape[1]
    score = _log_softmax(attr_logits)[:, :, None] + _log_softmax(obj_logits)[:, None, :]
    if bias:
        score = score + bias * unseen_mask(n_attr, n_obj, seen_pairs)
    flat = np.argmax(score.reshape(len(score), -1), axis=1)
    return flat // n_obj, flat % n_obj


def score_open_world(t: TestLogits, seen_pairs, bias: float = 0.0) -> tuple:
    """(seen %, unseen %, HM %) with both labels required to be correct."""
    n_attr, n_obj = t.attr_logits.shape[1], t.obj_logits.shape[1]
    if len(t.a) and (t.a.min() < 0 or t.a.max() >= n_attr or t.o.min() < 0 or t.o.max() >= n_obj):
        raise DataError("test label outside the attribute x object grid")
    pa, po = predict_pairs(t.attr_logits, t.obj_logits, seen_pairs, bias)
    correct = (pa == t.a) & (po == t.o)
    is_unseen = unseen_mask(n_attr, n_obj, seen_pairs)[t.a, t.o]
    seen = 100.0 * correct[~is_unseen].mean() if (~is_unseen).any() else 0.0
    unseen = 100.0 * correct[is_unseen].mean() if is_unseen.any() else 0.0
    return float(seen), float(unseen), harmonic_mean(float(seen), float(unseen))


def evaluate_open_world(params: M.ModelParams, target_test: Dataset, seen_pairs=None, bias: float = 0.0,
                        split: str = "test") -> tuple:
    seen_pairs = target_test.seen_pairs if seen_pairs is None else seen_pairs
    return score_open_world(TestLogits.from_dataset(params, target_test, split), seen_pairs, bias)


def pair_accuracy_grid(t: TestLogits, seen_pairs) -> np.ndarray:
    """Per (attribute, object) accuracy in %, NaN for pairs absent from the test set."""
    n_attr, n_obj = t.attr_logits.shape[1], t.obj_logits.shape[1]
    pa, po = predict_pairs(t.attr_logits, t.obj_logits, seen_pairs)
    correct = (pa == t.a) & (po == t.o)
    hits = np.zeros((n_attr, n_obj))
    counts = np.zeros((n_attr, n_obj))
    np.add.at(hits, (t.a, t.o), correct)
    np.add.at(counts, (t.a, t.o), 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, 100.0 * hits / np.maximum(counts, 1), np.nan)


def bias_sweep_logits(t: TestLogits, seen_pairs, grid) -> dict:
    grid = [float(b) for b in grid]
    if not grid:
        raise ValueError("bias grid must be nonempty")
    curve = [(b, *score_open_world(t, seen_pairs, b)) for b in grid]
    return {
        "curve": [list(c) for c in curve],
        "max_seen": max(c[1] for c in curve),
        "max_unseen": max(c[2] for c in curve),
        "max_hm": max(c[3] for c in curve),
    }


def bias_sweep(params: M.ModelParams, target_test: Dataset, seen_pairs=None, grid=(0.0,)) -> dict:
    seen_pairs = target_test.seen_pairs if seen_pairs is None else seen_pairs
    return bias_sweep_logits(TestLogits.from_dataset(params, target_test), seen_pairs, grid)


def parse_grid(text: str) -> list:
    """``lo:hi:steps`` into an evenly spaced list including both ends."""
    lo, hi, steps = text.split(":")
    if int(steps) < 1:
        raise ValueError(f"bias grid needs at least one point: {text!r}")
    return [float(v) for v in np.linspace(float(lo), float(hi), int(steps))]


# ---------------------------------------------------------------- probes

def linear_probe(representations, labels, class_count: int, seed: int = 0, epochs: int = 200,
                 learning_rate: float = 0.01, standardize: bool = False) -> float:
    """Held-out accuracy (%) of an affine softmax classifier on frozen features (80/20 split)."""
    X = np.asarray(representations, dtype=np.float64).reshape(len(labels), -1)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValueError("linear_probe needs at least two classes")
    order = np.random.default_rng([seed, 0x9B0BE]).permutation(len(y))
    n_train = int(round(0.8 * len(y)))
    tr, ev = order[:n_train], order[n_train:]
    Xs = X - X[tr].mean(axis=0)
    if standardize:
        sd = X[tr].std(axis=0)
        sd[sd < 1e-12] = 1.0
        Xs = Xs / sd
    params = {"W": Tensor(np.zeros((class_count, X.shape[1])), requires_grad=True),
              "b": Tensor(np.zeros(class_count), requires_grad=True)}
    opt = T.Adam(params, ["W", "b"], T.AdamHyper(learning_rate=learning_rate))
    xt = Tensor(Xs[tr])
    for _ in range(epochs):
        with T.GradGraph() as g:
            loss = T.cross_entropy(T.affine(xt, params["W"], params["b"]), y[tr])
            grads = g.backward(loss)
        opt.step(params, dict(zip(("W", "b"), g.grads_for(grads, [params["W"], params["b"]]))))
    pred = np.argmax(Xs[ev] @ params["W"].data.T + params["b"].data, axis=1)
    return float(100.0 * (pred == y[ev]).mean())


def factor_representations(params: M.ModelParams, pixels: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = [M.encode(params, M.prepare_inputs(pixels[i:i + chunk])).data for i in range(0, len(pixels), chunk)]
    return np.concatenate(out)


def cross_prediction_matrix(params: M.ModelParams, ds: Dataset, kind: str = "target", split: str = "test",
                            seed: int = 0) -> np.ndarray:
    """Probe accuracies: rows are representations, columns are labels.

    ``kind="source"`` probes every z_k for every factor label (K x K);
    ``kind="target"`` probes z_a and z_o for (attribute, object) (2 x 2).
    """
    Z = factor_representations(params, ds.splits[split].pixels)
    if kind == "source":
        if params.columns == 1:
            raise ValueError("source cross-prediction needs factor representations")
        f = ds.splits[split].factors
        K = params.K
        return np.array([[_probe_or_nan(Z[:, :, k], f[:, l], ds.catalog.class_counts[l], seed)
                          for l in range(K)] for k in range(K)])
    z_a, z_o = M.apply_association(Tensor(Z), M.association(params))
    a, o = ds.pair_labels(split)
    n_attr, n_obj = params.target_counts
    reps = (z_a.data, z_o.data)
    labs = ((a, n_attr), (o, n_obj))
    return np.array([[_probe_or_nan(r, lab, n, seed) for lab, n in labs] for r in reps])


def _probe_or_nan(reps, labels, class_count: int, seed: int) -> float:
    """Constant label columns (a fixed nuisance factor) have no probe accuracy."""
    if len(np.unique(labels)) < 2:
        return float("nan")
    return linear_probe(reps, labels, class_count, seed)


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    cell: str
    seed: int
    seen_acc: float
    unseen_acc: float
    hm_acc: float
    attr_acc: float = 0.0
    obj_acc: float = 0.0
    pair_grid: list = field(default_factory=list)
    bias_curve: Optional[dict] = None
    cross_pred: Optional[list] = None
    assoc_matrix: Optional[list] = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_run(params: M.ModelParams, target: Dataset, cell: str = "run", seed: int = 0,
                 bias_grid=None, crosspred: bool = False, probe_seed: int = 0) -> EvalReport:
    t = TestLogits.from_dataset(params, target)
    seen, unseen, hm = score_open_world(t, target.seen_pairs)
    grid = pair_accuracy_grid(t, target.seen_pairs)
    rep = EvalReport(cell, seed, seen, unseen, hm,
                     attr_acc=float(100.0 * (np.argmax(t.attr_logits, 1) == t.a).mean()),
                     obj_acc=float(100.0 * (np.argmax(t.obj_logits, 1) == t.o).mean()),
                     pair_grid=[[None if math.isnan(v) else float(v) for v in row] for row in grid])
    if bias_grid is not None:
        rep.bias_curve = bias_sweep_logits(t, target.seen_pairs, bias_grid)
    if crosspred:
        rep.cross_pred = cross_prediction_matrix(params, target, "target", seed=probe_seed).tolist()
    rep.assoc_matrix = M.association(params).data.tolist()
    return rep


def aggregate(reports) -> dict:
    """Mean/std over seeds; HM both as the mean of per-seed HM and as HM of mean seen/unseen."""
    out = {}
    keys = ("seen_acc", "unseen_acc", "hm_acc", "attr_acc", "obj_acc")
    for k in keys:
        vals = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()) if len(vals) else 0.0,
                  "std": float(vals.std()) if len(vals) else 0.0,
                  "values": vals.tolist()}
    out["hm_of_means"] = harmonic_mean(out["seen_acc"]["mean"], out["unseen_acc"]["mean"])
    out["n_seeds"] = len(reports)
    return out


def _fmt(v) -> str:
    return repr(float(v))


def write_report_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def write_report_csv(path: str, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "seed", "seen", "unseen", "hm"])
        for r in reports:
            w.writerow([r.cell, r.seed, _fmt(r.seen_acc), _fmt(r.unseen_acc), _fmt(r.hm_acc)])


def write_assoc(directory: str, A: np.ndarray, row_names, scale: int = 16) -> None:
    """assoc.csv plus a grayscale-in-RGB heatmap (white = 1) as assoc.ppm."""
    A = np.asarray(A, dtype=np.float64)
    with open(os.path.join(directory, "assoc.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["factor", "attribute", "object"])
        for name, row in zip(row_names, A):
            w.writerow([name, _fmt(row[0]), _fmt(row[1])])
    img = np.repeat(np.repeat(np.clip(A, 0, 1), scale, axis=0), scale, axis=1)
    write_ppm(os.path.join(directory, "assoc.ppm"), np.stack([img] * 3, axis=-1))


def write_crosspred(path: str, matrix: np.ndarray, row_names, col_names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["representation", *col_names])
        for name, row in zip(row_names, np.asarray(matrix)):
            w.writerow([name, *(_fmt(v) for v in row)])
