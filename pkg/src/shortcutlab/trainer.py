"""Joint source/target minibatch training with validation-based model selection."""
from __future__ import annotations

import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from . import objectives as O
from . import tensorops as T
from .datagen import Dataset


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.01
    weight_decay: float = 5e-5
    seeds: tuple = (0, 1, 2, 3, 4, 5)
    use_source: bool = True
    steps_per_epoch: Optional[int] = None   # None: one pass over the larger training split
    loss: O.LossConfig = field(default_factory=O.LossConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")

    def adam(self) -> T.AdamHyper:
        return T.AdamHyper(learning_rate=self.learning_rate, weight_decay=self.weight_decay)


@dataclass
class RunRecord:
    cell: str
    seed: int
    config: dict
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    steps: int = 0
    source_samples: int = 0
    target_samples: int = 0
    best_checksum: str = ""
    final_checksums: dict = field(default_factory=dict)
    wall_seconds: float = 0.0
    status: str = "ok"
    message: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best_val_loss"] = None if math.isinf(self.best_val_loss) else self.best_val_loss
        return d


class CyclingSampler:
    """Seeded minibatch indices; reshuffles on exhaustion so batches can span passes."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot sample from an empty split")
        self.n, self.batch, self.rng = n, batch, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch
        while need:
            take = min(need, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + take])
            self.pos += take
            need -= take
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
        return np.concatenate(out)


class DomainData:
    """Float32 pixels plus label columns for one split; batches are prepared lazily."""

    def __init__(self, pixels: np.ndarray, labels: np.ndarray):
        self.pixels = pixels
        self.labels = np.asarray(labels, dtype=np.int64)

    def __len__(self):
        return len(self.pixels)

    def batch(self, idx=None) -> O.Batch:
        if idx is None:
            return O.Batch(M.prepare_inputs(self.pixels), self.labels)
        return O.Batch(M.prepare_inputs(self.pixels[idx]), self.labels[idx])


def source_data(ds: Dataset, split: str) -> DomainData:
    s = ds.splits[split]
    return DomainData(s.pixels, s.factors)


def target_data(ds: Dataset, split: str) -> DomainData:
    a, o = ds.pair_labels(split)
    return DomainData(ds.splits[split].pixels, np.stack([a, o], axis=1))


def validation_loss(params: M.ModelParams, src: Optional[DomainData], tgt: Optional[DomainData],
                    loss: O.LossConfig) -> float:
    sb = src.batch() if src is not None and len(src) else None
    tb = tgt.batch() if tgt is not None and len(tgt) else None
    return O.total_loss(params, sb, tb, loss)[1]["total"]


def train(params: M.ModelParams, source: Optional[Dataset], target: Optional[Dataset],
          config: TrainConfig, cell: str = "run", seed: int = 0) -> tuple:
    """Returns (best params, RunRecord). ``params`` is not modified."""
    t0 = time.perf_counter()
    record = RunRecord(cell=cell, seed=seed, config=resolved_dict(params.config, config))
    use_source = config.use_source and source is not None
    src_tr = source_data(source, "train") if use_source else None
    src_va = source_data(source, "val") if use_source else None
    tgt_tr = target_data(target, "train") if target is not None else None
    tgt_va = target_data(target, "val") if target is not None else None
    if src_tr is None and tgt_tr is None:
        raise ValueError("train needs a source or a target dataset")

    params = params.copy()
    hyper = config.adam()
    main_names = params.trainable()
    main_opt = T.Adam(params.tensors, main_names, hyper)
    ci_names = params.group("ci.")
    use_ci = config.loss.constraint == "CI" and bool(ci_names)
    ci_opt = T.Adam(params.tensors, ci_names, hyper) if use_ci else None

    sizes = [len(d) for d in (src_tr, tgt_tr) if d is not None]
    steps_per_epoch = config.steps_per_epoch or math.ceil(max(sizes) / config.batch_size)
    src_s = CyclingSampler(len(src_tr), config.batch_size, np.random.default_rng([seed, 1])) if src_tr else None
    tgt_s = CyclingSampler(len(tgt_tr), config.batch_size, np.random.default_rng([seed, 2])) if tgt_tr else None

    best = params.copy()
    for epoch in range(config.epochs):
        running = 0.0
        for _ in range(steps_per_epoch):
            sb = src_tr.batch(src_s.next()) if src_s else None
            tb = tgt_tr.batch(tgt_s.next()) if tgt_s else None
            if use_ci:
                _, g_ci = O.adversary_value_and_grads(params, sb)
                ci_opt.step(params.tensors, g_ci)
            parts, grads = O.value_and_grads(params, sb, tb, config.loss, main_names)
            if not math.isfinite(parts["total"]):
                record.status = "diverged"
                record.message = f"non-finite loss at epoch {epoch}, step {record.steps}: {parts}"
                break
            main_opt.step(params.tensors, grads)
            record.steps += 1
            record.source_samples += len(sb) if sb is not None else 0
            record.target_samples += len(tb) if tb is not None else 0
            running += parts["total"]
        if record.status != "ok":
            break
        record.train_losses.append(running / steps_per_epoch)
        val = validation_loss(params, src_va, tgt_va, config.loss)
        record.val_losses.append(val)
        if not math.isfinite(val):
            record.status = "diverged"
            record.message = f"non-finite validation loss at epoch {epoch}"
            break
        if val < record.best_val_loss:
            record.best_val_loss, record.best_epoch = val, epoch
            best = params.copy()
    record.best_checksum = best.checksum()
    record.final_checksums = {g: params.checksum(g) for g in ("encoder", "source", "target", "ci", "assoc")}
    record.wall_seconds = time.perf_counter() - t0
    return best, record


def resolved_dict(model_config: M.ModelConfig, config: TrainConfig) -> dict:
    d = {"model": asdict(model_config), "train": asdict(config)}
    d["train"]["seeds"] = list(config.seeds)
    d["model"]["encoder_hidden"] = list(model_config.encoder_hidden)
    return d


# ---------------------------------------------------------------- run matrix

@dataclass(frozen=True)
class Cell:
    """One method configuration of an experiment grid."""
    name: str
    model: M.ModelConfig
    train: TrainConfig


@dataclass
class RunResult:
    cell: Cell
    seed: int
    params: Optional[M.ModelParams]
    record: RunRecord


_SHARED: dict = {}


def _run_one(cell: Cell, seed: int, out_dir: Optional[str]) -> RunResult:
    source, target = _SHARED.get("source"), _SHARED.get("target")
    try:
        catalog = (source or target).catalog
        tcat = target.catalog if target is not None else catalog
        params = M.init_params(cell.model, 3 * catalog.image_size ** 2, catalog.names,
                               catalog.class_counts, target_counts(target) if target else (2, 2), seed=seed)
        best, record = train(params, source, target, cell.train, cell=cell.name, seed=seed)
        if out_dir is not None:
            write_run(out_dir, cell.name, seed, best, record, tcat.fingerprint())
        return RunResult(cell, seed, best, record)
    except Exception as exc:  # a failing cell must not stop the matrix
        record = RunRecord(cell=cell.name, seed=seed, config=resolved_dict(cell.model, cell.train),
                           status="error", message="".join(traceback.format_exception_only(type(exc), exc)).strip())
        if out_dir is not None:
            write_run(out_dir, cell.name, seed, None, record, "")
        return RunResult(cell, seed, None, record)


def target_counts(target: Dataset) -> tuple:
    cat, corr = target.catalog, target.correlation
    return (cat.class_counts[corr.attribute_factor], cat.class_counts[corr.object_factor])


def run_dir(out_dir: str, cell: str, seed: int) -> str:
    return os.path.join(out_dir, "runs", cell, str(seed))


def write_run(out_dir: str, cell: str, seed: int, params: Optional[M.ModelParams],
              record: RunRecord, catalog_hash: str) -> None:
    d = run_dir(out_dir, cell, seed)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "record.json"), "w") as fh:
        json.dump(record.to_dict(), fh, indent=1, sort_keys=True)
    if params is not None:
        M.save_checkpoint(params, os.path.join(d, "model.ckpt"),
                          extra={"cell": cell, "catalog": catalog_hash})


def _init_worker(source, target):
    _SHARED["source"], _SHARED["target"] = source, target


def run_matrix(cells, source: Optional[Dataset], target: Optional[Dataset],
               out_dir: Optional[str] = None, jobs: int = 1, seeds=None) -> list:
    """Train every (cell, seed); results are ordered by cell then seed regardless of ``jobs``."""
    tasks = [(c, s) for c in cells for s in (seeds if seeds is not None else c.train.seeds)]
    if not tasks:
        return []
    if jobs <= 1:
        _init_worker(source, target)
        return [_run_one(c, s, out_dir) for c, s in tasks]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(source, target)) as ex:
        futures = [ex.submit(_run_one, c, s, out_dir) for c, s in tasks]
        return [f.result() for f in futures]
