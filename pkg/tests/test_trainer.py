import dataclasses
import json
import math

import numpy as np
import pytest

from conftest import tiny_cell
from shortcutlab import datagen as D
from shortcutlab import model as M
from shortcutlab import objectives as O
from shortcutlab import trainer as TR


def test_sampler_covers_each_pass():
    s = TR.CyclingSampler(10, 4, np.random.default_rng(0))
    first = np.concatenate([s.next() for _ in range(5)])
    assert sorted(first[:10].tolist()) == list(range(10))
    assert sorted(first[10:20].tolist()) == list(range(10))
    again = TR.CyclingSampler(10, 4, np.random.default_rng(0))
    assert np.array_equal(np.concatenate([again.next() for _ in range(5)]), first)
    with pytest.raises(ValueError):
        TR.CyclingSampler(0, 4, np.random.default_rng(0))


def init_for(cell, src, tgt, seed=0):
    cat = src.catalog
    return M.init_params(cell.model, 3 * cat.image_size ** 2, cat.names, cat.class_counts,
                         TR.target_counts(tgt), seed=seed)


def test_train_bookkeeping(src_ds, tgt_ds):
    cell = tiny_cell(epochs=3, steps=4)
    p = init_for(cell, src_ds, tgt_ds)
    before = p.checksum()
    best, rec = TR.train(p, src_ds, tgt_ds, cell.train, cell.name, 0)
    assert p.checksum() == before
    assert rec.status == "ok" and rec.steps == 12
    assert rec.source_samples == rec.target_samples == 12 * 8
    assert len(rec.train_losses) == len(rec.val_losses) == 3
    assert rec.best_epoch == int(np.argmin(rec.val_losses)) and rec.best_val_loss == min(rec.val_losses)
    assert rec.best_checksum == best.checksum()
    assert set(rec.final_checksums) == {"encoder", "source", "target", "ci", "assoc"}
    json.dumps(rec.to_dict())


def test_train_deterministic(src_ds, tgt_ds):
    cell = tiny_cell(constraint="CI", name="factor-src-ci")
    runs = [TR.train(init_for(cell, src_ds, tgt_ds), src_ds, tgt_ds, cell.train)[1] for _ in range(2)]
    assert runs[0].final_checksums == runs[1].final_checksums
    assert runs[0].val_losses == runs[1].val_losses


def test_default_epoch_length(src_ds, tgt_ds):
    cell = tiny_cell()
    train = dataclasses.replace(cell.train, steps_per_epoch=None, epochs=1)
    _, rec = TR.train(init_for(cell, src_ds, tgt_ds), src_ds, tgt_ds, train)
    assert rec.steps == math.ceil(len(src_ds.splits["train"]) / 8)


def test_target_only_and_source_only(src_ds, tgt_ds):
    cell = tiny_cell(use_source=False, constraint="none")
    _, rec = TR.train(init_for(cell, src_ds, tgt_ds), src_ds, tgt_ds, cell.train)
    assert rec.source_samples == 0 and rec.target_samples > 0
    _, rec = TR.train(init_for(cell, src_ds, tgt_ds), src_ds, None, tiny_cell(constraint="none").train)
    assert rec.target_samples == 0 and rec.status == "ok"
    with pytest.raises(ValueError):
        TR.train(init_for(cell, src_ds, tgt_ds), None, None, cell.train)


def test_divergence_is_recorded(src_ds, tgt_ds, monkeypatch):
    cell = tiny_cell()
    real = O.value_and_grads

    def poisoned(*a, **kw):
        parts, grads = real(*a, **kw)
        parts["total"] = float("nan")
        return parts, grads

    monkeypatch.setattr(O, "value_and_grads", poisoned)
    _, rec = TR.train(init_for(cell, src_ds, tgt_ds), src_ds, tgt_ds, cell.train)
    assert rec.status == "diverged" and "non-finite" in rec.message and rec.steps == 0


def relabel(ds):
    """Same images, attribute labels cyclically shifted."""
    out = D.Dataset(ds.catalog, ds.correlation, ds.role, ds.seed, ds.seen_pairs)
    n_attr = ds.catalog.class_counts[ds.attribute_factor]
    for name, s in ds.splits.items():
        f = s.factors.copy()
        f[:, ds.attribute_factor] = (f[:, ds.attribute_factor] + 1) % n_attr
        out.splits[name] = D.SampleSet(s.pixels, f)
    return out


@pytest.mark.parametrize("constraint,same", [("IL", True), ("none", False)])
def test_il_isolates_encoder_from_target_labels(src_ds, tgt_ds, constraint, same):
    cell = tiny_cell(constraint=constraint)
    recs = [TR.train(init_for(cell, src_ds, tgt_ds), src_ds, t, cell.train)[1] for t in (tgt_ds, relabel(tgt_ds))]
    assert (recs[0].final_checksums["encoder"] == recs[1].final_checksums["encoder"]) == same
    assert recs[0].final_checksums["target"] != recs[1].final_checksums["target"]


def test_learned_association_stays_stochastic(src_ds, tgt_ds):
    cell = tiny_cell(association="learned", reg=True, name="factor-src-il-laR")
    best, _ = TR.train(init_for(cell, src_ds, tgt_ds), src_ds, tgt_ds, cell.train)
    A = M.association(best).data
    assert (A >= 0).all() and np.allclose(A.sum(axis=0), 1.0, atol=1e-9)
    assert best.tensors["assoc_logits"].data.any()


def test_run_matrix_isolates_failures_and_writes(src_ds, tgt_ds, tmp_path):
    good = tiny_cell(seeds=(0, 1))
    bad = dataclasses.replace(good, name="broken",
                              model=dataclasses.replace(good.model, attribute_source="hue"))
    results = TR.run_matrix([bad, good], src_ds, tgt_ds, out_dir=str(tmp_path))
    assert [(r.cell.name, r.seed) for r in results] == [("broken", 0), ("broken", 1),
                                                         ("factor-src-il", 0), ("factor-src-il", 1)]
    assert [r.record.status for r in results] == ["error", "error", "ok", "ok"]
    rd = tmp_path / "runs" / "factor-src-il" / "1"
    assert (rd / "record.json").exists() and (rd / "model.ckpt").exists()
    assert not (tmp_path / "runs" / "broken" / "0" / "model.ckpt").exists()
    q, header = M.load_checkpoint(str(rd / "model.ckpt"))
    assert header["catalog"] == tgt_ds.catalog.fingerprint() and q.checksum() == results[3].params.checksum()


def test_run_matrix_jobs_match_serial(src_ds, tgt_ds):
    cell = tiny_cell(seeds=(0, 1))
    serial = TR.run_matrix([cell], src_ds, tgt_ds, jobs=1)
    parallel = TR.run_matrix([cell], src_ds, tgt_ds, jobs=2)
    assert [r.record.best_checksum for r in serial] == [r.record.best_checksum for r in parallel]


def test_run_matrix_empty(src_ds, tgt_ds, tmp_path):
    assert TR.run_matrix([], src_ds, tgt_ds, out_dir=str(tmp_path)) == []
