"""Command-line entry point: generate | train | eval | preset | gradcheck."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from typing import Optional

import numpy as np

from . import __version__
from . import config as C
from . import datagen as D
from . import evaluation as E
from . import model as M
from . import objectives as O
from . import trainer as TR

SEED_ENV = "SHORTCUTLAB_SEED"
RESOLVED_NAME = "resolved_config.json"
GRADCHECK_TOL = 1e-5


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def apply_seed_env(doc: dict) -> dict:
    """``SHORTCUTLAB_SEED`` replaces the training seed list with that single seed."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return doc
    try:
        seed = int(raw)
    except ValueError:
        raise C.ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    doc = json.loads(json.dumps(doc))
    doc["train"]["seeds"] = [seed]
    return C.resolve(doc)


def write_resolved(directory: str, doc: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, RESOLVED_NAME), "w") as fh:
        fh.write(C.dumps(C.versioned(doc)))


# ---------------------------------------------------------------- datasets

class DataCache:
    """Generates each distinct dataset once and stores it under ``root``."""

    def __init__(self, root: str):
        self.root = root
        self.mem: dict = {}

    def _get(self, key: str, make):
        if key not in self.mem:
            path = os.path.join(self.root, key)
            if os.path.exists(os.path.join(path, "manifest.json")):
                ds = D.load_dataset(path)
            else:
                t0 = time.perf_counter()
                ds = make()
                D.save_dataset(ds, path)
                log(f"generated {key}: {sum(len(s) for s in ds.splits.values())} images "
                    f"in {time.perf_counter() - t0:.1f}s, digest {D.dataset_digest(ds)}")
            self.mem[key] = ds
        return self.mem[key]

    def datasets(self, exp: C.Experiment) -> tuple:
        target = self._get(exp.target_key(), exp.generate_target)
        if exp.doc["source_dataset"]["kind"] == "none":
            return None, target
        source = self._get(exp.source_key(), lambda: exp.generate_source(target))
        return source, target


def generate_into(doc: dict, out: str) -> dict:
    exp = C.Experiment(doc)
    target = exp.generate_target()
    source = exp.generate_source(target)
    digests = {}
    if source is not None:
        digests["source"] = D.save_dataset(source, os.path.join(out, "source"))["digest"]
    digests["target"] = D.save_dataset(target, os.path.join(out, "target"))["digest"]
    write_resolved(out, doc)
    return digests


def load_data_dir(path: str) -> tuple:
    tdir = os.path.join(path, "target")
    if not os.path.exists(os.path.join(tdir, "manifest.json")):
        raise FileNotFoundError(f"no target dataset under {path} (run `shortcutlab generate` first)")
    sdir = os.path.join(path, "source")
    source = D.load_dataset(sdir) if os.path.exists(os.path.join(sdir, "manifest.json")) else None
    return source, D.load_dataset(tdir)


# ---------------------------------------------------------------- train and eval

def train_experiment(doc: dict, source, target, out: str, jobs: int = 1) -> list:
    exp = C.Experiment(doc)
    write_resolved(out, doc)
    results = TR.run_matrix(exp.cells(), source, target, out_dir=out, jobs=jobs)
    for r in results:
        rec = r.record
        log(f"{rec.cell} seed {rec.seed}: {rec.status} best epoch {rec.best_epoch} "
            f"val {rec.best_val_loss:.4f} ({rec.wall_seconds:.1f}s){'  ' + rec.message if rec.message else ''}")
    return results


def run_dirs(out: str) -> list:
    """(cell, seed, path) for every run under ``out``, ordered as trained when a config is present."""
    runs = os.path.join(out, "runs")
    if os.path.exists(os.path.join(out, "model.ckpt")) or os.path.exists(os.path.join(out, "record.json")):
        seed = os.path.basename(os.path.normpath(out))
        cell = os.path.basename(os.path.dirname(os.path.normpath(out)))
        return [(cell, int(seed), out)]
    if not os.path.isdir(runs):
        raise FileNotFoundError(f"no runs under {out}")
    order = None
    cfg = os.path.join(out, RESOLVED_NAME)
    if os.path.exists(cfg):
        doc = C.load(cfg)
        order = [(m, s) for m in doc["train"]["methods"] for s in doc["train"]["seeds"]]
    found = [(c, int(s)) for c in sorted(os.listdir(runs)) for s in os.listdir(os.path.join(runs, c))
             if s.isdigit()]
    if order is not None:
        found = [k for k in order if k in set(found)] + sorted(set(found) - set(order))
    else:
        found.sort()
    return [(c, s, TR.run_dir(out, c, s)) for c, s in found]


def evaluate_dir(out: str, target: D.Dataset, bias_sweep: Optional[str] = None, crosspred: bool = False,
                 assoc_heatmap: bool = False, probe_seed: int = 0, report_dir: Optional[str] = None) -> tuple:
    """Evaluate every checkpoint under ``out``; returns (reports, failed run count)."""
    report_dir = report_dir or out
    grid = E.parse_grid(bias_sweep) if bias_sweep else None
    reports, failed = [], 0
    for cell, seed, path in run_dirs(out):
        ckpt = os.path.join(path, "model.ckpt")
        if not os.path.exists(ckpt):
            log(f"{cell} seed {seed}: no checkpoint, skipped")
            failed += 1
            continue
        params, header = M.load_checkpoint(ckpt)
        if header.get("catalog") not in (None, "", target.catalog.fingerprint()):
            raise E.DataError(f"{ckpt} was trained on a different target catalog")
        want_cp = crosspred and params.config.representation == "factor"
        rep = E.evaluate_run(params, target, cell, seed, bias_grid=grid, crosspred=want_cp, probe_seed=probe_seed)
        reports.append(rep)
        if assoc_heatmap:
            E.write_assoc(path, np.array(rep.assoc_matrix), params.source_names)
        if rep.cross_pred is not None:
            E.write_crosspred(os.path.join(path, "crosspred.csv"), rep.cross_pred, ("z_a", "z_o"),
                              ("attribute", "object"))
        log(f"{cell} seed {seed}: seen {rep.seen_acc:.2f} unseen {rep.unseen_acc:.2f} hm {rep.hm_acc:.2f}")
    os.makedirs(report_dir, exist_ok=True)
    cells = {}
    for r in reports:
        cells.setdefault(r.cell, []).append(r)
    payload = {"version": __version__, "runs": [r.to_dict() for r in reports],
               "aggregate": {c: E.aggregate(rs) for c, rs in cells.items()}}
    E.write_report_json(os.path.join(report_dir, "report.json"), payload)
    E.write_report_csv(os.path.join(report_dir, "report.csv"), reports)
    if crosspred:
        write_crosspred_summary(os.path.join(report_dir, "crosspred.csv"), cells)
    return reports, failed


def write_crosspred_summary(path: str, cells: dict) -> None:
    """Seed-mean target probe accuracies per cell (direct: z_a->a, z_o->o; cross: z_a->o, z_o->a)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "n", "za_to_attr", "za_to_obj", "zo_to_attr", "zo_to_obj"])
        for cell, rs in cells.items():
            mats = [np.array(r.cross_pred) for r in rs if r.cross_pred is not None]
            if not mats:
                continue
            m = np.mean(mats, axis=0)
            w.writerow([cell, len(mats), *(repr(float(v)) for v in (m[0, 0], m[0, 1], m[1, 0], m[1, 1]))])


# ---------------------------------------------------------------- studies

SUMMARY_HEADER = ["label", "cell", "n", "seen_mean", "seen_std", "unseen_mean", "unseen_std",
                  "hm_mean", "hm_std", "hm_of_means", "za_to_attr", "za_to_obj", "zo_to_attr", "zo_to_obj",
                  "entropy_attr", "entropy_obj", "argmax_matches"]


def column_entropies(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    safe = np.where(A > 0, A, 1.0)
    return -(A * np.log(safe)).sum(axis=0)


def summary_row(label: str, cell: str, reports: list, source_names) -> dict:
    agg = E.aggregate(reports)
    row = {"label": label, "cell": cell, "n": agg["n_seeds"],
           "seen_mean": agg["seen_acc"]["mean"], "seen_std": agg["seen_acc"]["std"],
           "unseen_mean": agg["unseen_acc"]["mean"], "unseen_std": agg["unseen_acc"]["std"],
           "hm_mean": agg["hm_acc"]["mean"], "hm_std": agg["hm_acc"]["std"], "hm_of_means": agg["hm_of_means"]}
    cps = [np.array(r.cross_pred) for r in reports if r.cross_pred is not None]
    if cps:
        m = np.mean(cps, axis=0)
        row.update(za_to_attr=m[0, 0], za_to_obj=m[0, 1], zo_to_attr=m[1, 0], zo_to_obj=m[1, 1])
    if cell.endswith(("-la", "-laR")) and reports:
        mats = [np.array(r.assoc_matrix) for r in reports]
        ent = np.mean([column_entropies(A) for A in mats], axis=0)
        want = [source_names.index("color"), source_names.index("shape")] \
            if {"color", "shape"} <= set(source_names) else None
        row.update(entropy_attr=ent[0], entropy_obj=ent[1],
                   argmax_matches=sum(int(A.argmax(0).tolist() == want) for A in mats))
    return row


def write_summary(path: str, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for row in rows:
            w.writerow([_cell(row.get(k, "")) for k in SUMMARY_HEADER])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_assoc_grid(path: str, rows: list) -> None:
    """Attribute-source x object-source heatmap of seed-mean HM."""
    names = list(D.FACTOR_NAMES)
    grid = {tuple(r["label"].split("/")): r["hm_mean"] for r in rows}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attribute\\object", *names])
        for a in names:
            w.writerow([a, *(_cell(grid[(a, o)]) if (a, o) in grid else "" for o in names)])


def run_study(st: C.Study, out: str, jobs: int = 1) -> int:
    """generate -> train -> eval -> summary; returns the number of failed runs."""
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "preset.json"), "w") as fh:
        fh.write(C.dumps(st.to_dict()))
    cache = DataCache(os.path.join(out, "data"))
    rows, failed = [], 0
    digests = {}
    for label, doc in st.experiments:
        exp = C.Experiment(doc)
        source, target = cache.datasets(exp)
        digests[label] = {"source": D.dataset_digest(source) if source is not None else None,
                          "target": D.dataset_digest(target)}
        edir = os.path.join(out, _safe(label))
        log(f"== {st.name} / {label}")
        results = train_experiment(doc, source, target, edir, jobs)
        failed += sum(r.record.status != "ok" for r in results)
        ev = doc["eval"]
        reports, missing = evaluate_dir(edir, target, ev["bias_sweep"], ev["crosspred"], ev["assoc_heatmap"],
                                        ev["probe_seed"])
        failed += missing
        by_cell = {}
        for r in reports:
            by_cell.setdefault(r.cell, []).append(r)
        names = (source or target).catalog.names
        rows += [summary_row(label, c, rs, names) for c, rs in by_cell.items()]
    with open(os.path.join(out, "digests.json"), "w") as fh:
        json.dump(digests, fh, indent=1, sort_keys=True)
    write_summary(os.path.join(out, "summary.csv"), rows)
    if st.summary == "assoc-grid":
        write_assoc_grid(os.path.join(out, "assoc_sweep.csv"), rows)
    return failed


def _safe(label: str) -> str:
    return label.replace("/", "__").replace("=", "_").replace("+", "-")


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    if args.config:
        doc = C.load(args.config)
    else:
        if args.preset not in C.DATA_PRESETS:
            log(f"unknown data preset {args.preset!r}; known: {', '.join(C.DATA_PRESETS)}")
            return 2
        doc = C.data_preset(args.preset)
    out = args.out or doc["output_dir"]
    digests = generate_into(doc, out)
    for role, dig in digests.items():
        print(f"{role} {dig}")
    return 0


def _train_doc(args) -> dict:
    doc = C.load(args.config) if args.config else C.resolve({})
    doc = json.loads(json.dumps(doc))
    if args.method:
        doc["train"]["methods"] = list(args.method)
    if args.lam is not None:
        doc["loss"]["lam"] = args.lam
    if args.seeds:
        doc["train"]["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.epochs is not None:
        doc["train"]["epochs"] = args.epochs
    return apply_seed_env(C.resolve(doc))


def cmd_train(args) -> int:
    doc = _train_doc(args)
    source, target = load_data_dir(args.data)
    if doc["source_dataset"]["kind"] == "none":
        source = None
    elif source is None and any(C.METHODS[m][1] for m in doc["train"]["methods"]):
        raise FileNotFoundError(f"no source dataset under {args.data}")
    out = args.out or doc["output_dir"]
    results = train_experiment(doc, source, target, out, args.jobs)
    with open(os.path.join(out, "datasets.json"), "w") as fh:
        json.dump({"data": os.path.abspath(args.data)}, fh)
    return 0 if all(r.record.status == "ok" for r in results) else 1


def cmd_eval(args) -> int:
    data = args.data
    if data is None:
        ref = os.path.join(args.run_dir, "datasets.json")
        if not os.path.exists(ref):
            raise FileNotFoundError(f"pass --data (no datasets.json in {args.run_dir})")
        with open(ref) as fh:
            data = json.load(fh)["data"]
    _, target = load_data_dir(data)
    _, failed = evaluate_dir(args.run_dir, target, args.bias_sweep, args.crosspred, args.assoc_heatmap,
                             args.probe_seed)
    return 0 if failed == 0 else 1


def cmd_preset(args) -> int:
    if args.source:
        with open(args.source) as fh:
            st = C.Study.from_dict(json.load(fh))
        out = args.out or os.path.dirname(os.path.abspath(args.source)) + "-rerun"
    else:
        if args.name is None:
            log("give a preset name or --from PRESET_JSON")
            return 2
        if args.name in C.DATA_PRESETS:
            doc = C.data_preset(args.name)
            for role, dig in generate_into(doc, args.out or os.path.join("out", args.name)).items():
                print(f"{role} {dig}")
            return 0
        if args.name not in C.STUDIES:
            log(f"unknown preset {args.name!r}; known: {', '.join(C.PRESET_NAMES)}")
            return 2
        st = C.study(args.name)
        st.experiments = [(lab, apply_seed_env(doc)) for lab, doc in st.experiments]
        out = args.out or os.path.join("out", args.name)
    t0 = time.perf_counter()
    failed = run_study(st, out, args.jobs)
    log(f"{st.name}: done in {time.perf_counter() - t0:.0f}s, summary at {os.path.join(out, 'summary.csv')}")
    print(open(os.path.join(out, "summary.csv")).read(), end="")
    return 0 if failed == 0 else 1


def cmd_gradcheck(args) -> int:
    worst_all, bad = 0.0, []
    for rep, constraint, assoc in O.GRADCHECK_CELLS:
        p, src, tgt, cfg = O.gradcheck_problem(rep, constraint, assoc, seed=args.seed)
        errors = O.gradient_errors(p, src, tgt, cfg)
        worst = max((e for n, e in errors.items() if not n.startswith("ci.")), default=0.0)
        leaked = [n for n, e in errors.items() if n.startswith("ci.") and e != 0.0]
        ok = worst < GRADCHECK_TOL and not leaked
        worst_all = max(worst_all, worst)
        print(f"{rep:6s} {constraint:4s} {assoc:7s} max rel err {worst:.2e} {'ok' if ok else 'FAIL'}"
              + (f" nonzero detached grads: {leaked}" if leaked else ""))
        if not ok:
            bad.append((rep, constraint, assoc))
    print(f"{len(O.GRADCHECK_CELLS) - len(bad)}/{len(O.GRADCHECK_CELLS)} cells pass, worst {worst_all:.2e}")
    return 0 if not bad else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shortcutlab", description=__doc__)
    ap.add_argument("--version", action="version", version=f"shortcutlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render source/target datasets")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(C.DATA_PRESETS))
    src.add_argument("--config")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a cell/seed matrix on generated data")
    t.add_argument("--data", required=True, help="directory written by `generate`")
    t.add_argument("--config")
    t.add_argument("--method", action="append", choices=sorted(C.METHODS))
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--seeds", help="comma-separated seed list")
    t.add_argument("--epochs", type=int)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score checkpoints on the target test split")
    e.add_argument("run_dir", help="training output directory or a single run directory")
    e.add_argument("--data")
    e.add_argument("--bias-sweep", metavar="LO:HI:STEPS")
    e.add_argument("--crosspred", action="store_true")
    e.add_argument("--assoc-heatmap", action="store_true")
    e.add_argument("--probe-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("preset", help="run a named end-to-end study")
    p.add_argument("name", nargs="?", help=", ".join(C.PRESET_NAMES))
    p.add_argument("--from", dest="source", metavar="PRESET_JSON", help="rerun from an emitted preset.json")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_preset)

    c = sub.add_parser("gradcheck", help="finite-difference check of every architecture cell")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def _join_negative_values(argv: list) -> list:
    """``--bias-sweep -10:10:41`` would otherwise read the range as an option."""
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--bias-sweep" and i + 1 < len(argv):
            out.append(f"--bias-sweep={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_negative_values(argv))
    try:
        return args.func(args)
    except (C.ConfigError, D.SpecError, M.CheckpointError, E.DataError, FileNotFoundError, ValueError) as exc:
        log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
