"""Experiment configuration documents, method names and study presets.

A config is a JSON document with the sections listed in :data:`SECTIONS`.
Missing fields take pinned defaults and unknown keys are rejected, so
resolving the same document twice gives identical output.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

from . import __version__
from . import datagen as D
from . import evaluation as E
from . import model as M
from . import objectives as O
from . import trainer as TR

SECTIONS = ("catalog", "source_dataset", "target_dataset", "model", "loss", "train", "eval", "output_dir")
VERSION_KEY = "shortcutlab_version"


class ConfigError(ValueError):
    pass


# method name -> (representation, use_source, constraint, association, association_reg)
METHODS = {
    "global-0": ("global", False, "none", "manual", False),
    "factor-0": ("factor", False, "none", "manual", False),
    "global-src": ("global", True, "none", "manual", False),
    "global-src-il": ("global", True, "IL", "manual", False),
    "factor-src": ("factor", True, "none", "manual", False),
    "factor-src-ci": ("factor", True, "CI", "manual", False),
    "factor-src-il": ("factor", True, "IL", "manual", False),
    "factor-src-il-la": ("factor", True, "IL", "learned", False),
    "factor-src-il-laR": ("factor", True, "IL", "learned", True),
}

TABLE1_METHODS = ("global-0", "factor-0", "global-src", "global-src-il",
                  "factor-src", "factor-src-ci", "factor-src-il")

DEFAULTS = {
    "catalog": {
        "factors": list(D.FACTOR_NAMES),
        "shapes": 50, "colors": 12, "lightness": 4, "textures": 5, "backgrounds": 3,
        "image_size": 16, "jitter": 0.1, "hue_count": 12, "shape_offset": 0,
    },
    # image counts; kind is uncorrelated | correlated | target | none
    "source_dataset": {"kind": "uncorrelated", "train": 20000, "val": 2222, "test": 2222, "seed": 0},
    # samples per (attribute, object) combination
    "target_dataset": {
        "mode": "fully_correlated", "m": 2, "shapes": 10, "colors": 10, "shape_offset": 1000,
        "attribute": "color", "object": "shape", "nuisance": {"lightness": 3, "texture": 0},
        "train": 18, "val": 2, "test": 10, "seed": 0,
    },
    "model": {"factor_dim": 64, "encoder_hidden": [256, 256], "head_hidden": 64,
              "attribute_source": "color", "object_source": "shape", "output_gain": 0.1},
    "loss": {"lam": 10.0, "gamma": 5.0, "alpha": 5.0, "beta": 20.0, "tau": 0.33},
    "train": {"methods": ["factor-src-il"], "seeds": [0, 1, 2, 3, 4, 5], "epochs": 3,
              "steps_per_epoch": 313, "batch_size": 64, "learning_rate": 0.001, "weight_decay": 5e-5},
    "eval": {"bias_sweep": None, "crosspred": False, "assoc_heatmap": False,
             "probe_seed": 0},
    "output_dir": "out",
}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(defaults[k], dict) and k != "nuisance":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k} must be an object")
            out[k] = _merge(defaults[k], v, f"{where}.{k}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(doc: Optional[dict] = None) -> dict:
    """Fill defaults, reject unknown keys and validate by building every object once."""
    doc = dict(doc or {})
    doc.pop(VERSION_KEY, None)
    resolved = _merge(DEFAULTS, doc, "config")
    resolved["train"]["seeds"] = [int(s) for s in resolved["train"]["seeds"]]
    resolved["train"]["methods"] = list(resolved["train"]["methods"])
    resolved["model"]["encoder_hidden"] = [int(h) for h in resolved["model"]["encoder_hidden"]]
    resolved["target_dataset"]["nuisance"] = dict(sorted(resolved["target_dataset"]["nuisance"].items()))
    try:
        Experiment(resolved).validate()
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    return resolved


def versioned(resolved: dict) -> dict:
    return {VERSION_KEY: __version__, **resolved}


def load(path: str) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(doc)


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def digest_key(section: dict) -> str:
    return hashlib.sha256(json.dumps(section, sort_keys=True).encode()).hexdigest()[:12]


@dataclass
class Experiment:
    """Typed views over one resolved document."""
    doc: dict

    def validate(self) -> None:
        self.source_catalog()
        self.target_catalog()
        self.target_correlation()
        self.source_spec()
        for m in self.doc["train"]["methods"]:
            self.cell(m)
        if self.doc["eval"]["bias_sweep"] is not None:
            E.parse_grid(self.doc["eval"]["bias_sweep"])
        if not self.doc["train"]["seeds"]:
            raise ConfigError("train.seeds is empty")

    # ---- data
    def source_catalog(self) -> D.FactorCatalog:
        c = self.doc["catalog"]
        return D.make_catalog(shapes=c["shapes"], colors=c["colors"], lightness=c["lightness"],
                              textures=c["textures"], backgrounds=c["backgrounds"], factors=tuple(c["factors"]),
                              shape_offset=c["shape_offset"], hue_count=c["hue_count"],
                              image_size=c["image_size"], jitter=c["jitter"])

    def target_catalog(self) -> D.FactorCatalog:
        c, t = self.doc["catalog"], self.doc["target_dataset"]
        return D.make_catalog(shapes=t["shapes"], colors=t["colors"], lightness=c["lightness"],
                              textures=c["textures"], backgrounds=c["backgrounds"], factors=tuple(c["factors"]),
                              shape_offset=t["shape_offset"], hue_count=c["hue_count"],
                              image_size=c["image_size"], jitter=c["jitter"])

    def target_correlation(self) -> D.CorrelationSpec:
        t = self.doc["target_dataset"]
        cat = self.target_catalog()
        for name in (t["attribute"], t["object"]):
            if name not in cat.names:
                raise ConfigError(f"target factor {name!r} is not in the catalog")
        nuisance = tuple(sorted((k, v) for k, v in t["nuisance"].items() if k in cat.names))
        for k, v in nuisance:
            if v != "uniform" and not 0 <= int(v) < cat.class_counts[cat.index(k)]:
                raise ConfigError(f"target_dataset.nuisance.{k} = {v} is outside {cat.class_counts[cat.index(k)]} classes")
        return D.CorrelationSpec(t["mode"], m=t["m"], attribute_factor=cat.index(t["attribute"]),
                                 object_factor=cat.index(t["object"]), nuisance=nuisance)

    def source_spec(self) -> Optional[D.CorrelationSpec]:
        kind = self.doc["source_dataset"]["kind"]
        if kind not in ("uncorrelated", "correlated", "target", "none"):
            raise ConfigError(f"source_dataset.kind must be uncorrelated, correlated, target or none, got {kind!r}")
        if kind in ("target", "none"):
            return None
        cat = self.source_catalog()
        if kind == "uncorrelated":
            return D.CorrelationSpec("uncorrelated")
        t = self.doc["target_dataset"]
        return D.CorrelationSpec("fully_correlated", attribute_factor=cat.index(t["attribute"]),
                                 object_factor=cat.index(t["object"]))

    def generate_target(self) -> D.Dataset:
        t = self.doc["target_dataset"]
        return D.generate_dataset(self.target_catalog(), self.target_correlation(),
                                  D.SplitSizes(t["train"], t["val"], t["test"]), seed=t["seed"], role="target")

    def generate_source(self, target: Optional[D.Dataset] = None) -> Optional[D.Dataset]:
        s = self.doc["source_dataset"]
        if s["kind"] == "none":
            return None
        if s["kind"] == "target":
            target = target if target is not None else self.generate_target()
            return D.Dataset(target.catalog, target.correlation, "source", target.seed,
                             target.seen_pairs, dict(target.splits))
        cat, corr = self.source_catalog(), self.source_spec()
        combos = len(D._combinations(cat, corr, sorted(corr.seen_pairs(cat)), "source"))
        sizes = D.SplitSizes(s["train"] / combos, s["val"] / combos, s["test"] / combos)
        return D.generate_dataset(cat, corr, sizes, seed=s["seed"], role="source")

    def source_key(self) -> str:
        return "src-" + digest_key({"catalog": self.doc["catalog"], "source": self.doc["source_dataset"],
                                    "target": self.doc["target_dataset"]
                                    if self.doc["source_dataset"]["kind"] != "uncorrelated" else None})

    def target_key(self) -> str:
        return "tgt-" + digest_key({"catalog": self.doc["catalog"], "target": self.doc["target_dataset"]})

    # ---- model and training
    def cell(self, method: str) -> TR.Cell:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; known: {', '.join(METHODS)}")
        rep, use_source, constraint, assoc, reg = METHODS[method]
        m, l, t = self.doc["model"], self.doc["loss"], self.doc["train"]
        model = M.ModelConfig(representation=rep, factor_dim=m["factor_dim"],
                              encoder_hidden=tuple(m["encoder_hidden"]), head_hidden=m["head_hidden"],
                              association=assoc, attribute_source=m["attribute_source"],
                              object_source=m["object_source"], constraint=constraint,
                              output_gain=m["output_gain"])
        loss = O.LossConfig(lam=l["lam"], gamma=l["gamma"], alpha=l["alpha"], beta=l["beta"], tau=l["tau"],
                            constraint=constraint, association_reg=reg)
        train = TR.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
                               weight_decay=t["weight_decay"], seeds=tuple(t["seeds"]), use_source=use_source,
                               steps_per_epoch=t["steps_per_epoch"], loss=loss)
        return TR.Cell(method, model, train)

    def cells(self) -> list:
        return [self.cell(m) for m in self.doc["train"]["methods"]]


# ---------------------------------------------------------------- presets

def _doc(**sections) -> dict:
    return resolve(sections)


DATA_PRESETS = {
    "dv-source": {"target_dataset": {}},
    "dv-animal-full": {"source_dataset": {"kind": "none"}},
    "dv-animal-semi": {"source_dataset": {"kind": "none"}, "target_dataset": {"mode": "semi_correlated", "m": 2}},
}


@dataclass
class Study:
    """A named list of labelled experiments plus how to summarize them."""
    name: str
    summary: str
    experiments: list      # [(label, resolved doc)]

    def to_dict(self) -> dict:
        return {VERSION_KEY: __version__, "preset": self.name, "summary": self.summary,
                "experiments": [{"label": lab, "config": doc} for lab, doc in self.experiments]}

    @classmethod
    def from_dict(cls, d: dict) -> "Study":
        unknown = sorted(set(d) - {VERSION_KEY, "preset", "summary", "experiments"})
        if unknown:
            raise ConfigError(f"unknown key(s) in preset document: {', '.join(unknown)}")
        return cls(d["preset"], d["summary"], [(e["label"], resolve(e["config"])) for e in d["experiments"]])


SWEEP_SEEDS = [0, 1, 2]


def _table1() -> Study:
    doc = _doc(train={"methods": list(TABLE1_METHODS)}, eval={"crosspred": True})
    return Study("table1-desk", "methods", [("table1", doc)])


def _source_ablation() -> Study:
    exps = [(kind, _doc(source_dataset={"kind": kind}, train={"methods": ["factor-src-il"]}))
            for kind in ("uncorrelated", "correlated", "target")]
    return Study("source-ablation", "experiments", exps)


def _learned_association() -> Study:
    doc = _doc(target_dataset={"mode": "semi_correlated", "m": 2},
               train={"methods": ["factor-src-il", "factor-src-il-la", "factor-src-il-laR"]},
               eval={"assoc_heatmap": True})
    return Study("learned-association", "association", [("semi2", doc)])


def _factor_subsets() -> Study:
    subsets = (("shape", "color"), ("shape", "color", "lightness"), ("shape", "color", "texture"),
               ("shape", "color", "background"), ("shape", "color", "lightness", "texture"), D.FACTOR_NAMES)
    exps = [("+".join(s), _doc(catalog={"factors": list(s)}, train={"methods": ["factor-src-il"], "seeds": SWEEP_SEEDS}))
            for s in subsets]
    return Study("factor-subsets", "experiments", exps)


def _class_counts() -> Study:
    exps = [(f"shapes={n}", _doc(catalog={"shapes": n}, train={"methods": ["factor-src-il"], "seeds": SWEEP_SEEDS}))
            for n in (5, 10, 25, 50)]
    return Study("class-count", "experiments", exps)


def _assoc_sweep() -> Study:
    exps = []
    for a in D.FACTOR_NAMES:
        for o in D.FACTOR_NAMES:
            exps.append((f"{a}/{o}", _doc(model={"attribute_source": a, "object_source": o},
                                          train={"methods": ["factor-src-il"], "seeds": SWEEP_SEEDS})))
    return Study("assoc-sweep", "assoc-grid", exps)


def _lambda_sweep() -> Study:
    exps = [(f"lambda={lam:g}", _doc(loss={"lam": lam}, train={"methods": ["factor-src-il"], "seeds": SWEEP_SEEDS}))
            for lam in (0.0, 1.0, 10.0, 100.0)]
    return Study("lambda-sweep", "experiments", exps)


def _smoke() -> Study:
    doc = _doc(catalog={"shapes": 4, "colors": 3, "lightness": 2, "textures": 2, "backgrounds": 2, "image_size": 8},
               source_dataset={"train": 192, "val": 48, "test": 240},
               target_dataset={"shapes": 3, "colors": 3, "nuisance": {"lightness": 1, "texture": 0}, "train": 6, "val": 2, "test": 4},
               model={"factor_dim": 4, "encoder_hidden": [16, 16], "head_hidden": 8},
               train={"methods": ["factor-0", "factor-src-il"], "seeds": [0, 1], "epochs": 3, "steps_per_epoch": 40},
               eval={"crosspred": True, "assoc_heatmap": True, "bias_sweep": "-2:2:5"})
    return Study("smoke", "methods", [("smoke", doc)])


STUDIES = {
    "table1-desk": _table1,
    "source-ablation": _source_ablation,
    "learned-association": _learned_association,
    "factor-subsets": _factor_subsets,
    "class-count": _class_counts,
    "assoc-sweep": _assoc_sweep,
    "lambda-sweep": _lambda_sweep,
    "smoke": _smoke,
}

PRESET_NAMES = tuple(DATA_PRESETS) + tuple(STUDIES)


def data_preset(name: str) -> dict:
    return resolve(DATA_PRESETS[name])


def study(name: str) -> Study:
    if name not in STUDIES:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESET_NAMES)}")
    return STUDIES[name]()
