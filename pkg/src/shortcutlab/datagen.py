"""Procedural multi-factor images and correlated source/target datasets.

Every image is a single polygonal silhouette on a plain background and is a
deterministic function of its factor tuple and a jitter seed. Five factors
are available: shape, color (hue), lightness, texture and background.
Catalogs may use any subset; absent factors are rendered at a fixed default.
"""
from __future__ import annotations

import colorsys
import hashlib
import itertools
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from . import kernels

FACTOR_NAMES = ("shape", "color", "lightness", "texture", "background")
LIGHTNESS_LEVELS = (0.4, 0.6, 0.8, 1.0)
TEXTURES = ("solid", "stripes", "checker", "dots", "noise")
BACKGROUNDS = ((0.22, 0.22, 0.25), (0.5, 0.5, 0.5), (0.78, 0.76, 0.72))
# rendering value for factors a catalog leaves out
ABSENT_DEFAULTS = {"color": 0, "lightness": len(LIGHTNESS_LEVELS) - 1, "texture": 0, "background": 0}
TEXTURE_DIM = 0.55
SPLITS = ("train", "val", "test")
EMPTY_DIGEST = hashlib.blake2b(b"", digest_size=8).hexdigest()


class SpecError(ValueError):
    """Dataset or correlation specification is inconsistent."""


@dataclass(frozen=True)
class Factor:
    name: str
    class_count: int


@dataclass(frozen=True)
class FactorCatalog:
    """Ordered factors plus the rendering constants that give them meaning.

    ``shape_offset`` selects which prototypes from the shape bank the shape
    classes use, so two catalogs with disjoint offset ranges have disjoint
    shapes. Color class ``c`` has hue ``360 * c / hue_count`` degrees.
    """

    factors: tuple
    shape_offset: int = 0
    hue_count: int = 12
    image_size: int = 32
    jitter: float = 0.1

    def __post_init__(self):
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names) or any(n not in FACTOR_NAMES for n in names):
            raise SpecError(f"unknown or repeated factor names: {names}")
        if "shape" not in names:
            raise SpecError("a catalog needs a shape factor")
        for f in self.factors:
            if f.class_count < 1:
                raise SpecError(f"factor {f.name} needs a positive class count")
        limits = {"color": self.hue_count, "lightness": len(LIGHTNESS_LEVELS),
                  "texture": len(TEXTURES), "background": len(BACKGROUNDS)}
        for f in self.factors:
            if f.name in limits and f.class_count > limits[f.name]:
                raise SpecError(f"{f.name} supports at most {limits[f.name]} classes")

    @property
    def names(self) -> tuple:
        return tuple(f.name for f in self.factors)

    @property
    def class_counts(self) -> tuple:
        return tuple(f.class_count for f in self.factors)

    @property
    def K(self) -> int:
        return len(self.factors)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def hue(self, color_class: int) -> float:
        """Hue of a color class in degrees."""
        return 360.0 * color_class / self.hue_count

    def to_dict(self) -> dict:
        d = asdict(self)
        d["factors"] = [[f.name, f.class_count] for f in self.factors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FactorCatalog":
        d = dict(d)
        d["factors"] = tuple(Factor(n, int(c)) for n, c in d["factors"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def make_catalog(shapes: int = 50, colors: int = 12, lightness: int = 4, textures: int = 5,
                 backgrounds: int = 3, factors: Sequence[str] = FACTOR_NAMES, **kw) -> FactorCatalog:
    counts = {"shape": shapes, "color": colors, "lightness": lightness,
              "texture": textures, "background": backgrounds}
    return FactorCatalog(tuple(Factor(n, counts[n]) for n in factors), **kw)


# ---------------------------------------------------------------- rendering

@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray        # (H, W, 3) float32 in [0, 1]
    factors: tuple            # one class index per catalog factor
    role: str = "source"
    attribute_factor: int = 1
    object_factor: int = 0

    @property
    def labels(self) -> tuple:
        if self.role == "target":
            return (self.factors[self.attribute_factor], self.factors[self.object_factor])
        return self.factors


def shape_prototype(shape_id: int) -> np.ndarray:
    """Base vertices of a shape class in unit coordinates (centre 0, extent <= 0.42).

    A class is a star-shaped polygon with 3-9 control vertices, stretched
    along a class orientation. Size, elongation, orientation and spikiness
    are drawn from a generator keyed only by ``shape_id``, so classes differ
    in coarse silhouette statistics as well as in outline.
    """
    rng = np.random.default_rng([0x5EED, shape_id])
    n = int(rng.integers(3, 10))
    major = rng.uniform(0.2, 0.42)
    minor = major / rng.uniform(1.0, 2.2)
    spike = rng.uniform(0.0, 0.6)
    orient = rng.uniform(0, np.pi)
    gaps = rng.uniform(0.6, 1.4, n)
    ang = np.cumsum(gaps / gaps.sum() * 2 * np.pi) + rng.uniform(0, 2 * np.pi)
    rad = 1.0 - spike * rng.uniform(0, 1, n)
    x, y = major * rad * np.cos(ang), minor * rad * np.sin(ang)
    c, s = np.cos(orient), np.sin(orient)
    return np.stack([c * x - s * y, s * x + c * y], axis=1)


_PROTO_CACHE: dict = {}


def _prototype(shape_id: int) -> np.ndarray:
    p = _PROTO_CACHE.get(shape_id)
    if p is None:
        p = _PROTO_CACHE[shape_id] = shape_prototype(shape_id)
    return p


def _texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    phase = int(rng.integers(0, 4))
    if kind == "solid":
        return np.ones((size, size))
    if kind == "stripes":
        on = ((xx + yy + phase) // 2) % 2 == 0
    elif kind == "checker":
        on = ((xx + phase) // 3 + (yy + phase) // 3) % 2 == 0
    elif kind == "dots":
        on = ~((((xx + phase) % 4) < 2) & (((yy + phase) % 4) < 2))
    else:  # noise
        return rng.uniform(TEXTURE_DIM, 1.0, (size, size))
    return np.where(on, 1.0, TEXTURE_DIM)


def _factor_value(catalog: FactorCatalog, factor_tuple: Sequence[int], name: str) -> int:
    if name in catalog.names:
        return int(factor_tuple[catalog.index(name)])
    return ABSENT_DEFAULTS[name]


def render_sample(catalog: FactorCatalog, factor_tuple: Sequence[int], jitter_seed: int,
                  role: str = "source") -> LabeledImage:
    """Render one image. Pure function of ``(catalog, factor_tuple, jitter_seed)``."""
    if len(factor_tuple) != catalog.K:
        raise IndexError(f"expected {catalog.K} factor indices, got {len(factor_tuple)}")
    for f, v in zip(catalog.factors, factor_tuple):
        if not 0 <= int(v) < f.class_count:
            raise IndexError(f"{f.name} index {v} outside [0, {f.class_count})")
    size = catalog.image_size
    rng = np.random.default_rng(int(jitter_seed))

    shape_id = catalog.shape_offset + _factor_value(catalog, factor_tuple, "shape")
    verts = _prototype(shape_id)
    r = catalog.jitter * np.sqrt(rng.uniform(0, 1, len(verts)))
    theta = rng.uniform(0, 2 * np.pi, len(verts))
    pts = (verts + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1) + 0.5) * size
    mask = kernels.rasterize_polygon(pts[:, 0], pts[:, 1], size, size).astype(bool)

    hue = catalog.hue(_factor_value(catalog, factor_tuple, "color"))
    rgb = np.array(colorsys.hsv_to_rgb(hue / 360.0, 1.0, 1.0))
    level = LIGHTNESS_LEVELS[_factor_value(catalog, factor_tuple, "lightness")]
    pattern = _texture(TEXTURES[_factor_value(catalog, factor_tuple, "texture")], size, rng)
    fg = pattern[:, :, None] * (rgb * level)[None, None, :]
    bg = np.array(BACKGROUNDS[_factor_value(catalog, factor_tuple, "background")])
    img = np.where(mask[:, :, None], fg, bg[None, None, :])
    return LabeledImage(np.clip(img, 0.0, 1.0).astype(np.float32), tuple(int(v) for v in factor_tuple), role)


# ---------------------------------------------------------------- correlation

@dataclass(frozen=True)
class CorrelationSpec:
    """How attribute and object classes co-occur in the training split.

    ``pairing[o]`` lists the attribute classes object ``o`` may appear with.
    When omitted it defaults to ``(o,)`` for full correlation and
    ``(o, o+1, ..., o+m-1) mod n_attr`` for semi-correlation. ``nuisance``
    maps remaining factor names to ``"uniform"`` or a fixed class index.
    """

    mode: str = "uncorrelated"
    m: int = 2
    attribute_factor: int = 1
    object_factor: int = 0
    pairing: Optional[tuple] = None
    nuisance: tuple = ()

    def __post_init__(self):
        if self.mode not in ("uncorrelated", "fully_correlated", "semi_correlated"):
            raise SpecError(f"unknown correlation mode {self.mode!r}")
        if self.mode == "semi_correlated" and self.m < 2:
            raise SpecError("semi_correlated needs m >= 2")
        if self.attribute_factor == self.object_factor:
            raise SpecError("attribute and object factors must differ")

    def nuisance_policy(self, name: str):
        return dict(self.nuisance).get(name, "uniform")

    def allowed_attributes(self, n_attr: int, n_obj: int) -> list:
        if self.mode == "uncorrelated":
            return [tuple(range(n_attr)) for _ in range(n_obj)]
        if self.pairing is not None:
            pairing = [tuple(p) if isinstance(p, (list, tuple)) else (int(p),) for p in self.pairing]
            if len(pairing) != n_obj:
                raise SpecError(f"pairing has {len(pairing)} entries for {n_obj} object classes")
        elif self.mode == "fully_correlated":
            pairing = [(o % n_attr,) for o in range(n_obj)]
        else:
            if self.m > n_attr:
                raise SpecError(f"semi_correlated({self.m}) needs at least {self.m} attribute classes, have {n_attr}")
            pairing = [tuple((o + j) % n_attr for j in range(self.m)) for o in range(n_obj)]
        for p in pairing:
            if any(not 0 <= a < n_attr for a in p):
                raise SpecError(f"pairing entry {p} outside {n_attr} attribute classes")
        if self.mode == "fully_correlated":
            if any(len(p) != 1 for p in pairing):
                raise SpecError("fully_correlated pairing maps each object to one attribute")
            if n_attr == n_obj and len({p[0] for p in pairing}) != n_obj:
                raise SpecError("fully_correlated pairing must be a bijection")
        if self.mode == "semi_correlated" and any(len(set(p)) != self.m for p in pairing):
            raise SpecError(f"semi_correlated({self.m}) pairs each object with exactly {self.m} attributes")
        return pairing

    def seen_pairs(self, catalog: FactorCatalog) -> frozenset:
        n_attr = catalog.class_counts[self.attribute_factor]
        n_obj = catalog.class_counts[self.object_factor]
        allowed = self.allowed_attributes(n_attr, n_obj)
        return frozenset((a, o) for o in range(n_obj) for a in allowed[o])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pairing"] = None if self.pairing is None else [list(p) if isinstance(p, (list, tuple)) else p for p in self.pairing]
        d["nuisance"] = dict(self.nuisance)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationSpec":
        d = dict(d)
        if d.get("pairing") is not None:
            d["pairing"] = tuple(tuple(p) if isinstance(p, list) else p for p in d["pairing"])
        d["nuisance"] = tuple(sorted((d.get("nuisance") or {}).items()))
        return cls(**d)


# ---------------------------------------------------------------- datasets

@dataclass(frozen=True)
class SplitSizes:
    """Samples per combination; fractional rates sample a uniform subset of combinations."""

    train: float = 18
    val: float = 2
    test: float = 10


@dataclass
class SampleSet:
    pixels: np.ndarray    # (N, H, W, 3) float32
    factors: np.ndarray   # (N, K) int64

    def __len__(self):
        return len(self.factors)

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(len(self), -1)


@dataclass
class Dataset:
    catalog: FactorCatalog
    correlation: CorrelationSpec
    role: str
    seed: int
    seen_pairs: frozenset
    splits: dict = field(default_factory=dict)

    @property
    def attribute_factor(self) -> int:
        return self.correlation.attribute_factor

    @property
    def object_factor(self) -> int:
        return self.correlation.object_factor

    @property
    def unseen_pairs(self) -> frozenset:
        n_attr = self.catalog.class_counts[self.attribute_factor]
        n_obj = self.catalog.class_counts[self.object_factor]
        return frozenset(itertools.product(range(n_attr), range(n_obj))) - self.seen_pairs

    def pair_labels(self, split: str) -> tuple:
        f = self.splits[split].factors
        return f[:, self.attribute_factor], f[:, self.object_factor]

    def samples(self, split: str) -> Iterator[LabeledImage]:
        s = self.splits[split]
        for px, fac in zip(s.pixels, s.factors):
            yield LabeledImage(px, tuple(int(v) for v in fac), self.role,
                               self.attribute_factor, self.object_factor)


def _combinations(catalog: FactorCatalog, corr: CorrelationSpec, pairs: Sequence, role: str) -> list:
    """Factor tuples forming the sampling grid. For the target role nuisances are
    drawn at random per sample later, so only the (attribute, object) pairs form the grid."""
    K = catalog.K
    others = [k for k in range(K) if k not in (corr.attribute_factor, corr.object_factor)]
    axes = []
    for k in others:
        policy = corr.nuisance_policy(catalog.names[k])
        if policy == "uniform":
            axes.append(range(catalog.class_counts[k]) if role == "source" else (None,))
        else:
            if not 0 <= int(policy) < catalog.class_counts[k]:
                raise SpecError(f"fixed {catalog.names[k]} class {policy} out of range")
            axes.append((int(policy),))
    combos = []
    for a, o in pairs:
        for rest in itertools.product(*axes):
            t = [0] * K
            t[corr.attribute_factor] = a
            t[corr.object_factor] = o
            for k, v in zip(others, rest):
                t[k] = v
            combos.append(t)
    return combos


def _allocate(n_combos: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Per-combination counts summing to round(rate * n_combos), differing by at most one."""
    total = int(round(rate * n_combos))
    base, extra = divmod(total, n_combos) if n_combos else (0, 0)
    counts = np.full(n_combos, base, dtype=np.int64)
    if extra:
        counts[np.sort(rng.choice(n_combos, size=extra, replace=False))] += 1
    return counts


def _sample_seed(seed: int, split_index: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, split_index, i]).generate_state(1)[0])


def generate_split(catalog: FactorCatalog, corr: CorrelationSpec, pairs: Sequence, rate: float,
                   seed: int, split_index: int, role: str) -> SampleSet:
    rng = np.random.default_rng([seed, split_index, 0xA110C])
    combos = _combinations(catalog, corr, sorted(pairs, key=lambda p: (p[1], p[0])), role)
    counts = _allocate(len(combos), rate, rng)
    tuples = []
    for combo, c in zip(combos, counts):
        tuples.extend([list(combo) for _ in range(int(c))])
    nrng = np.random.default_rng([seed, split_index, 0x9015E])
    for t in tuples:
        for k, v in enumerate(t):
            if v is None:
                t[k] = int(nrng.integers(catalog.class_counts[k]))
    size = catalog.image_size
    pixels = np.empty((len(tuples), size, size, 3), dtype=np.float32)
    for i, t in enumerate(tuples):
        pixels[i] = render_sample(catalog, t, _sample_seed(seed, split_index, i), role).pixels
    factors = np.array(tuples, dtype=np.int64).reshape(len(tuples), catalog.K)
    return SampleSet(pixels, factors)


def generate_dataset(catalog: FactorCatalog, correlation: CorrelationSpec, sizes: SplitSizes = SplitSizes(),
                     seed: int = 0, role: str = "target") -> Dataset:
    """Build train/val/test splits.

    Train and val only contain the seen (attribute, object) pairs implied by
    ``correlation``; test covers the full attribute x object grid.
    """
    if role not in ("source", "target"):
        raise SpecError(f"role must be source or target, got {role!r}")
    for name in ("train", "val", "test"):
        if getattr(sizes, name) < 0:
            raise SpecError(f"{name} size must be non-negative")
    if max(correlation.attribute_factor, correlation.object_factor) >= catalog.K:
        raise SpecError("attribute/object factor index outside catalog")
    seen = correlation.seen_pairs(catalog)
    n_attr = catalog.class_counts[correlation.attribute_factor]
    n_obj = catalog.class_counts[correlation.object_factor]
    grid = list(itertools.product(range(n_attr), range(n_obj)))
    ds = Dataset(catalog, correlation, role, seed, seen)
    for idx, name in enumerate(SPLITS):
        pairs = grid if name == "test" else sorted(seen)
        ds.splits[name] = generate_split(catalog, correlation, pairs, getattr(sizes, name), seed, idx, role)
    return ds


# ---------------------------------------------------------------- digests and files

def _split_bytes(s: SampleSet) -> Iterable[bytes]:
    px = s.pixels.astype("<f4", copy=False)
    lab = s.factors.astype("<u2")
    for i in range(len(s)):
        yield px[i].tobytes()
        yield lab[i].tobytes()


def dataset_digest(data) -> str:
    """Order-sensitive 64-bit BLAKE2b checksum (hex) over pixels and labels.

    Accepts a :class:`Dataset` (splits in train/val/test order) or a single
    :class:`SampleSet`. An empty input hashes to :data:`EMPTY_DIGEST`.
    """
    h = hashlib.blake2b(digest_size=8)
    sets = [data.splits[n] for n in SPLITS if n in data.splits] if isinstance(data, Dataset) else [data]
    for s in sets:
        for chunk in _split_bytes(s):
            h.update(chunk)
    return h.hexdigest()


def split_digests(ds: Dataset) -> dict:
    return {name: dataset_digest(s) for name, s in ds.splits.items()}


def save_dataset(ds: Dataset, directory: str, dump_ppm: int = 0) -> dict:
    """Write ``manifest.json`` and ``samples.bin``; returns the manifest."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": "shortcutlab-samples-v1",
        "role": ds.role,
        "seed": ds.seed,
        "catalog": ds.catalog.to_dict(),
        "correlation": ds.correlation.to_dict(),
        "seen_pairs": sorted([list(p) for p in ds.seen_pairs]),
        "image_shape": [ds.catalog.image_size, ds.catalog.image_size, 3],
        "record_layout": "float32le pixels (H*W*3, row-major HWC) then uint16le labels (K factor indices)",
        "splits": {n: len(s) for n, s in ds.splits.items()},
        "digests": split_digests(ds),
        "digest": dataset_digest(ds),
    }
    with open(os.path.join(directory, "samples.bin"), "wb") as fh:
        for name in SPLITS:
            for chunk in _split_bytes(ds.splits[name]):
                fh.write(chunk)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    if dump_ppm:
        for name, s in ds.splits.items():
            write_ppm(os.path.join(directory, f"{name}.ppm"), contact_sheet(s.pixels[:dump_ppm]))
    return manifest


def load_dataset(directory: str) -> Dataset:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    catalog = FactorCatalog.from_dict(manifest["catalog"])
    corr = CorrelationSpec.from_dict(manifest["correlation"])
    H, W, C = manifest["image_shape"]
    rec = np.dtype([("px", "<f4", (H, W, C)), ("lab", "<u2", (catalog.K,))])
    raw = np.fromfile(os.path.join(directory, "samples.bin"), dtype=rec)
    ds = Dataset(catalog, corr, manifest["role"], manifest["seed"],
                 frozenset(tuple(p) for p in manifest["seen_pairs"]))
    start = 0
    for name in SPLITS:
        n = manifest["splits"][name]
        chunk = raw[start:start + n]
        ds.splits[name] = SampleSet(np.ascontiguousarray(chunk["px"], dtype=np.float32),
                                    chunk["lab"].astype(np.int64))
        start += n
    if dataset_digest(ds) != manifest["digest"]:
        raise ValueError(f"{directory}: samples.bin does not match the manifest digest")
    return ds


def contact_sheet(pixels: np.ndarray, columns: int = 8) -> np.ndarray:
    n = len(pixels)
    if n == 0:
        return np.zeros((1, 1, 3))
    rows = math.ceil(n / columns)
    h, w = pixels.shape[1:3]
    sheet = np.ones((rows * (h + 1), columns * (w + 1), 3))
    for i, img in enumerate(pixels):
        r, c = divmod(i, columns)
        sheet[r * (h + 1): r * (h + 1) + h, c * (w + 1): c * (w + 1) + w] = img
    return sheet


def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary P6 PPM from an (H, W, 3) array in [0, 1]."""
    data = (np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
