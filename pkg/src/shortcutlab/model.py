"""Global and factorized encoders with source, target and cross-prediction heads.

Representations are batched: ``encode`` returns Z with shape (B, D, K), so
column ``Z[:, :, k]`` is the k-th factor representation. The global
architecture returns a single (K*D)-wide column, i.e. shape (B, K*D, 1),
and everything downstream treats it as K = 1.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorops as T
from .tensorops import Tensor

CKPT_MAGIC = b"SCLCKPT1"


class CheckpointError(ValueError):
    """Checkpoint file is malformed or fails its checksum."""


@dataclass(frozen=True)
class ModelConfig:
    representation: str = "factor"     # factor | global
    factor_dim: int = 64
    encoder_hidden: tuple = (256, 256)
    head_hidden: int = 64
    association: str = "manual"        # manual | learned
    attribute_source: str = "color"    # manual association targets
    object_source: str = "shape"
    constraint: str = "none"           # none | IL | CI
    output_gain: float = 0.1           # scales the init bound of the encoder's last layer

    def __post_init__(self):
        if self.representation not in ("factor", "global"):
            raise ValueError(f"representation must be factor or global, got {self.representation!r}")
        if self.association not in ("manual", "learned"):
            raise ValueError(f"association must be manual or learned, got {self.association!r}")
        if self.constraint not in ("none", "IL", "CI"):
            raise ValueError(f"constraint must be none, IL or CI, got {self.constraint!r}")


@dataclass
class ModelParams:
    config: ModelConfig
    input_dim: int
    source_names: tuple          # factor names, in catalog order
    source_counts: tuple         # classes per source factor
    target_counts: tuple         # (attribute classes, object classes)
    seed: int = 0
    tensors: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.source_counts)

    @property
    def columns(self) -> int:
        """Number of columns of Z seen downstream (1 for the global architecture)."""
        return self.K if self.config.representation == "factor" else 1

    @property
    def column_dim(self) -> int:
        D = self.config.factor_dim
        return D if self.config.representation == "factor" else D * self.K

    def group(self, prefix: str) -> list:
        return [n for n in self.tensors if n.startswith(prefix)]

    def trainable(self) -> list:
        """Parameters updated by the main optimizer (everything except CI heads)."""
        return [n for n in self.tensors if not n.startswith("ci.")]

    def copy(self) -> "ModelParams":
        new = ModelParams(self.config, self.input_dim, self.source_names, self.source_counts,
                          self.target_counts, self.seed)
        new.tensors = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.tensors.items()}
        return new

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for n, t in self.tensors.items():
            if n.startswith(prefix):
                h.update(n.encode())
                h.update(t.data.astype("<f8").tobytes())
        return h.hexdigest()[:16]


def _kaiming_uniform(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / n_in)
    return rng.uniform(-bound, bound, size=(n_out, n_in))


def _add_mlp(tensors: dict, rng, prefix: str, sizes, last_gain: float = 1.0) -> None:
    last = len(sizes) - 2
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = _kaiming_uniform(rng, n_out, n_in) * (last_gain if i == last else 1.0)
        tensors[f"{prefix}.{i}.W"] = Tensor(W, requires_grad=True)
        tensors[f"{prefix}.{i}.b"] = Tensor(np.zeros(n_out), requires_grad=True)


def init_params(config: ModelConfig, input_dim: int, source_names, source_counts, target_counts,
                seed: int = 0) -> ModelParams:
    """Seeded initialization. Association logits start at zero (uniform association)."""
    p = ModelParams(config, int(input_dim), tuple(source_names), tuple(int(c) for c in source_counts),
                    tuple(int(c) for c in target_counts), seed)
    rng = np.random.default_rng([seed, 0x1417])
    K, D, Hh = p.K, config.factor_dim, config.head_hidden
    _add_mlp(p.tensors, rng, "encoder", (input_dim, *config.encoder_hidden, K * D), config.output_gain)
    width = p.column_dim
    for k, n in enumerate(p.source_counts):
        _add_mlp(p.tensors, rng, f"source.{k}", (width, Hh, n))
    _add_mlp(p.tensors, rng, "target.attr", (width, Hh, p.target_counts[0]))
    _add_mlp(p.tensors, rng, "target.obj", (width, Hh, p.target_counts[1]))
    if config.constraint == "CI" and p.columns > 1:
        for k1 in range(K):
            for k2 in range(K):
                if k1 != k2:
                    _add_mlp(p.tensors, rng, f"ci.{k1}.{k2}", (D, Hh, p.source_counts[k2]))
    if config.association == "learned":
        p.tensors["assoc_logits"] = Tensor(np.zeros((p.columns, 2)), requires_grad=True)
    return p


def mlp(params: ModelParams, prefix: str, x: Tensor, frozen: bool = False) -> Tensor:
    """Affine/ReLU stack; ``frozen`` routes the weights through stop_grad."""
    i = 0
    while f"{prefix}.{i}.W" in params.tensors:
        W, b = params.tensors[f"{prefix}.{i}.W"], params.tensors[f"{prefix}.{i}.b"]
        if frozen:
            W, b = T.stop_grad(W), T.stop_grad(b)
        if i:
            x = T.relu(x)
        x = T.affine(x, W, b)
        i += 1
    return x


def prepare_inputs(pixels: np.ndarray) -> np.ndarray:
    """Flatten images to float64 rows centred on zero."""
    x = np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1)
    return x - 0.5


def encode(params: ModelParams, x) -> Tensor:
    """Z of shape (B, D, K) (factor) or (B, K*D, 1) (global)."""
    x = T.as_tensor(x)
    if x.data.ndim == 1:
        x = T.reshape(x, (1, -1))
    if x.shape[1] != params.input_dim:
        raise T.ShapeError(f"encoder expects {params.input_dim} inputs, got {x.shape[1]}")
    h = mlp(params, "encoder", x)
    # the encoder's last layer has no ReLU: mlp() applies ReLU between layers only
    B = h.shape[0]
    if params.config.representation == "global":
        return T.reshape(h, (B, -1, 1))
    return T.transpose(T.reshape(h, (B, params.K, params.config.factor_dim)), (0, 2, 1))


def column(Z: Tensor, k: int) -> Tensor:
    return T.index(Z, (slice(None), slice(None), k))


def predict_source(params: ModelParams, Z: Tensor) -> list:
    """Head k reads z_k (factor) or the whole global vector (global)."""
    if params.columns > 1 and Z.shape[2] != params.K:
        raise T.ShapeError(f"Z has {Z.shape[2]} columns, expected {params.K}")
    out = []
    for k in range(params.K):
        zk = column(Z, k if params.columns > 1 else 0)
        out.append(mlp(params, f"source.{k}", zk))
    return out


def manual_association(params: ModelParams) -> np.ndarray:
    if params.columns == 1:
        return np.ones((1, 2))
    A = np.zeros((params.K, 2))
    A[params.source_names.index(params.config.attribute_source), 0] = 1.0
    A[params.source_names.index(params.config.object_source), 1] = 1.0
    return A


def soft_association(assoc_logits: Tensor) -> Tensor:
    """Column-wise softmax: each column is a distribution over factors."""
    return T.softmax(assoc_logits, axis=0)


def association(params: ModelParams) -> Tensor:
    if params.config.association == "learned":
        return soft_association(params.tensors["assoc_logits"])
    return Tensor(manual_association(params))


def apply_association(Z: Tensor, A: Tensor) -> tuple:
    """[z_a z_o] = Z·A, batched over the leading axis."""
    if A.shape[0] != Z.shape[-1]:
        raise T.ShapeError(f"association has {A.shape[0]} rows but Z has {Z.shape[-1]} columns")
    ZA = T.matmul(Z, A)
    return column(ZA, 0), column(ZA, 1)


def predict_target(params: ModelParams, z_a: Tensor, z_o: Tensor) -> tuple:
    return mlp(params, "target.attr", z_a), mlp(params, "target.obj", z_o)


def ci_pairs(params: ModelParams) -> list:
    if params.columns == 1:
        return []
    return [(k1, k2) for k1 in range(params.K) for k2 in range(params.K) if k1 != k2]


def predict_ci(params: ModelParams, Z: Tensor, frozen: bool = False) -> dict:
    """Cross-prediction logits H'_{k1 k2}(z_{k1}) for every ordered pair."""
    return {(k1, k2): mlp(params, f"ci.{k1}.{k2}", column(Z, k1), frozen=frozen)
            for k1, k2 in ci_pairs(params)}


def target_logits(params: ModelParams, x) -> tuple:
    """Forward pass for target prediction; returns numpy (attr logits, obj logits)."""
    Z = encode(params, x)
    z_a, z_o = apply_association(Z, association(params))
    la, lo = predict_target(params, z_a, z_o)
    return la.data, lo.data


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(params: ModelParams, path: str, extra: dict | None = None) -> None:
    """JSON header followed by little-endian float64 blocks in declared order."""
    payload = b"".join(t.data.astype("<f8").tobytes() for t in params.tensors.values())
    header = {
        "config": asdict(params.config),
        "input_dim": params.input_dim,
        "source_names": list(params.source_names),
        "source_counts": list(params.source_counts),
        "target_counts": list(params.target_counts),
        "seed": params.seed,
        "params": [[n, list(t.shape)] for n, t in params.tensors.items()],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    header.update(extra or {})
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str) -> tuple:
    """Returns (ModelParams, header dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    payload = raw[16 + n:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    cfg = dict(header["config"])
    cfg["encoder_hidden"] = tuple(cfg["encoder_hidden"])
    p = ModelParams(ModelConfig(**cfg), header["input_dim"], tuple(header["source_names"]),
                    tuple(header["source_counts"]), tuple(header["target_counts"]), header["seed"])
    offset = 0
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset * 8).reshape(shape)
        p.tensors[name] = Tensor(arr.astype(np.float64), requires_grad=True)
        offset += size
    return p, header
