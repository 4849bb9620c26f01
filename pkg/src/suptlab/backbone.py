"""GIN backbone, readout, projection head, and checkpoint files.

Checkpoint byte layout (little-endian throughout)::

    bytes 0..7    magic  b"SUPTCKPT"
    bytes 8..15   uint64 manifest length L
    next L bytes  UTF-8 JSON manifest
    remainder     float64 payloads, one per manifest tensor, in manifest order,
                  each row-major with rows*cols entries

The manifest holds ``format_version``, ``config`` (GinConfig fields),
``pretrain``, ``seed``, ``tensors`` (a list of ``{"name", "shape"}``) and an
optional ``provenance`` object (tool, version, run config).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import as_batch
from .numerics import (
    FROZEN,
    TUNABLE,
    ParamGroup,
    ShapeError,
    Tensor,
    as_tensor,
    matmul,
    propagate,
    relu,
    rng,
    segment_sum,
)

FORMAT_VERSION = 1
MAGIC = b"SUPTCKPT"


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, truncated or of the wrong version."""


@dataclass(frozen=True)
class GinConfig:
    input_dim: int
    num_layers: int = 5
    hidden_dim: int = 300
    epsilon: float = 0.0
    mlp_per_layer: bool = False

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden_dim < 1 or self.input_dim < 1:
            raise ValueError("num_layers, hidden_dim and input_dim must be >= 1")
        if self.epsilon < -1.0:
            # eps = -1 drops the self term; below that the self weight turns negative
            raise ValueError(f"epsilon must be >= -1, got {self.epsilon}")

    def weight_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {}
        d_in = self.input_dim
        for layer in range(self.num_layers):
            shapes[f"gin.{layer}.w"] = (d_in, self.hidden_dim)
            if self.mlp_per_layer:
                shapes[f"gin.{layer}.w2"] = (self.hidden_dim, self.hidden_dim)
            d_in = self.hidden_dim
        return shapes


@dataclass
class Backbone:
    config: GinConfig
    params: ParamGroup

    @classmethod
    def init(cls, config: GinConfig, seed: int, role: str = FROZEN) -> "Backbone":
        gen = rng(seed, "backbone")
        arrays = {}
        for name, (fan_in, fan_out) in config.weight_shapes().items():
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = gen.uniform(-bound, bound, size=(fan_in, fan_out))
        return cls(config, ParamGroup.from_arrays(arrays, role))

    def with_role(self, role: str) -> "Backbone":
        """Copy whose tensors carry ``role``; the original is left untouched."""
        arrays = {k: v.copy() for k, v in self.params.arrays().items()}
        return Backbone(self.config, ParamGroup.from_arrays(arrays, role))


def gin_layer_forward(x, g, eps: float, weights, w2=None) -> Tensor:
    """``(A + (1+eps) I) X W``, then ``relu(.) @ w2`` when a second weight is given."""
    x = as_tensor(x)
    batch = as_batch(g)
    w = as_tensor(weights)
    if x.rows != batch.num_nodes:
        raise ShapeError(f"x has {x.rows} rows, graph has {batch.num_nodes} nodes")
    if x.cols != w.rows:
        raise ShapeError(f"x width {x.cols} does not match weight rows {w.rows}")
    # project first when it shrinks the width; the product is the same
    w_edge, w_self = batch.gin_weights(eps)
    if w.cols <= x.cols:
        z = propagate(matmul(x, w), batch.src, batch.dst, w_edge, w_self)
    else:
        z = matmul(propagate(x, batch.src, batch.dst, w_edge, w_self), w)
    if w2 is not None:
        z = matmul(relu(z), w2)
    return z


def backbone_forward(b: Backbone, g, x=None) -> Tensor:
    """Node embeddings after ``num_layers`` GIN layers, relu between layers."""
    batch = as_batch(g)
    h = as_tensor(batch.x if x is None else x)
    cfg = b.config
    if h.cols != cfg.input_dim:
        raise ShapeError(f"feature width {h.cols} does not match backbone input_dim {cfg.input_dim}")
    for layer in range(cfg.num_layers):
        w2 = b.params[f"gin.{layer}.w2"] if cfg.mlp_per_layer else None
        h = gin_layer_forward(h, batch, cfg.epsilon, b.params[f"gin.{layer}.w"], w2)
        if layer < cfg.num_layers - 1:
            h = relu(h)
    return h


def readout(z, g, kind: str = "sum") -> Tensor:
    """Per-graph column sum or mean of node embeddings (``G x h``)."""
    batch = as_batch(g)
    pooled = segment_sum(as_tensor(z), batch.ptr)
    if kind == "sum":
        return pooled
    if kind == "mean":
        inv = 1.0 / np.diff(batch.ptr).astype(np.float64)
        return pooled * Tensor.wrap(inv[:, None])
    raise ValueError(f"readout must be 'sum' or 'mean', got {kind!r}")


# ------------------------------------------------------------------ head


@dataclass
class Head:
    """Linear layers with relu in between; raw logits out."""

    params: ParamGroup
    num_layers: int

    @classmethod
    def init(cls, in_dim: int, num_tasks: int, num_layers: int, seed: int, hidden: int | None = None):
        if not 1 <= num_layers <= 4:
            raise ValueError(f"head layers must be in 1..4, got {num_layers}")
        hidden = hidden or in_dim
        gen = rng(seed, "head")
        widths = [in_dim] + [hidden] * (num_layers - 1) + [num_tasks]
        arrays = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(a)
            arrays[f"head.{i}.w"] = gen.uniform(-bound, bound, size=(a, b))
            arrays[f"head.{i}.b"] = gen.uniform(-bound, bound, size=(1, b))
        return cls(ParamGroup.from_arrays(arrays, TUNABLE), num_layers)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "Head":
        n = sum(1 for k in arrays if k.endswith(".w"))
        return cls(ParamGroup.from_arrays(arrays, TUNABLE), n)

    @property
    def out_dim(self) -> int:
        return self.params[f"head.{self.num_layers - 1}.w"].cols


def head_forward(h: Head, z_g) -> Tensor:
    out = as_tensor(z_g)
    for i in range(h.num_layers):
        w = h.params[f"head.{i}.w"]
        if out.cols != w.rows:
            raise ShapeError(f"head layer {i}: input width {out.cols}, weight rows {w.rows}")
        out = matmul(out, w) + h.params[f"head.{i}.b"]
        if i < h.num_layers - 1:
            out = relu(out)
    return out


def param_count(group: ParamGroup, filter: str = "all") -> int:
    return group.count(filter)


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    config: GinConfig
    tensors: dict
    pretrain: str = "none"
    seed: int = 0
    format_version: int = FORMAT_VERSION
    history: list = field(default_factory=list, compare=False, repr=False)
    provenance: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_backbone(cls, b: Backbone, pretrain: str, seed: int, history=None) -> "Checkpoint":
        tensors = {k: v.copy() for k, v in b.params.arrays().items()}
        return cls(b.config, tensors, pretrain, seed, history=list(history or []))

    def backbone(self, role: str = FROZEN) -> Backbone:
        """Fresh backbone; the checkpoint's own arrays are copied, never shared."""
        expected = self.config.weight_shapes()
        missing = [k for k in expected if k not in self.tensors]
        if missing:
            raise CheckpointError(f"checkpoint lacks tensor(s) {', '.join(missing)}")
        arrays = {k: self.tensors[k].copy() for k in expected}
        return Backbone(self.config, ParamGroup.from_arrays(arrays, role))

    def to_bytes(self) -> bytes:
        return _encode(self)

    def equals(self, other: "Checkpoint") -> bool:
        if (self.config, self.pretrain, self.seed) != (other.config, other.pretrain, other.seed):
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def _encode(ck: Checkpoint) -> bytes:
    manifest = {
        "format_version": ck.format_version,
        "config": asdict(ck.config),
        "pretrain": ck.pretrain,
        "seed": ck.seed,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in ck.tensors.items()],
    }
    if ck.provenance:
        manifest["provenance"] = ck.provenance
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in ck.tensors.values())
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(_encode(ck))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (size,) = struct.unpack("<Q", raw[8:16])
    if 16 + size > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {version}, this reader supports {FORMAT_VERSION}")
    config = GinConfig(**manifest["config"])
    expected = config.weight_shapes()
    tensors = {}
    offset = 16 + size
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise CheckpointError(f"{path}: unknown tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {shape}, config implies {expected[name]}")
        nbytes = 8 * shape[0] * shape[1]
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=shape[0] * shape[1], offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    missing = [k for k in expected if k not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensor(s) {', '.join(missing)}")
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(
        config, tensors, manifest["pretrain"], int(manifest["seed"]), version,
        provenance=manifest.get("provenance", {}),
    )


def default_backbone_param_count(d: int = 300) -> int:
    """All weights of the 5 x 300 single-linear GIN (450 000 for d = 300)."""
    return sum(a * b for a, b in GinConfig(input_dim=d).weight_shapes().values())
