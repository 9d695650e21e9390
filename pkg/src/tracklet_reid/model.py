"""Shared embedding network and per-camera classifier branches.

Parameters live in an ordered name -> array mapping::

    layer{i}.weight   (fan_in, fan_out)
    layer{i}.bias     (fan_out,)
    branch{t}.weight  (feature_dim, M_t)     t = 1..T
    branch{t}.bias    (M_t,)                 only with ``branch_bias``

Hidden layers apply ``tanh``; the last layer is linear.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = b"TRCKPT\x00\x01"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "identity": (lambda z: z, lambda y: np.ones_like(y)),
}


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    feature_dim: int = 64
    per_camera_classes: tuple[int, ...] = ()
    activation: str = "tanh"
    branch_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "per_camera_classes",
                           tuple(int(m) for m in self.per_camera_classes))
        if self.feature_dim <= 0 or self.input_dim <= 0:
            raise ValueError("input_dim and feature_dim must be positive")
        if any(h <= 0 for h in self.hidden_dims):
            raise ValueError("hidden_dims must be positive")
        if any(m < 1 for m in self.per_camera_classes):
            raise ValueError("every camera needs at least one class")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.feature_dim]

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "feature_dim": self.feature_dim,
                "per_camera_classes": list(self.per_camera_classes),
                "activation": self.activation, "branch_bias": self.branch_bias}


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_layers(self) -> int:
        return len(self.config.layer_dims) - 1

    @property
    def num_branches(self) -> int:
        return len(self.config.per_camera_classes)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def digest(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()


def init(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x30DE1]))
    tensors = {}
    dims = config.layer_dims
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        tensors[f"layer{i}.weight"] = w.astype(dtype)
        tensors[f"layer{i}.bias"] = np.zeros(fan_out, dtype=dtype)
    for t, m in enumerate(config.per_camera_classes, start=1):
        w = rng.standard_normal((config.feature_dim, m)) / np.sqrt(config.feature_dim)
        tensors[f"branch{t}.weight"] = w.astype(dtype)
        if config.branch_bias:
            tensors[f"branch{t}.bias"] = np.zeros(m, dtype=dtype)
    return ModelParams(config, tensors)


def identity_init(input_dim: int, dtype=np.float64) -> ModelParams:
    """Zero-depth network whose forward pass is the identity map."""
    cfg = ModelConfig(input_dim, (), input_dim, (), "identity")
    return ModelParams(cfg, {"layer0.weight": np.eye(input_dim, dtype=dtype),
                             "layer0.bias": np.zeros(input_dim, dtype=dtype)})


def forward(params: ModelParams, frames: np.ndarray, keep_cache: bool = False):
    """Map a batch of frames (n, D_x) to features (n, D).

    With ``keep_cache`` also returns the activations needed by :func:`backward`.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != params.config.input_dim:
        raise ValueError(f"expected frames of shape (n, {params.config.input_dim}), "
                         f"got {frames.shape}")
    act, _ = _ACTIVATIONS[params.config.activation]
    h = frames.astype(params.tensors["layer0.weight"].dtype, copy=False)
    cache = [h]
    last = params.num_layers - 1
    for i in range(params.num_layers):
        z = h @ params.tensors[f"layer{i}.weight"] + params.tensors[f"layer{i}.bias"]
        h = z if i == last else act(z)
        cache.append(h)
    return (h, cache) if keep_cache else h


def backward(params: ModelParams, cache: list[np.ndarray], grad_features: np.ndarray,
             grads: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Accumulate shared-layer gradients into ``grads``; return d/d(frames)."""
    _, dact = _ACTIVATIONS[params.config.activation]
    g = grad_features
    last = params.num_layers - 1
    for i in range(last, -1, -1):
        if i != last:
            g = g * dact(cache[i + 1])
        if grads is not None:
            grads[f"layer{i}.weight"] += cache[i].T @ g
            grads[f"layer{i}.bias"] += g.sum(axis=0)
        g = g @ params.tensors[f"layer{i}.weight"].T
    return g


def branch_logits(params: ModelParams, features: np.ndarray, camera: int) -> np.ndarray:
    """Per-camera classifier scores ``features @ W_t`` (plus bias if enabled)."""
    key = f"branch{camera}.weight"
    if key not in params.tensors:
        raise KeyError(f"unknown camera id {camera}")
    logits = features @ params.tensors[key]
    bias = params.tensors.get(f"branch{camera}.bias")
    return logits if bias is None else logits + bias


def serialize(params: ModelParams) -> bytes:
    """Versioned checkpoint: header JSON then named little-endian tensors.

    Layout: magic (8 bytes), header length (uint32 LE), header JSON, then for
    each tensor in header order its raw bytes. Float32 parameters are stored as
    '<f4'; float64 parameters (gradient-check builds) as '<f8'.
    """
    entries = []
    for name, arr in params.tensors.items():
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt})
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": params.config.to_dict(),
                         "tensors": entries}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for e, arr in zip(entries, params.tensors.values()):
        buf.write(np.ascontiguousarray(arr, dtype=e["dtype"]).tobytes())
    return buf.getvalue()


def deserialize(blob: bytes) -> ModelParams:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint")
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + n])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    c = header["config"]
    config = ModelConfig(c["input_dim"], tuple(c["hidden_dims"]), c["feature_dim"],
                         tuple(c["per_camera_classes"]), c["activation"], c["branch_bias"])
    pos = 12 + n
    tensors = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(dt.newbyteorder("="))
        pos += count * dt.itemsize
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return ModelParams(config, tensors)


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def with_classes(config: ModelConfig, per_camera_classes: Sequence[int]) -> ModelConfig:
    return ModelConfig(config.input_dim, config.hidden_dims, config.feature_dim,
                       tuple(per_camera_classes), config.activation, config.branch_bias)
