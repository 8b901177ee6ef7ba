"""Multilayer perceptron with hand-written forward and backward passes.

Layers are affine maps; a rectifier sits between consecutive layers and the
last layer emits raw logits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .linalg import Rng, as_matrix, matmul

CHECKPOINT_MAGIC = b"CFNM"
CHECKPOINT_VERSION = 1


@dataclass
class AffineLayer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class MlpModel:
    layers: list[AffineLayer]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a model needs at least one layer")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer {k} emits {a.out_dim} features but layer {k + 1} expects {b.in_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_dim

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def parameter_count(self) -> int:
        return sum(layer.size for layer in self.layers)

    def copy(self) -> "MlpModel":
        return MlpModel([AffineLayer(l.weight.copy(), l.bias.copy()) for l in self.layers])

    def same_as(self, other: "MlpModel") -> bool:
        """Bit-exact parameter equality."""
        if len(self) != len(other):
            return False
        return all(
            a.weight.shape == b.weight.shape
            and a.weight.tobytes() == b.weight.tobytes()
            and a.bias.tobytes() == b.bias.tobytes()
            for a, b in zip(self.layers, other.layers)
        )


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer (post-activation of the previous one)
    preacts: list[np.ndarray]  # affine output of each layer
    shapes: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class GradientSet:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (dweight, dbias) per layer

    def __len__(self) -> int:
        return len(self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in self.layers])

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "GradientSet":
        return cls([(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers])


def init_mlp(layer_dims, rng: Rng) -> MlpModel:
    """He-normal weights (std = sqrt(2 / in_dim)) and zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d < 1 for d in dims) or any(d != ld for d, ld in zip(dims, layer_dims)):
        raise ConfigError(f"invalid layer dims {list(layer_dims)}: need >= 2 positive integers")
    layers = []
    for d_in, d_out in zip(dims, dims[1:]):
        w = rng.normal(d_out * d_in, 0.0, np.sqrt(2.0 / d_in)).reshape(d_out, d_in)
        layers.append(AffineLayer(w, np.zeros(d_out)))
    return MlpModel(layers)


def forward(model: MlpModel, x) -> tuple[np.ndarray, ForwardCache]:
    x = as_matrix(x)
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"input has {x.shape[1]} features, model expects {model.input_dim}")
    inputs, preacts = [], []
    h = x
    last = len(model.layers) - 1
    for k, layer in enumerate(model.layers):
        inputs.append(h)
        z = matmul(h, layer.weight.T) + layer.bias
        preacts.append(z)
        h = z if k == last else np.maximum(z, 0.0)
    shapes = [l.weight.shape for l in model.layers]
    return h, ForwardCache(inputs, preacts, shapes)


def predict_logits(model: MlpModel, x, batch_size: int = 2048) -> np.ndarray:
    x = as_matrix(x)
    if len(x) == 0:
        return np.zeros((0, model.class_count))
    return np.concatenate([forward(model, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)])


def activations(model: MlpModel, x, k: int) -> np.ndarray:
    """Post-activation output of layer ``k`` (logits for the last layer)."""
    _check_index(model, k)
    x = as_matrix(x)
    if len(x) == 0:
        return np.zeros((0, model.layers[k].out_dim))
    logits, cache = forward(model, x)
    if k == len(model) - 1:
        return logits
    return cache.inputs[k + 1]


def backward(model: MlpModel, cache: ForwardCache, dlogits) -> GradientSet:
    """Exact gradients of a loss w.r.t. every parameter, given dloss/dlogits."""
    dz = as_matrix(dlogits)
    if cache.shapes != [l.weight.shape for l in model.layers]:
        raise ShapeError("forward cache was produced by a model with different layer shapes")
    if dz.shape != cache.preacts[-1].shape:
        raise ShapeError(f"dlogits shape {dz.shape} does not match logits shape {cache.preacts[-1].shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore[list-item]
    for k in range(len(model.layers) - 1, -1, -1):
        grads[k] = (matmul(dz.T, cache.inputs[k]), dz.sum(axis=0))
        if k > 0:
            dh = matmul(dz, model.layers[k].weight)
            dz = dh * (cache.preacts[k - 1] > 0.0)
    return GradientSet(grads)


def _check_index(model: MlpModel, k: int) -> None:
    if not 0 <= k < len(model.layers):
        raise IndexError(f"layer index {k} out of range for a {len(model.layers)}-layer model")


def layer_params(model: MlpModel, k: int, include_bias: bool = True) -> np.ndarray:
    """Copy of layer k's weight (row-major), followed by its bias if requested."""
    _check_index(model, k)
    layer = model.layers[k]
    if include_bias:
        return np.concatenate([layer.weight.ravel(), layer.bias])
    return layer.weight.ravel().copy()


def scatter_layer_params(model: MlpModel, k: int, vec, include_bias: bool = True) -> None:
    """Write a vector laid out like ``layer_params`` back into layer k only."""
    _check_index(model, k)
    layer = model.layers[k]
    vec = np.asarray(vec, dtype=np.float64)
    expected = layer.size if include_bias else layer.weight.size
    if vec.shape != (expected,):
        raise ShapeError(f"layer {k} expects a vector of length {expected}, got {vec.shape}")
    nw = layer.weight.size
    layer.weight[...] = vec[:nw].reshape(layer.weight.shape)
    if include_bias:
        layer.bias[...] = vec[nw:]


def save_checkpoint(model: MlpModel, path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<II", layer.in_dim, layer.out_dim))
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MlpModel:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint (bad magic)")
    try:
        version, n_layers = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        layers = []
        for _ in range(n_layers):
            d_in, d_out = struct.unpack_from("<II", buf, off)
            off += 8
            w = np.frombuffer(buf, dtype="<f8", count=d_in * d_out, offset=off)
            off += 8 * d_in * d_out
            b = np.frombuffer(buf, dtype="<f8", count=d_out, offset=off)
            off += 8 * d_out
            layers.append(AffineLayer(w.astype(np.float64).reshape(d_out, d_in), b.astype(np.float64)))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes after last layer")
    return MlpModel(layers)
