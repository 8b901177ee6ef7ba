"""Adam/SGD updates and the single-layer plain step used by the constraint pass."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .model import GradientSet, MlpModel, layer_params, scatter_layer_params


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kind: str = "adam"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("Adam eps must be > 0")
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer kind must be 'adam' or 'sgd', got {self.kind!r}")


@dataclass
class AdamState:
    m: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    v: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_model(cls, model: MlpModel) -> "AdamState":
        zeros = lambda: [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers]  # noqa: E731
        return cls(zeros(), zeros(), 0)

    def digest(self) -> bytes:
        parts = [self.t.to_bytes(8, "little")]
        for pairs in (self.m, self.v):
            for a, b in pairs:
                parts.append(a.tobytes())
                parts.append(b.tobytes())
        return b"".join(parts)


def _check_congruent(model: MlpModel, grads: GradientSet) -> None:
    if len(grads) != len(model.layers):
        raise ShapeError(f"{len(grads)} gradient pairs for a {len(model.layers)}-layer model")
    for k, (layer, (dw, db)) in enumerate(zip(model.layers, grads.layers)):
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise ShapeError(f"gradient shape mismatch at layer {k}")


def step(model: MlpModel, grads: GradientSet, state: AdamState, cfg: OptimConfig) -> None:
    """Apply one in-place update; ``state.t`` advances once per call."""
    _check_congruent(model, grads)
    state.t += 1
    if cfg.kind == "sgd":
        for layer, (dw, db) in zip(model.layers, grads.layers):
            layer.weight -= cfg.lr * dw
            layer.bias -= cfg.lr * db
        return
    if len(state.m) != len(model.layers):
        raise ShapeError("Adam state does not match the model")
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for k, layer in enumerate(model.layers):
        for j, (param, g) in enumerate(((layer.weight, grads.layers[k][0]), (layer.bias, grads.layers[k][1]))):
            m = state.m[k][j]
            v = state.v[k][j]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            param -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def masked_plain_step(model: MlpModel, k: int, grad_k, lr: float, include_bias: bool = True) -> None:
    """Plain gradient descent on layer k alone; nothing else is read or written."""
    theta = layer_params(model, k, include_bias)
    grad_k = np.asarray(grad_k, dtype=np.float64)
    if grad_k.shape != theta.shape:
        raise ShapeError(f"layer {k} has {theta.size} parameters, gradient has shape {grad_k.shape}")
    scatter_layer_params(model, k, theta - lr * grad_k, include_bias)
