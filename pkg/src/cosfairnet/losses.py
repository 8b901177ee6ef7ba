"""Objectives used by the dual-model trainer.

Per-sample losses are returned alongside ``dlogits``, the gradient of the
batch-mean loss with respect to the logits.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateVectorError, ShapeError
from .linalg import NORM_EPS, dot, norm_product

DEGENERATE_CE_SUM = 1e-12


@dataclass(frozen=True)
class LossConfig:
    q: float = 0.7
    lambda_c: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"q must lie in (0, 1], got {self.q}")
        if not self.lambda_c >= 0.0:
            raise ConfigError(f"lambda_c must be >= 0, got {self.lambda_c}")


class ConstraintMode(str, enum.Enum):
    NONE = "none"
    SIM = "sim"
    DISSIM = "dissim"
    ORTH = "orth"

    @classmethod
    def parse(cls, text: str) -> "ConstraintMode":
        aliases = {"similarity": "sim", "dissimilarity": "dissim", "orthogonality": "orth"}
        t = text.strip().lower()
        try:
            return cls(aliases.get(t, t))
        except ValueError:
            raise ConfigError(f"unknown constraint mode {text!r}; expected one of sim, dissim, orth, none") from None


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(logits: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeError(f"labels of shape {y.shape} do not match logits of shape {logits.shape}")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return y.astype(np.intp)


def _ce_parts(logits, y):
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(logits, y)
    rows = np.arange(len(y))
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = lse - shifted[rows, y]
    p = np.exp(shifted - lse[:, None])
    grad = p.copy()
    grad[rows, y] -= 1.0
    return loss, p, grad, rows, y


def softmax_ce(logits, y) -> tuple[np.ndarray, np.ndarray]:
    loss, _, grad, _, _ = _ce_parts(logits, y)
    return loss, grad / max(len(loss), 1)


def weighted_ce(logits, y, weights) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``w_i * CE_i`` and the gradient of their batch mean."""
    loss, _, grad, _, _ = _ce_parts(logits, y)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != loss.shape:
        raise ShapeError(f"weights of shape {w.shape} do not match batch of {loss.shape[0]}")
    # (grad * w) / n, not grad * (w / n): with w == 1 this is bit-identical to softmax_ce
    return w * loss, (grad * w[:, None]) / max(len(loss), 1)


def gce(logits, y, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized cross-entropy ``(1 - p_y^q) / q``.

    Its logit gradient is exactly ``p_y^q`` times the CE gradient, so samples
    the model already fits well dominate the update.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    ce, p, grad, rows, y = _ce_parts(logits, y)
    # p_y^q = exp(-q * CE) keeps precision when p_y underflows
    py_q = np.exp(-q * ce)
    loss = -np.expm1(-q * ce) / q
    return loss, grad * (py_q[:, None] / max(len(ce), 1))


def difficulty_weight(ce_b: float, ce_d: float) -> float:
    """Relative difficulty ``ce_b / (ce_b + ce_d)``; 0.5 when both are ~0."""
    if ce_b < 0 or ce_d < 0:
        raise ValueError(f"cross-entropies must be non-negative, got {ce_b}, {ce_d}")
    s = ce_b + ce_d
    if s < DEGENERATE_CE_SUM:
        return 0.5
    # the smaller share is divided out and the larger taken as its complement,
    # which makes W(a, b) + W(b, a) == 1 exactly in floating point
    if ce_b <= ce_d:
        return ce_b / s
    return 1.0 - ce_d / s


def difficulty_weights(ce_b, ce_d) -> np.ndarray:
    ce_b = np.asarray(ce_b, dtype=np.float64)
    ce_d = np.asarray(ce_d, dtype=np.float64)
    if (ce_b < 0).any() or (ce_d < 0).any():
        raise ValueError("cross-entropies must be non-negative")
    s = ce_b + ce_d
    degenerate = s < DEGENERATE_CE_SUM
    safe = np.where(degenerate, 1.0, s)
    w = np.where(ce_b <= ce_d, ce_b / safe, 1.0 - ce_d / safe)
    return np.where(degenerate, 0.5, w)


def cosine_and_grad(u, v) -> tuple[float, np.ndarray]:
    """Cosine of (u, v) and its gradient with respect to u."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine needs equal-length vectors, got {u.shape} and {v.shape}")
    uu, vv = dot(u, u), dot(v, v)
    nu, nv = np.sqrt(uu), np.sqrt(vv)
    if nu < NORM_EPS or nv < NORM_EPS:
        raise DegenerateVectorError(f"cosine of a zero-norm vector (|u|={nu:g}, |v|={nv:g})")
    nuv = norm_product(uu, vv)
    s = min(1.0, max(-1.0, dot(u, v) / nuv))
    grad = v / nuv - (s / uu) * u
    return s, grad


def constraint_loss(mode, theta_d, theta_b, lambda_c: float) -> tuple[float, np.ndarray]:
    """Cosine constraint between a layer of the debiased model and the biased one.

    ``theta_b`` is treated as a constant; the gradient is w.r.t. ``theta_d``.
    Similarity: lambda*(1 - s); dissimilarity: lambda*(1 + s);
    orthogonality: lambda*s**2.
    """
    mode = ConstraintMode(mode)
    theta_d = np.asarray(theta_d, dtype=np.float64)
    if mode is ConstraintMode.NONE:
        if np.shape(theta_b) != theta_d.shape:
            raise ShapeError("constraint vectors differ in length")
        return 0.0, np.zeros_like(theta_d)
    s, ds = cosine_and_grad(theta_d, theta_b)
    s_c = min(1.0, max(-1.0, s))
    if mode is ConstraintMode.SIM:
        return lambda_c * (1.0 - s_c), -lambda_c * ds
    if mode is ConstraintMode.DISSIM:
        return lambda_c * (1.0 + s_c), lambda_c * ds
    return lambda_c * s * s, (2.0 * lambda_c * s) * ds
