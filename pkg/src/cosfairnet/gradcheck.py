"""Finite-difference oracle for the analytic gradients.

``finite_diff`` perturbs one parameter at a time and restores it exactly, so
the model is bit-identical afterwards. ``run_suite`` certifies every loss path
used in training on randomly drawn small networks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError
from .linalg import Rng
from .losses import ConstraintMode, constraint_loss, gce, softmax_ce, weighted_ce
from .model import GradientSet, MlpModel, backward, forward, init_mlp, layer_params

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-6
KINK_MARGIN = 1e-3
LOSS_PATHS = ("ce", "gce_q0.3", "gce_q0.7", "gce_q1.0", "weighted_ce", "sim", "dissim", "orth", "composite")


@dataclass(frozen=True)
class GradReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple[int, int] | None  # (layer, flat index within the layer)
    passed: bool
    tol: float

    def describe(self) -> str:
        where = f"layer {self.worst[0]} index {self.worst[1]}" if self.worst else "-"
        status = "pass" if self.passed else "FAIL"
        return f"{status} max_rel={self.max_rel_error:.3e} max_abs={self.max_abs_error:.3e} worst={where}"


def finite_diff(loss_fn, model: MlpModel, eps: float = DEFAULT_EPS) -> GradientSet:
    """Central differences of ``loss_fn(model)`` for every parameter."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    grads = []
    for k, layer in enumerate(model.layers):
        pair = []
        for arr in (layer.weight, layer.bias):
            g = np.zeros_like(arr)
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(loss_fn(model))
                flat[i] = orig - eps
                f_minus = float(loss_fn(model))
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise DivergenceError(f"non-finite loss at layer {k} index {i}")
                gflat[i] = (f_plus - f_minus) / (2.0 * eps)
            pair.append(g)
        grads.append((pair[0], pair[1]))
    return GradientSet(grads)


def check(analytic: GradientSet, numeric: GradientSet, tol: float = DEFAULT_TOL) -> GradReport:
    """Compare two gradient sets; relative error uses max(|a|, |n|, 1e-12)."""
    if len(analytic) != len(numeric):
        raise ShapeError("gradient sets have different layer counts")
    worst, max_rel, max_abs = None, 0.0, 0.0
    for k, (a_pair, n_pair) in enumerate(zip(analytic.layers, numeric.layers)):
        a = np.concatenate([a_pair[0].ravel(), a_pair[1].ravel()])
        n = np.concatenate([n_pair[0].ravel(), n_pair[1].ravel()])
        if a.shape != n.shape or a_pair[0].shape != n_pair[0].shape:
            raise ShapeError(f"gradient shapes differ at layer {k}")
        if a.size == 0:
            continue
        diff = np.abs(a - n)
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        i = int(np.argmax(rel))
        if worst is None or rel[i] > max_rel:
            max_rel, worst = float(rel[i]), (k, i)
        max_abs = max(max_abs, float(diff.max()))
    return GradReport(max_rel, max_abs, worst, max_rel <= tol, tol)


def merge_reports(reports, tol: float) -> GradReport:
    reports = list(reports)
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradReport(worst.max_rel_error, max(r.max_abs_error for r in reports), worst.worst,
                      worst.max_rel_error <= tol, tol)


# ------------------------------------------------------------- suite
#
# Central differences of an absolute loss of size ~1 carry roundoff of about
# 1e-16 / eps, which swamps coordinates whose gradient is below ~1e-5. The
# suite therefore differentiates the loss *relative to the unperturbed
# parameters*, evaluated in difference form: perturbations are pushed through
# each layer and the softmax with log1p/expm1, so the rounding error scales
# with the perturbation rather than with the loss. Only forward arithmetic is
# used; nothing is shared with ``backward``.


def _relu_delta(z0: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Exact max(z0 + dz, 0) - max(z0, 0) without cancellation in the common cases."""
    z1 = z0 + dz
    return np.where(z0 > 0, np.where(z1 > 0, dz, -z0), np.where(z1 > 0, z1, 0.0))


class NetworkDelta:
    """Per-sample change in CE of ``model`` relative to a frozen reference copy."""

    def __init__(self, model: MlpModel, x, y):
        self.ref = model.copy()
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y)
        logits, cache = forward(self.ref, self.x)
        self.cache = cache
        self.ce0, _ = softmax_ce(logits, self.y)
        shifted = logits - logits.max(axis=1, keepdims=True)
        self.p0 = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def delta_ce(self, model: MlpModel) -> np.ndarray:
        dh = np.zeros_like(self.x)
        last = len(model) - 1
        for k, (layer, ref) in enumerate(zip(model.layers, self.ref.layers)):
            dw = layer.weight - ref.weight
            db = layer.bias - ref.bias
            dz = dh @ layer.weight.T + self.cache.inputs[k] @ dw.T + db
            dh = dz if k == last else _relu_delta(self.cache.preacts[k], dz)
        rows = np.arange(len(self.y))
        dlse = np.log1p((self.p0 * np.expm1(dh)).sum(axis=1))
        return dlse - dh[rows, self.y]


def _network_loss_delta(kind: str, nd: NetworkDelta, w):
    def loss_fn(m):
        dce = nd.delta_ce(m)
        if kind == "ce":
            return float(dce.mean())
        if kind.startswith("gce_q"):
            q = float(kind[5:])
            return float((np.exp(-q * nd.ce0) * -np.expm1(-q * dce) / q).mean())
        return float((w * dce).mean())

    return loss_fn


def _cosine_delta(k: int, model0: MlpModel, theta_b: np.ndarray, mode: ConstraintMode, lam: float):
    u0 = layer_params(model0, k)
    v = np.asarray(theta_b, dtype=np.float64)
    n0, nv = np.sqrt(u0 @ u0), np.sqrt(v @ v)
    a0 = u0 @ v
    s0 = a0 / (n0 * nv)

    def loss_fn(m):
        du = layer_params(m, k) - u0
        r = (2.0 * (u0 @ du) + du @ du) / (n0 * n0)
        inv = np.exp(-0.5 * np.log1p(r))
        ds = ((du @ v) * inv + a0 * np.expm1(-0.5 * np.log1p(r))) / (n0 * nv)
        if mode is ConstraintMode.SIM:
            return -lam * ds
        if mode is ConstraintMode.DISSIM:
            return lam * ds
        return lam * ds * (2.0 * s0 + ds)

    return loss_fn


def _embed(model: MlpModel, k: int, grad_k: np.ndarray) -> GradientSet:
    gs = GradientSet.zeros_like(model)
    dw, db = gs.layers[k]
    dw[...] = grad_k[: dw.size].reshape(dw.shape)
    db[...] = grad_k[dw.size :]
    return gs


def _random_problem(rng: Rng):
    """A random net (<= 4 layers, widths <= 16) and a batch of inputs in [0, 1) with no rectifier
    pre-activation within KINK_MARGIN of zero."""
    while True:
        n_layers = int(rng.integers(1, 5))
        dims = [int(d) for d in rng.integers(2, 17, n_layers + 1)]
        model = init_mlp(dims, rng)
        for layer in model.layers:
            layer.bias[...] = rng.normal(layer.out_dim, 0.0, 0.1)
        batch = int(rng.integers(1, 9))
        for _ in range(50):
            x = rng.uniform(batch * dims[0]).reshape(batch, dims[0])
            _, cache = forward(model, x)
            hidden = cache.preacts[:-1]
            if not hidden or min(float(np.abs(z).min()) for z in hidden) > KINK_MARGIN:
                y = rng.integers(0, dims[-1], batch)
                return model, x, y


def analytic_gradient(kind: str, model: MlpModel, x, y, w, k: int | None = None, theta_b=None,
                      lam: float = 0.0) -> GradientSet:
    """Gradient of a suite loss path from the production code (backward + losses)."""
    if kind in ("sim", "dissim", "orth"):
        return _embed(model, k, constraint_loss(kind, layer_params(model, k), theta_b, lam)[1])
    logits, cache = forward(model, x)
    if kind == "ce":
        d = softmax_ce(logits, y)[1]
    elif kind.startswith("gce_q"):
        d = gce(logits, y, float(kind[5:]))[1]
    else:
        d = weighted_ce(logits, y, w)[1]
    grads = backward(model, cache, d)
    if kind == "composite":
        extra = constraint_loss(ConstraintMode.SIM, layer_params(model, k), theta_b, lam)[1]
        dw, db = grads.layers[k]
        grads.layers[k] = (dw + extra[: dw.size].reshape(dw.shape), db + extra[dw.size :])
    return grads


def check_path(kind: str, model: MlpModel, x, y, rng: Rng, eps: float, tol: float,
               inject_sign_flip: bool = False) -> GradReport:
    w = rng.uniform(len(y))
    k = int(rng.integers(0, len(model)))
    theta_b = rng.normal(model.layers[k].size)
    lam = float(rng.uniform(None, 0.05, 2.0))
    analytic = analytic_gradient(kind, model, x, y, w, k, theta_b, lam)
    if kind in ("sim", "dissim", "orth"):
        loss_fn = _cosine_delta(k, model, theta_b, ConstraintMode(kind), lam)
    elif kind == "composite":
        net = _network_loss_delta("weighted_ce", NetworkDelta(model, x, y), w)
        cos = _cosine_delta(k, model, theta_b, ConstraintMode.SIM, lam)
        loss_fn = lambda m: net(m) + cos(m)  # noqa: E731
    else:
        loss_fn = _network_loss_delta(kind, NetworkDelta(model, x, y), w)
    if inject_sign_flip:
        for dw, _ in analytic.layers:
            if np.any(dw != 0):
                i = int(np.argmax(np.abs(dw)))
                dw.reshape(-1)[i] = -dw.reshape(-1)[i]
                break
    return check(analytic, finite_diff(loss_fn, model, eps), tol)


def run_suite(n_nets: int = 100, seed: int = 0, eps: float = DEFAULT_EPS, tol: float = DEFAULT_TOL,
              paths=LOSS_PATHS, inject_sign_flip: bool = False) -> dict[str, GradReport]:
    """Worst-case report per loss path over ``n_nets`` random problems.

    Problems depend only on (seed, net index), so runs with different ``eps``
    see the same networks.
    """
    per_path: dict[str, list[GradReport]] = {p: [] for p in paths}
    for i in range(n_nets):
        model, x, y = _random_problem(Rng((seed, 17), i))
        for j, kind in enumerate(paths):
            report = check_path(kind, model, x, y, Rng((seed, 18, i), j), eps, tol,
                                inject_sign_flip=inject_sign_flip and kind == paths[0])
            per_path[kind].append(report)
    return {kind: merge_reports(reps, tol) for kind, reps in per_path.items()}


def convergence_order(err_coarse: float, err_fine: float, eps_coarse: float, eps_fine: float) -> float:
    """Observed order p in err ~ eps^p between two step sizes."""
    if err_fine <= 0 or err_coarse <= 0:
        return math.inf
    return math.log(err_coarse / err_fine) / math.log(eps_coarse / eps_fine)
