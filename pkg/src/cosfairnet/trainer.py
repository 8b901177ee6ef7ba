"""Dual-model debiasing trainer.

Each mini-batch runs, in order: one forward pass of both models; a GCE
update of the biased model; a difficulty-weighted CE update of the debiased
model; then, for every constrained layer, a plain gradient step on that one
layer of the debiased model that pulls its parameters towards (similarity)
or away from (dissimilarity, orthogonality) the biased model's layer.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .biasdata import BiasedDataset
from .errors import ConfigError, CosFairNetError, DivergenceError, TrainingError
from .linalg import Rng, norm
from .losses import ConstraintMode, LossConfig, constraint_loss, difficulty_weights, gce, softmax_ce, weighted_ce
from .model import MlpModel, backward, forward, init_mlp, layer_params, save_checkpoint, scatter_layer_params
from .optim import AdamState, OptimConfig, masked_plain_step, step
from .report import GroupAccuracy, MetricsRow, accuracy_by_group

log = logging.getLogger(__name__)

MODES = ("vanilla", "lffonly", "cosfairnet")
WEIGHT_SOURCES = ("pre", "post")

# init / shuffle streams of a run seed
_STREAM_BIASED, _STREAM_DEBIASED, _STREAM_SHUFFLE = 1, 2, 3


@dataclass(frozen=True)
class ConstraintSchedule:
    """Per-layer constraint modes; layers not listed are unconstrained.

    ``lambdas`` optionally overrides the global strength for single layers
    and ``lr`` is the step size of the constraint update (None: the main
    learning rate).
    """

    modes: dict = field(default_factory=lambda: {0: ConstraintMode.SIM, 2: ConstraintMode.DISSIM})
    lambdas: dict = field(default_factory=dict)
    lr: float | None = None

    def __post_init__(self):
        modes = {int(k): ConstraintMode(v) for k, v in dict(self.modes).items()}
        object.__setattr__(self, "modes", dict(sorted(modes.items())))
        object.__setattr__(self, "lambdas", {int(k): float(v) for k, v in dict(self.lambdas).items()})
        if any(k < 0 for k in self.modes):
            raise ConfigError("constraint layer indices must be >= 0")
        if any(v < 0 for v in self.lambdas.values()):
            raise ConfigError("per-layer lambda_c must be >= 0")
        if self.lr is not None and not self.lr > 0:
            raise ConfigError("constraint learning rate must be > 0")

    @classmethod
    def parse(cls, text: str, lr: float | None = None) -> "ConstraintSchedule":
        """Parse ``k:mode[,k:mode...]``, e.g. ``0:sim,2:dissim``; empty means none."""
        modes = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            k, sep, mode = item.partition(":")
            if not sep or not k.strip().isdigit():
                raise ConfigError(f"bad constraint entry {item!r}; expected k:mode")
            modes[int(k)] = ConstraintMode.parse(mode)
        return cls(modes=modes, lr=lr)

    @classmethod
    def algorithm_wiring(cls, n_layers: int, lr: float | None = None) -> "ConstraintSchedule":
        """The literal pseudocode wiring: minimise cos on the first layer, 1 - cos on the rest."""
        modes = {0: ConstraintMode.DISSIM}
        modes.update({k: ConstraintMode.SIM for k in range(1, n_layers)})
        return cls(modes=modes, lr=lr)

    def format(self) -> str:
        return ",".join(f"{k}:{m.value}" for k, m in self.modes.items())

    def resolve(self, n_layers: int, lambda_c: float) -> list[tuple[ConstraintMode, float]]:
        bad = [k for k in list(self.modes) + list(self.lambdas) if k >= n_layers]
        if bad:
            raise ConfigError(f"constraint layer {bad[0]} does not exist in a {n_layers}-layer model")
        return [(self.modes.get(k, ConstraintMode.NONE), self.lambdas.get(k, lambda_c)) for k in range(n_layers)]


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple = (100, 100, 100)
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    schedule: ConstraintSchedule = ConstraintSchedule()
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    mode: str = "cosfairnet"
    weight_source: str = "pre"
    include_bias: bool = True
    renormalize: bool = False
    shared_init: bool = False  # start both models from identical parameters
    fixed_weight: float | None = None  # diagnostic: replace W(x) by a constant
    eval_every: int = 0  # steps between metric rows; 0 means once per epoch

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.weight_source not in WEIGHT_SOURCES:
            raise ConfigError(f"weight_source must be 'pre' or 'post', got {self.weight_source!r}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    def layer_dims(self, input_dim: int, class_count: int) -> list[int]:
        return [input_dim, *self.hidden, class_count]

    @property
    def constraint_lr(self) -> float:
        return self.schedule.lr if self.schedule.lr is not None else self.optim.lr

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class StepMetrics:
    loss_b: float
    loss_d: float
    constraint_losses: dict
    mean_w: float
    min_w: float = 0.0
    max_w: float = 1.0

    @property
    def loss_constraint(self) -> float:
        return float(sum(self.constraint_losses.values()))


@dataclass
class TrainState:
    adam_b: AdamState | None
    adam_d: AdamState


@dataclass
class TrainResult:
    f_b: MlpModel | None
    f_d: MlpModel
    history: list[MetricsRow]
    best_f_d: MlpModel
    best_epoch: int
    best_val_acc: float | None
    final_eval: GroupAccuracy | None = None
    best_eval: GroupAccuracy | None = None


def _check_finite(name: str, value: float) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {name} ({value})")
    return value


def constraint_pass(f_d: MlpModel, f_b: MlpModel, cfg: TrainConfig) -> dict:
    """Constraint update of every scheduled layer of ``f_d``; ``f_b`` is read-only."""
    losses = {}
    lr = cfg.constraint_lr
    for k, (mode, lam) in enumerate(cfg.schedule.resolve(len(f_d), cfg.loss.lambda_c)):
        if mode is ConstraintMode.NONE:
            continue
        try:
            theta_d = layer_params(f_d, k, cfg.include_bias)
            loss, grad = constraint_loss(mode, theta_d, layer_params(f_b, k, cfg.include_bias), lam)
            losses[k] = loss
            if lam == 0.0:
                continue
            before = norm(theta_d) if cfg.renormalize else None
            masked_plain_step(f_d, k, grad, lr, cfg.include_bias)
            if before is not None:
                theta = layer_params(f_d, k, cfg.include_bias)
                scatter_layer_params(f_d, k, theta * (before / norm(theta)), cfg.include_bias)
        except CosFairNetError as exc:
            raise TrainingError(f"layer {k}: {exc}") from exc
    return losses


def train_step(f_b: MlpModel, f_d: MlpModel, x, y, cfg: TrainConfig, state: TrainState) -> StepMetrics:
    """One mini-batch of the dual-model procedure (``lffonly``/``cosfairnet``)."""
    if len(y) == 0:
        raise ValueError("empty batch")
    logits_b, cache_b = forward(f_b, x)
    logits_d, cache_d = forward(f_d, x)
    ce_b, _ = softmax_ce(logits_b, y)
    ce_d, _ = softmax_ce(logits_d, y)

    gce_b, dlogits_b = gce(logits_b, y, cfg.loss.q)
    loss_b = _check_finite("biased-model loss", float(gce_b.mean()))
    step(f_b, backward(f_b, cache_b, dlogits_b), state.adam_b, cfg.optim)

    if cfg.fixed_weight is not None:
        w = np.full(len(y), float(cfg.fixed_weight))
    else:
        if cfg.weight_source == "post":
            ce_b, _ = softmax_ce(forward(f_b, x)[0], y)
        w = difficulty_weights(ce_b, ce_d)
    wce, dlogits_d = weighted_ce(logits_d, y, w)
    loss_d = _check_finite("debiased-model loss", float(wce.mean()))
    step(f_d, backward(f_d, cache_d, dlogits_d), state.adam_d, cfg.optim)

    closs = constraint_pass(f_d, f_b, cfg) if cfg.mode == "cosfairnet" else {}
    for k, v in closs.items():
        _check_finite(f"constraint loss at layer {k}", v)
    return StepMetrics(loss_b, loss_d, closs, float(w.mean()), float(w.min()), float(w.max()))


def vanilla_step(f_d: MlpModel, x, y, cfg: TrainConfig, state: TrainState) -> StepMetrics:
    logits, cache = forward(f_d, x)
    ce, dlogits = softmax_ce(logits, y)
    loss = _check_finite("loss", float(ce.mean()))
    step(f_d, backward(f_d, cache, dlogits), state.adam_d, cfg.optim)
    return StepMetrics(math.nan, loss, {}, 1.0, 1.0, 1.0)


def init_models(cfg: TrainConfig, input_dim: int, class_count: int) -> tuple[MlpModel | None, MlpModel]:
    dims = cfg.layer_dims(input_dim, class_count)
    f_d = init_mlp(dims, Rng(cfg.seed, _STREAM_DEBIASED))
    if cfg.mode == "vanilla":
        return None, f_d
    f_b = f_d.copy() if cfg.shared_init else init_mlp(dims, Rng(cfg.seed, _STREAM_BIASED))
    return f_b, f_d


def train(
    cfg: TrainConfig,
    train_ds: BiasedDataset,
    val_ds: BiasedDataset | None = None,
    test_ds: BiasedDataset | None = None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
    step_callback=None,
) -> TrainResult:
    """Run the configured mode for ``cfg.epochs`` seeded, shuffled epochs.

    Metric rows report the debiased model on ``test_ds`` (or ``val_ds`` when
    no test set is given). The best snapshot is selected on pooled
    ``val_ds`` accuracy. ``step_callback(f_b, f_d, metrics)``, if given, is
    called after every step.
    """
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    for name, ds in (("validation", val_ds), ("test", test_ds)):
        if ds is not None and (ds.input_dim != train_ds.input_dim or ds.class_count != train_ds.class_count):
            raise ConfigError(f"{name} set shape ({ds.input_dim}, {ds.class_count}) does not match training set")
    f_b, f_d = init_models(cfg, train_ds.input_dim, train_ds.class_count)
    if f_b is not None:
        cfg.schedule.resolve(len(f_d), cfg.loss.lambda_c)
    state = TrainState(AdamState.for_model(f_b) if f_b is not None else None, AdamState.for_model(f_d))
    shuffle = Rng(cfg.seed, _STREAM_SHUFFLE)
    x_all = train_ds.x.astype(np.float64)
    y_all = train_ds.y
    eval_ds = test_ds if test_ds is not None else val_ds
    n = len(train_ds)

    history: list[MetricsRow] = []
    best = (f_d.copy(), 0, None)
    acc = {"loss_b": 0.0, "loss_d": 0.0, "loss_c": 0.0, "w": 0.0, "count": 0}
    global_step = 0

    def record(epoch: int) -> None:
        cnt = max(acc["count"], 1)
        ga = accuracy_by_group(f_d, eval_ds) if eval_ds is not None else None
        history.append(MetricsRow(
            epoch, global_step, acc["loss_b"] / cnt, acc["loss_d"] / cnt, acc["loss_c"] / cnt, acc["w"] / cnt,
            ga.acc_unbiased if ga else None, ga.acc_ba if ga else None, ga.acc_bc if ga else None,
        ))
        acc.update(loss_b=0.0, loss_d=0.0, loss_c=0.0, w=0.0, count=0)

    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            try:
                if f_b is None:
                    m = vanilla_step(f_d, xb, yb, cfg, state)
                else:
                    m = train_step(f_b, f_d, xb, yb, cfg, state)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch} step {global_step + 1}: {exc}") from exc
            except CosFairNetError as exc:
                raise TrainingError(f"epoch {epoch} step {global_step + 1}: {exc}") from exc
            global_step += 1
            acc["loss_b"] += m.loss_b
            acc["loss_d"] += m.loss_d
            acc["loss_c"] += m.loss_constraint
            acc["w"] += m.mean_w
            acc["count"] += 1
            if step_callback is not None:
                step_callback(f_b, f_d, m)
            if cfg.eval_every and global_step % cfg.eval_every == 0:
                record(epoch)
        if not cfg.eval_every:
            record(epoch)
        if val_ds is not None:
            val_acc = accuracy_by_group(f_d, val_ds).acc_unbiased
            if best[2] is None or (val_acc is not None and val_acc > best[2]):
                best = (f_d.copy(), epoch, val_acc)
        if checkpoint_dir is not None and checkpoint_every and epoch % checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(f_d, Path(checkpoint_dir) / f"f_d_epoch{epoch:04d}.cfnm")
        log.debug("epoch %d done (%d steps)", epoch, global_step)

    if val_ds is None:
        best = (f_d.copy(), cfg.epochs, None)
    result = TrainResult(f_b, f_d, history, best[0], best[1], best[2])
    if test_ds is not None:
        result.final_eval = accuracy_by_group(f_d, test_ds)
        result.best_eval = accuracy_by_group(best[0], test_ds)
    return result
