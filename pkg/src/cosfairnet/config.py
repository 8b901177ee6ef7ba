"""Flat ``key = value`` run configuration shared by every subcommand.

A run's settings come from three layers, later ones winning: the key
defaults below, an optional config file, then command-line flags. Keys are
spelled with underscores in files and with dashes on the command line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .biasdata import GenConfig
from .errors import ConfigError
from .trainer import TrainConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


def _opt_str(s: str):
    return None if s.strip().lower() in ("", "none") else s.strip()


def _floats(s: str) -> tuple:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _ints(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _strs(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(render(x) for x in v)
    return str(v)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    help: str
    required: bool = False
    repeat: bool = False  # flag may be given several times (values accumulate)

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")

    def convert(self, raw):
        if not isinstance(raw, str):
            return raw
        try:
            return self.parse(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.name}: cannot parse {raw!r} ({exc})") from None

    def default_text(self) -> str:
        return "required" if self.required else render(self.default)


_G = GenConfig()
_T = TrainConfig()

GEN_KEYS = [
    Key("kind", str, _G.kind, "generator: colorgrid, corruptgrid or gaussian"),
    Key("n", int, 10000, "training samples"),
    Key("n_test", int, 2000, "test samples (inverted bias proportions)"),
    Key("class_count", int, _G.class_count, "number of classes"),
    Key("grid", int, _G.grid, "image side length for the grid generators"),
    Key("bias_ratio", float, _G.bias_ratio, "fraction of bias-conflicting training samples"),
    Key("noise_std", float, _G.noise_std, "feature noise standard deviation"),
    Key("jitter", int, _G.jitter, "max shape shift in pixels for the grid generators"),
]

MODEL_KEYS = [
    Key("mode", str, _T.mode, "vanilla, lffonly or cosfairnet"),
    Key("hidden", _ints, _T.hidden, "hidden layer widths"),
    Key("epochs", int, _T.epochs, "training epochs"),
    Key("batch_size", int, _T.batch_size, "minibatch size"),
    Key("optimizer", str, _T.optim.kind, "adam or sgd"),
    Key("lr", float, _T.optim.lr, "learning rate of the main updates"),
    Key("q", float, _T.loss.q, "GCE exponent of the biased model"),
    Key("lambda_c", float, _T.loss.lambda_c, "cosine constraint strength"),
    Key("constraint", str, _T.schedule.format(), "constraint schedule k:mode[,k:mode...] (0-based layers)"),
    Key("constraint_lr", _opt_float, None, "step size of the constraint update (none: same as lr)"),
    Key("weight_source", str, _T.weight_source, "difficulty weights from pre- or post-update losses"),
    Key("include_bias", _bool, _T.include_bias, "constrain layer biases together with weights"),
    Key("renormalize", _bool, _T.renormalize, "restore the layer norm after each constraint step"),
    Key("shared_init", _bool, _T.shared_init, "start both models from identical parameters"),
    Key("eval_every", int, _T.eval_every, "steps between metric rows (0: once per epoch)"),
]

SEED = Key("seed", int, 0, "random seed")
OUT = Key("out", Path, None, "output directory", required=True)

COMMAND_KEYS = {
    "gen": [*GEN_KEYS, SEED, OUT],
    "train": [
        Key("train", Path, None, "training dataset file", required=True),
        Key("test", _opt_str, None, "test dataset file (metric rows, final report)"),
        Key("val", _opt_str, None, "validation dataset file (best-snapshot selection)"),
        *MODEL_KEYS,
        Key("checkpoint_every", int, 0, "epochs between intermediate checkpoints (0: none)"),
        SEED,
        OUT,
    ],
    "eval": [
        Key("checkpoint", Path, None, "model checkpoint file", required=True),
        Key("data", Path, None, "dataset file", required=True),
        Key("export", _opt_str, None, "write layer activations to this CSV"),
        Key("layer", _opt_int, None, "layer whose output is exported (none: penultimate)"),
    ],
    "sweep": [
        Key("sweep", str, "lambda", "lambda (lambda_c x bias ratio) or layers (mode x layer set)"),
        Key("lambdas", _floats, (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7), "lambda_c rows"),
        Key("ratios", _floats, (0.005, 0.01, 0.02, 0.05), "bias ratio columns"),
        Key("layer_sets", _strs, ("1", "2", "3", "12", "13", "23", "123"), "layer set columns (1-based digits)"),
        Key("layer_modes", _strs, ("sim", "dissim"), "constraint mode rows of the layer sweep"),
        Key("metric", str, "bc", "cell value: bc, ba or unbiased test accuracy"),
        Key("seeds", _ints, (0,), "seeds averaged per cell (data and training)"),
        Key("workers", int, 0, "concurrent cells (0: one per CPU; CFN_THREADS caps it)"),
        *GEN_KEYS,
        *MODEL_KEYS,
        OUT,
    ],
    "gradcheck": [
        Key("nets", int, 100, "random networks per loss path"),
        Key("eps", float, (1e-5,), "finite-difference step; give twice for a convergence check", repeat=True),
        Key("tol", float, 1e-6, "max relative error"),
        Key("inject_sign_flip", _bool, False, "test hook: corrupt one analytic gradient entry"),
        SEED,
    ],
    "report": [
        Key("runs", _strs, None, "metrics CSV files", required=True),
        Key("labels", _strs, (), "run labels (default: file stems)"),
        Key("sweep_table", _opt_str, None, "sweep summary CSV to copy into the report"),
        OUT,
    ],
}


def keys_for(command: str) -> dict[str, Key]:
    return {k.name: k for k in COMMAND_KEYS[command]}


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def resolve(command: str, file_values: dict | None, cli_values: dict | None) -> dict:
    """Merge defaults, file values and CLI overrides; reject unknown keys."""
    keys = keys_for(command)
    merged = {name: k.default for name, k in keys.items()}
    for source in (file_values or {}, cli_values or {}):
        for name, raw in source.items():
            if raw is None:
                continue
            if name not in keys:
                raise ConfigError(f"unknown key {name!r} for '{command}'")
            k = keys[name]
            if k.repeat and isinstance(raw, list):
                merged[name] = tuple(k.convert(r) for r in raw)
            elif k.repeat and isinstance(raw, str):
                merged[name] = tuple(k.convert(r) for r in raw.split(",") if r.strip())
            else:
                merged[name] = k.convert(raw)
    missing = [n for n, k in keys.items() if k.required and merged[n] is None]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r} for '{command}'")
    return merged


def dump(values: dict) -> str:
    """Resolved configuration in the file grammar, keys sorted."""
    return "".join(f"{k} = {render(v)}\n" for k, v in sorted(values.items()))


def gen_config(values: dict, seed: int | None = None, bias_ratio: float | None = None) -> GenConfig:
    n_pool = values["n"] + values["n_test"]
    return GenConfig(
        kind=values["kind"], n=n_pool, class_count=values["class_count"], grid=values["grid"],
        bias_ratio=values["bias_ratio"] if bias_ratio is None else bias_ratio,
        noise_std=values["noise_std"], seed=values["seed"] if seed is None else seed, jitter=values["jitter"],
    )


def train_config(values: dict, seed: int | None = None, **overrides) -> TrainConfig:
    from .losses import LossConfig
    from .optim import OptimConfig
    from .trainer import ConstraintSchedule

    v = {**values, **overrides}
    return TrainConfig(
        hidden=v["hidden"], epochs=v["epochs"], batch_size=v["batch_size"], mode=v["mode"],
        seed=v["seed"] if seed is None else seed,
        optim=OptimConfig(lr=v["lr"], kind=v["optimizer"]),
        loss=LossConfig(q=v["q"], lambda_c=v["lambda_c"]),
        schedule=ConstraintSchedule.parse(v["constraint"], lr=v["constraint_lr"]),
        weight_source=v["weight_source"], include_bias=v["include_bias"], renormalize=v["renormalize"],
        shared_init=v["shared_init"], eval_every=v["eval_every"],
    )
