"""Synthetic datasets with a controllable spurious attribute.

Every sample has a target label ``y`` and a bias label; it is bias-aligned
when the two agree. ``bias_ratio`` is the fraction of bias-conflicting
samples. Three generators are provided:

* ``colorgrid``: per-class binary shape masks painted in a palette color
  chosen by the bias label (a desk-scale colored-digits analog).
* ``corruptgrid``: grayscale shape masks with a bias-selected image
  corruption (blur, brightness, stripes, ...).
* ``gaussian``: tabular features with weak class-mean signal dims plus one
  easy bias dim.
"""
from __future__ import annotations

import colorsys
import dataclasses
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from .errors import ConfigError, FormatError, InsufficientSamplesError
from .linalg import Rng

KINDS = ("colorgrid", "corruptgrid", "gaussian")
KIND_TAGS = {"colorgrid": 0, "corruptgrid": 1, "gaussian": 2, "custom": 255}
DATASET_MAGIC = b"CFN1"
DATASET_VERSION = 1
MASK_DENSITY = 0.25
SMOOTH_PASSES = 2
SIGNAL_MARGIN = 1.0
BIAS_MARGIN = 4.0

# Ten equally spaced fully saturated hues.
PALETTE = np.array([colorsys.hsv_to_rgb(i / 10.0, 1.0, 1.0) for i in range(10)], dtype=np.float64)

# stream namespaces within a seed
_MASK, _ASSIGN, _SAMPLE, _SPLIT = 1, 2, 3, 9


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class GenConfig:
    kind: str = "colorgrid"
    n: int = 1000
    class_count: int = 10
    grid: int = 14
    bias_ratio: float = 0.01
    noise_std: float = 0.1
    seed: int = 0
    id_offset: int = 0
    jitter: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {', '.join(KINDS)}, got {self.kind!r}")
        if not 0.0 <= self.bias_ratio <= 1.0:
            raise ConfigError(f"bias_ratio must lie in [0, 1], got {self.bias_ratio}")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.kind == "colorgrid" and self.class_count > len(PALETTE):
            raise ConfigError(f"colorgrid supports at most {len(PALETTE)} classes")
        if self.kind == "corruptgrid" and self.class_count > len(CORRUPTIONS):
            raise ConfigError(f"corruptgrid supports at most {len(CORRUPTIONS)} classes")
        if self.n < self.class_count:
            raise ConfigError(f"n must be >= class_count ({self.class_count}), got {self.n}")
        if self.grid < 3:
            raise ConfigError("grid must be >= 3")
        if self.jitter < 0 or 2 * self.jitter >= self.grid:
            raise ConfigError("jitter must lie in [0, grid/2)")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    @property
    def input_dim(self) -> int:
        if self.kind == "colorgrid":
            return 3 * self.grid * self.grid
        if self.kind == "corruptgrid":
            return self.grid * self.grid
        return self.class_count + 1


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int
    bias: int
    aligned: bool


@dataclass
class BiasedDataset:
    x: np.ndarray  # (n, input_dim) float32
    y: np.ndarray
    bias: np.ndarray
    class_count: int
    bias_ratio: float
    kind: str = "custom"
    ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    gen_config: GenConfig | None = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        if self.x.ndim != 2:
            raise ConfigError("features must be a 2-D array")
        self.y = np.asarray(self.y, dtype=np.int64)
        self.bias = np.asarray(self.bias, dtype=np.int64)
        n = len(self.x)
        if self.y.shape != (n,) or self.bias.shape != (n,):
            raise ConfigError("labels must have one entry per sample")
        for name, arr in (("y", self.y), ("bias", self.bias)):
            if n and (arr.min() < 0 or arr.max() >= self.class_count):
                raise ConfigError(f"{name} labels out of range [0, {self.class_count})")
        # the file stores the ratio as f32; keep the in-memory value identical
        self.bias_ratio = float(np.float32(self.bias_ratio))
        self.ids = np.arange(n, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)

    @property
    def aligned(self) -> np.ndarray:
        return self.y == self.bias

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], int(self.y[i]), int(self.bias[i]), bool(self.y[i] == self.bias[i]))

    @property
    def conflicting_count(self) -> int:
        return int((~self.aligned).sum())

    def subset(self, idx, bias_ratio: float | None = None) -> "BiasedDataset":
        idx = np.asarray(idx, dtype=np.intp)
        ratio = self.bias_ratio if bias_ratio is None else bias_ratio
        return BiasedDataset(
            self.x[idx], self.y[idx], self.bias[idx], self.class_count, ratio,
            kind=self.kind, ids=self.ids[idx], meta=dict(self.meta), gen_config=self.gen_config,
        )

    def equals(self, other: "BiasedDataset") -> bool:
        """Equality over everything the file format stores."""
        return (
            self.class_count == other.class_count
            and self.kind == other.kind
            and self.bias_ratio == other.bias_ratio
            and self.x.shape == other.x.shape
            and self.x.tobytes() == other.x.tobytes()
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.bias, other.bias)
        )


# ---------------------------------------------------------------- generators

def shape_mask(seed: int, c: int, grid: int) -> np.ndarray:
    """Blob-shaped binary mask for class c with exactly round(0.25 * grid^2) pixels.

    A seeded noise field is smoothed (periodic 3x3 box filter, applied
    twice) and its top quarter kept, so masks stay spatially coherent and
    recognisable under one-pixel jitter.
    """
    rng = Rng((seed, _MASK), c)
    field_ = rng.normal(grid * grid).reshape(grid, grid)
    for _ in range(SMOOTH_PASSES):
        field_ = sum(np.roll(field_, (i, j), axis=(0, 1)) for i in (-1, 0, 1) for j in (-1, 0, 1)) / 9.0
    count = round_half_up(MASK_DENSITY * grid * grid)
    mask = np.zeros(grid * grid, dtype=bool)
    mask[np.argsort(-field_.ravel(), kind="stable")[:count]] = True
    return mask.reshape(grid, grid)


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    g = img.shape[0]
    return sum(padded[i : i + g, j : j + g] for i in range(3) for j in range(3)) / 9.0


def _pattern(g: int, fn) -> np.ndarray:
    r, c = np.mgrid[0:g, 0:g]
    return fn(r, c).astype(np.float64)


CORRUPTIONS = (
    lambda im: im + 0.5,  # brighten
    lambda im: 0.3 * im,  # darken
    _box_blur,
    lambda im: im + 0.5 * _pattern(im.shape[0], lambda r, c: r % 2 == 0),  # horizontal stripes
    lambda im: im + 0.5 * _pattern(im.shape[0], lambda r, c: c % 2 == 0),  # vertical stripes
    lambda im: im + 0.5 * _pattern(im.shape[0], lambda r, c: (r + c) % 2 == 0),  # checkerboard
    lambda im: 1.0 - im,  # invert
    lambda im: im + 0.5 * _pattern(im.shape[0], lambda r, c: (r + c) % 4 == 0),  # diagonal stripes
    lambda im: _box_blur(im) + 0.25,
    lambda im: im + 0.5 * _pattern(im.shape[0], lambda r, c: r % 4 < 2),  # wide stripes
)


def gaussian_bayes_rate(class_count: int, margin: float, noise_std: float) -> float:
    """Bayes accuracy of the signal dims alone.

    Class c has mean ``margin * e_c`` and isotropic noise, so the optimal rule
    is argmax over coordinates and P(correct) is a one-dimensional integral.
    """
    if noise_std == 0:
        return 1.0
    d = margin / noise_std
    f = lambda t: stats.norm.pdf(t) * stats.norm.cdf(t + d) ** (class_count - 1)  # noqa: E731
    val, _ = integrate.quad(f, -np.inf, np.inf)
    return float(val)


def _assign_labels(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced targets with the conflicting set spread evenly over classes."""
    n, C = cfg.n, cfg.class_count
    n_bc = round_half_up(n * cfg.bias_ratio)
    rng = Rng((cfg.seed, _ASSIGN, cfg.id_offset))
    order = rng.permutation(n)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    y = rank % C
    conflicting = rank < n_bc
    shift = rng.integers(1, C, n)
    bias = np.where(conflicting, (y + shift) % C, y)
    return y, bias


def _features(cfg: GenConfig, ids: np.ndarray, y: np.ndarray, bias: np.ndarray) -> tuple[np.ndarray, dict]:
    g, C = cfg.grid, cfg.class_count
    x = np.empty((len(ids), cfg.input_dim), dtype=np.float32)
    meta: dict = {}
    if cfg.kind in ("colorgrid", "corruptgrid"):
        masks = [shape_mask(cfg.seed, c, g).astype(np.float64) for c in range(C)]
    for row, (sid, yi, bi) in enumerate(zip(ids, y, bias)):
        rng = Rng((cfg.seed, _SAMPLE), int(sid))
        if cfg.kind == "gaussian":
            v = rng.normal(C + 1, 0.0, cfg.noise_std)
            v[yi] += SIGNAL_MARGIN
            v[C] += BIAS_MARGIN * (bi - (C - 1) / 2.0)
        else:
            dr, dc = rng.integers(-cfg.jitter, cfg.jitter + 1, 2)
            shape = np.roll(masks[yi], (int(dr), int(dc)), axis=(0, 1))
            if cfg.kind == "colorgrid":
                img = PALETTE[bi][:, None, None] * shape[None, :, :]
            else:
                img = CORRUPTIONS[bi](shape)[None, :, :]
            # one noise field shared by all channels: it masks the shape but
            # cancels in channel differences, so color stays the easy cue
            noise = rng.normal(g * g, 0.0, cfg.noise_std)
            v = (img + noise.reshape(1, g, g)).ravel()
        x[row] = v
    if cfg.kind == "gaussian":
        meta["bayes_rate"] = gaussian_bayes_rate(C, SIGNAL_MARGIN, cfg.noise_std)
    return x, meta


def generate(cfg: GenConfig) -> BiasedDataset:
    y, bias = _assign_labels(cfg)
    ids = cfg.id_offset + np.arange(cfg.n, dtype=np.int64)
    x, meta = _features(cfg, ids, y, bias)
    return BiasedDataset(x, y, bias, cfg.class_count, cfg.bias_ratio, kind=cfg.kind, ids=ids, meta=meta, gen_config=cfg)


# ------------------------------------------------------------------ splitting

def _stratified_order(idx: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Interleave classes so any prefix is class-balanced within one sample."""
    labels = y[idx]
    within = np.empty(len(idx), dtype=np.int64)
    for c in np.unique(labels):
        pos = np.flatnonzero(labels == c)
        within[pos] = np.arange(len(pos))
    return idx[np.lexsort((labels, within))]


def split_protocol(ds: BiasedDataset, rng: Rng, test_fraction: float) -> tuple[BiasedDataset, BiasedDataset]:
    """Train split at the dataset's ratio, test split at the mirrored ratio.

    With a training conflicting fraction r the test split holds a fraction
    1 - r of conflicting samples. Test samples are drawn from the pool when
    it has enough of both groups; otherwise they are regenerated from the
    dataset's generator config with fresh sample ids.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(ds)
    n_test = round_half_up(n * test_fraction)
    n_train = n - n_test
    if n_test < 1 or n_train < 1:
        raise InsufficientSamplesError(f"{n} samples cannot be split with test_fraction={test_fraction}")
    r = ds.bias_ratio
    train_bc = round_half_up(n_train * r)
    test_bc = round_half_up(n_test * (1.0 - r))
    train_ba, test_ba = n_train - train_bc, n_test - test_bc

    perm = rng.permutation(n)
    aligned = ds.aligned[perm]
    bc = _stratified_order(perm[~aligned], ds.y)
    ba = _stratified_order(perm[aligned], ds.y)
    if len(bc) < train_bc or len(ba) < train_ba:
        raise InsufficientSamplesError(
            f"training split needs {train_ba} aligned / {train_bc} conflicting samples, "
            f"pool has {len(ba)} / {len(bc)}"
        )
    train = ds.subset(np.concatenate([ba[:train_ba], bc[:train_bc]]), r)
    if len(bc) >= train_bc + test_bc and len(ba) >= train_ba + test_ba:
        test_idx = np.concatenate([ba[train_ba : train_ba + test_ba], bc[train_bc : train_bc + test_bc]])
        return train, ds.subset(test_idx, 1.0 - r)
    if ds.gen_config is None:
        raise InsufficientSamplesError(
            f"test split needs {test_ba} aligned / {test_bc} conflicting samples beyond the training split "
            "and the dataset has no generator config to regenerate from"
        )
    test_cfg = dataclasses.replace(
        ds.gen_config, n=n_test, bias_ratio=1.0 - r, id_offset=int(ds.ids.max()) + 1
    )
    return train, generate(test_cfg)


def make_protocol(cfg: GenConfig, n_test: int) -> tuple[BiasedDataset, BiasedDataset]:
    """Generate a pool of ``cfg.n`` samples and split off an inverted test set of ``n_test``.

    The split permutation uses its own stream of ``cfg.seed`` so the pair is a
    pure function of the config.
    """
    if not 0 < n_test < cfg.n:
        raise ConfigError(f"n_test must lie in (0, {cfg.n}), got {n_test}")
    return split_protocol(generate(cfg), Rng(cfg.seed, _SPLIT), n_test / cfg.n)


# ----------------------------------------------------------------- diagnostics

def conditional_entropy(ds: BiasedDataset) -> float:
    """Empirical H(y | bias) in nats, with 0 ln 0 taken as 0."""
    if len(ds) == 0:
        raise ValueError("conditional entropy of an empty dataset")
    C = ds.class_count
    table = np.bincount(ds.bias * C + ds.y, minlength=C * C).reshape(C, C).astype(np.float64)
    n = table.sum()
    h = 0.0
    for row in table:
        na = row.sum()
        if na == 0:
            continue
        p = row[row > 0] / na
        h -= (na / n) * float(np.sum(p * np.log(p)))
    return h


# ------------------------------------------------------------- serialization

_HEADER = struct.Struct("<4sIIIHBf")


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("x", "<f4", (d,)), ("y", "<u2"), ("bias", "<u2"), ("aligned", "u1")])


def save_dataset(ds: BiasedDataset, path) -> None:
    if len(ds) == 0:
        raise ValueError("refusing to save a dataset with no samples")
    if ds.class_count > 0xFFFF:
        raise ValueError("class_count does not fit the file format")
    rec = np.empty(len(ds), dtype=_record_dtype(ds.input_dim))
    rec["x"] = ds.x
    rec["y"] = ds.y
    rec["bias"] = ds.bias
    rec["aligned"] = ds.aligned
    tag = KIND_TAGS.get(ds.kind, KIND_TAGS["custom"])
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(ds), ds.input_dim, ds.class_count, tag, ds.bias_ratio)
    Path(path).write_bytes(header + rec.tobytes())


def load_dataset(path) -> BiasedDataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, n, d, C, tag, ratio = _HEADER.unpack_from(buf)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    dt = _record_dtype(d)
    if len(buf) != _HEADER.size + n * dt.itemsize:
        raise FormatError(f"{path}: expected {n} records of {dt.itemsize} bytes, file size does not match")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=_HEADER.size)
    kind = {v: k for k, v in KIND_TAGS.items()}.get(tag, "custom")
    ds = BiasedDataset(rec["x"].copy(), rec["y"].astype(np.int64), rec["bias"].astype(np.int64), C, ratio, kind=kind)
    if not np.array_equal(ds.aligned, rec["aligned"].astype(bool)):
        raise FormatError(f"{path}: aligned flags disagree with labels")
    return ds
