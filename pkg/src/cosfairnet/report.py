"""Group-wise evaluation, metrics persistence, feature export and SVG charts."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .biasdata import BiasedDataset
from .errors import FormatError, ShapeError
from .model import MlpModel, activations, predict_logits

METRICS_HEADER = ["epoch", "step", "loss_b", "loss_d", "loss_constraint", "mean_w", "acc_unbiased", "acc_ba", "acc_bc"]


@dataclass(frozen=True)
class GroupAccuracy:
    acc_ba: float | None
    acc_bc: float | None
    acc_unbiased: float | None
    n_ba: int
    n_bc: int

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("acc_unbiased", "acc_ba", "acc_bc", "n_ba", "n_bc")}


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    step: int
    loss_b: float
    loss_d: float
    loss_constraint: float
    mean_w: float
    acc_unbiased: float | None
    acc_ba: float | None
    acc_bc: float | None


def predict(model: MlpModel, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(predict_logits(model, np.asarray(x, dtype=np.float64)), axis=1)


def group_accuracy(pred, ds: BiasedDataset) -> GroupAccuracy:
    correct = np.asarray(pred) == ds.y
    aligned = ds.aligned
    n_ba, n_bc = int(aligned.sum()), int((~aligned).sum())
    acc = lambda mask, n: float(correct[mask].sum()) / n if n else None  # noqa: E731
    return GroupAccuracy(acc(aligned, n_ba), acc(~aligned, n_bc), acc(slice(None), len(ds)), n_ba, n_bc)


def accuracy_by_group(model: MlpModel, ds: BiasedDataset) -> GroupAccuracy:
    """Accuracy on aligned, conflicting and pooled samples.

    An empty group reports ``None`` rather than zero.
    """
    if len(ds) and ds.input_dim != model.input_dim:
        raise ShapeError(f"dataset has {ds.input_dim} features, model expects {model.input_dim}")
    return group_accuracy(predict(model, ds.x), ds)


def export_features(model: MlpModel, ds: BiasedDataset, k: int, path) -> None:
    """CSV of layer-k post-activations, one row per sample."""
    feats = activations(model, np.asarray(ds.x, dtype=np.float64), k)
    width = model.layers[k].out_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "y", "bias", "aligned"] + [f"f_{i}" for i in range(width)])
        for i in range(len(ds)):
            w.writerow([int(ds.ids[i]), int(ds.y[i]), int(ds.bias[i]), int(ds.y[i] == ds.bias[i])]
                       + [_fmt(v) for v in feats[i]])


def _fmt(v) -> str:
    if v is None:
        return "nan"
    return f"{float(v):.6g}"


def metrics_csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.epoch, r.step] + [_fmt(getattr(r, k)) for k in METRICS_HEADER[2:]])
    return buf.getvalue()


def write_metrics_csv(rows, path) -> None:
    Path(path).write_text(metrics_csv_text(rows), newline="\n")


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise FormatError(f"{path}: unexpected metrics header {header}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            try:
                vals = [None if v == "nan" else float(v) for v in rec[2:]]
                rows.append(MetricsRow(int(rec[0]), int(rec[1]), *vals))
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: malformed metrics row") from None
    return rows


# ---------------------------------------------------------------------- SVG

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]
_W, _H, _PAD = 640, 400, 50


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _svg(body: list[str], title: str) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        y = _H - _PAD - frac * (_H - 2 * _PAD)
        head.append(f'<text x="{_PAD - 6}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{frac:.1f}</text>')
    return "\n".join(head + body + ["</svg>"]) + "\n"


def accuracy_curve_svg(histories, labels) -> str:
    """Line chart of pooled accuracy against training step, one polyline per run."""
    steps = [r.step for h in histories for r in h]
    x_max = max(steps) if steps else 1
    x_min = min(steps) if steps else 0
    span = max(x_max - x_min, 1)
    body = []
    for i, (hist, label) in enumerate(zip(histories, labels)):
        pts = [
            (_PAD + (r.step - x_min) / span * (_W - 2 * _PAD), _H - _PAD - (r.acc_unbiased or 0.0) * (_H - 2 * _PAD))
            for r in hist
        ]
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        body.append(f'<text x="{_W - _PAD + 4}" y="{_PAD + 14 * i}" font-family="sans-serif" font-size="10" fill="{color}">{_esc(label)}</text>')
    body.append(f'<text x="{_W / 2:.1f}" y="{_H - 12}" text-anchor="middle" font-family="sans-serif" font-size="11">step</text>')
    return _svg(body, "unbiased accuracy vs training step")


def group_bars_svg(histories, labels) -> str:
    """Grouped bars of the final BA / BC / unbiased accuracy of each run."""
    keys = ("acc_ba", "acc_bc", "acc_unbiased")
    names = ("BA", "BC", "unbiased")
    n = max(len(histories), 1)
    slot = (_W - 2 * _PAD) / n
    bar = slot / (len(keys) + 1)
    body = []
    for i, (hist, label) in enumerate(zip(histories, labels)):
        last = hist[-1] if hist else None
        for j, key in enumerate(keys):
            v = getattr(last, key) if last is not None else None
            v = 0.0 if v is None or math.isnan(v) else v
            h = v * (_H - 2 * _PAD)
            x = _PAD + i * slot + (j + 0.5) * bar
            body.append(
                f'<rect x="{x:.2f}" y="{_H - _PAD - h:.2f}" width="{bar:.2f}" height="{h:.2f}" fill="{_COLORS[j]}">'
                f"<title>{_esc(label)} {names[j]} {v:.4f}</title></rect>"
            )
        body.append(
            f'<text x="{_PAD + (i + 0.5) * slot:.2f}" y="{_H - _PAD + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{_esc(label)}</text>'
        )
    for j, name in enumerate(names):
        body.append(f'<text x="{_W - _PAD + 4}" y="{_PAD + 14 * j}" font-family="sans-serif" font-size="10" fill="{_COLORS[j]}">{name}</text>')
    return _svg(body, "accuracy by group")


# ------------------------------------------------------------- sweep tables

def sweep_table_text(row_labels, col_labels, cells, corner: str = "lambda_c") -> str:
    """CSV with one row per ``row_labels`` entry; failed cells print as ``failed``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([corner] + [str(c) for c in col_labels])
    for label, row in zip(row_labels, cells):
        w.writerow([str(label)] + ["failed" if v is None else _fmt(v) for v in row])
    return buf.getvalue()


def emit_report(histories, labels, out_dir, sweep=None) -> list[Path]:
    """Write per-run metrics CSVs, the two charts and, if given, a sweep table.

    ``sweep`` is a ``(row_labels, col_labels, cells)`` triple, optionally with
    a fourth element naming the corner cell.
    """
    if not histories:
        raise ValueError("emit_report needs at least one run history")
    if len(labels) != len(histories):
        raise ValueError("one label per history is required")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for hist, label in zip(histories, labels):
        p = out / f"metrics_{_slug(label)}.csv"
        write_metrics_csv(hist, p)
        written.append(p)
    for name, text in (
        ("accuracy_vs_step.svg", accuracy_curve_svg(histories, labels)),
        ("group_accuracy.svg", group_bars_svg(histories, labels)),
    ):
        (out / name).write_text(text, newline="\n")
        written.append(out / name)
    if sweep is not None:
        (out / "sweep_summary.csv").write_text(sweep_table_text(*sweep), newline="\n")
        written.append(out / "sweep_summary.csv")
    return written


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in str(label))
