"""Command-line entry point: gen, train, eval, sweep, gradcheck, report.

Exit codes: 0 ok, 2 configuration error, 3 I/O or file-format error,
4 training divergence, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as C
from .biasdata import conditional_entropy, load_dataset, make_protocol, save_dataset
from .errors import ConfigError, DivergenceError, FormatError, InsufficientSamplesError, ShapeError, TrainingError
from .gradcheck import convergence_order, run_suite
from .model import load_checkpoint, save_checkpoint
from .report import accuracy_by_group, emit_report, export_features, read_metrics_csv, sweep_table_text, write_metrics_csv
from .trainer import train

log = logging.getLogger("cosfairnet")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4, 5
ORDER_SLACK = 0.25  # accepted |observed order - 2| for the two-step convergence check

_DESCRIPTIONS = {
    "gen": "Generate a biased training set and its inverted test set.",
    "train": "Train a vanilla, LfF-only or CosFairNet model.",
    "eval": "Group-wise accuracy of a checkpoint on a dataset.",
    "sweep": "Grid of training runs summarised in one table.",
    "gradcheck": "Finite-difference certification of every loss path.",
    "report": "Charts and tables from saved metrics CSVs.",
}


class GradcheckFailure(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    fmt = lambda prog: argparse.HelpFormatter(prog, width=100, max_help_position=34)  # noqa: E731
    parser = argparse.ArgumentParser(prog="cosfairnet", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, keys in C.COMMAND_KEYS.items():
        p = sub.add_parser(name, help=_DESCRIPTIONS[name], description=_DESCRIPTIONS[name], formatter_class=fmt)
        p.add_argument("--config", metavar="FILE", help="flat key = value file; flags override it")
        for k in keys:
            p.add_argument(k.flag, dest=k.name, metavar=k.name.upper(), default=None,
                           action="append" if k.repeat else "store",
                           help=f"{k.help} (default: {k.default_text()})")
    return parser


def resolve_args(args: argparse.Namespace) -> dict:
    file_values = C.read_config_file(args.config) if args.config else None
    cli = {name: getattr(args, name) for name in C.keys_for(args.command)}
    return C.resolve(args.command, file_values, cli)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _ga_line(tag: str, ga) -> str:
    def f(v):
        return "undefined" if v is None else f"{v:.4f}"

    return (f"{tag}: acc_unbiased={f(ga.acc_unbiased)} acc_ba={f(ga.acc_ba)} acc_bc={f(ga.acc_bc)} "
            f"(n_ba={ga.n_ba}, n_bc={ga.n_bc})")


# ------------------------------------------------------------------ commands

def cmd_gen(v: dict) -> int:
    cfg = C.gen_config(v)
    train_ds, test_ds = make_protocol(cfg, v["n_test"])
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train_ds, out / "train.cfn1")
    save_dataset(test_ds, out / "test.cfn1")
    prov = {
        "command": "gen",
        "config": {k: C.render(x) for k, x in sorted(v.items())},
        "seed": v["seed"],
        "conditional_entropy_nats": {"train": conditional_entropy(train_ds), "test": conditional_entropy(test_ds)},
        "counts": {
            "train": {"n": len(train_ds), "conflicting": train_ds.conflicting_count},
            "test": {"n": len(test_ds), "conflicting": test_ds.conflicting_count},
        },
    }
    _write_text(out / "provenance.json", json.dumps(prov, indent=2, sort_keys=True) + "\n")
    _write_text(out / "resolved.cfg", C.dump(v))
    print(f"wrote {out / 'train.cfn1'} ({len(train_ds)} samples, H(y|b)={prov['conditional_entropy_nats']['train']:.4f} nats)")
    print(f"wrote {out / 'test.cfn1'} ({len(test_ds)} samples, H(y|b)={prov['conditional_entropy_nats']['test']:.4f} nats)")
    return EXIT_OK


def _load_optional(path):
    return load_dataset(path) if path else None


def cmd_train(v: dict) -> int:
    cfg = C.train_config(v)
    train_ds = load_dataset(v["train"])
    test_ds, val_ds = _load_optional(v["test"]), _load_optional(v["val"])
    cfg.schedule.resolve(len(cfg.hidden) + 1, cfg.loss.lambda_c)
    if v["checkpoint_every"] < 0:
        raise ConfigError("checkpoint_every must be >= 0")
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "resolved.cfg", C.dump(v))
    res = train(cfg, train_ds, val_ds, test_ds,
                checkpoint_dir=out / "checkpoints" if v["checkpoint_every"] else None,
                checkpoint_every=v["checkpoint_every"])
    write_metrics_csv(res.history, out / "metrics.csv")
    save_checkpoint(res.f_d, out / "f_d_final.cfnm")
    save_checkpoint(res.best_f_d, out / "f_d_best.cfnm")
    if res.f_b is not None:
        save_checkpoint(res.f_b, out / "f_b_final.cfnm")
    summary = {"best_epoch": res.best_epoch, "best_val_acc": res.best_val_acc}
    if res.final_eval is not None:
        summary["final"] = res.final_eval.as_dict()
        summary["best"] = res.best_eval.as_dict()
        print(_ga_line("final", res.final_eval))
        print(_ga_line(f"best (epoch {res.best_epoch})", res.best_eval))
    _write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_eval(v: dict) -> int:
    model = load_checkpoint(v["checkpoint"])
    ds = load_dataset(v["data"])
    if ds.input_dim != model.input_dim or ds.class_count != model.class_count:
        raise ConfigError(f"checkpoint expects ({model.input_dim}, {model.class_count}) "
                          f"but dataset is ({ds.input_dim}, {ds.class_count})")
    layer = v["layer"] if v["layer"] is not None else max(len(model) - 2, 0)
    if not 0 <= layer < len(model):
        raise ConfigError(f"layer must lie in [0, {len(model)}), got {layer}")
    print(_ga_line("eval", accuracy_by_group(model, ds)))
    if v["export"]:
        export_features(model, ds, layer, v["export"])
        print(f"wrote {v['export']}")
    return EXIT_OK


def _layer_schedule(layer_set: str, mode: str, n_layers: int) -> str:
    """'13' with 'sim' -> '0:sim,2:sim' (layer labels are 1-based)."""
    if not layer_set.isdigit():
        raise ConfigError(f"layer set {layer_set!r} must be a string of 1-based layer digits")
    for d in layer_set:
        if not 1 <= int(d) <= n_layers:
            raise ConfigError(f"layer set {layer_set!r} names layer {d} of a {n_layers}-layer model")
    return ",".join(f"{int(d) - 1}:{mode}" for d in layer_set)


def sweep_cells(v: dict) -> tuple[list, list, list[dict], str]:
    """Row labels, column labels and one override dict per cell (row-major)."""
    if v["sweep"] == "lambda":
        rows, cols = list(v["lambdas"]), list(v["ratios"])
        cells = [{"lambda_c": lam, "bias_ratio": r} for lam in rows for r in cols]
        return rows, cols, cells, "lambda_c"
    if v["sweep"] == "layers":
        n_layers = len(v["hidden"]) + 1
        rows, cols = list(v["layer_modes"]), list(v["layer_sets"])
        cells = [{"constraint": _layer_schedule(s, m, n_layers)} for m in rows for s in cols]
        return rows, cols, cells, "mode"
    raise ConfigError(f"sweep must be 'lambda' or 'layers', got {v['sweep']!r}")


def run_cell(values: dict, out_dir: str | None = None) -> dict:
    """Mean test accuracy over ``values['seeds']``; never raises."""
    try:
        accs = []
        for seed in values["seeds"]:
            train_ds, test_ds = make_protocol(C.gen_config(values, seed=seed), values["n_test"])
            res = train(C.train_config(values, seed=seed), train_ds, None, test_ds)
            ga = res.final_eval
            acc = {"bc": ga.acc_bc, "ba": ga.acc_ba, "unbiased": ga.acc_unbiased}[values["metric"]]
            if acc is None:
                raise ValueError(f"metric {values['metric']} undefined for seed {seed}")
            accs.append(acc)
            if out_dir is not None:
                d = Path(out_dir) / f"seed{seed}"
                d.mkdir(parents=True, exist_ok=True)
                write_metrics_csv(res.history, d / "metrics.csv")
        return {"value": sum(accs) / len(accs), "per_seed": accs, "error": None}
    except Exception as exc:  # partial-failure policy: the cell is marked, the sweep goes on
        return {"value": None, "per_seed": [], "error": f"{type(exc).__name__}: {exc}"}


def pool_size(requested: int, n_cells: int) -> int:
    n = requested if requested > 0 else (os.cpu_count() or 1)
    cap = os.environ.get("CFN_THREADS")
    if cap:
        try:
            cap_n = int(cap)
        except ValueError:
            raise ConfigError(f"CFN_THREADS must be a positive integer, got {cap!r}") from None
        if cap_n < 1:
            raise ConfigError(f"CFN_THREADS must be a positive integer, got {cap!r}")
        n = min(n, cap_n)
    return max(1, min(n, n_cells))


def cmd_sweep(v: dict) -> int:
    if v["metric"] not in ("bc", "ba", "unbiased"):
        raise ConfigError(f"metric must be bc, ba or unbiased, got {v['metric']!r}")
    if v["workers"] < 0:
        raise ConfigError("workers must be >= 0")
    if not v["seeds"]:
        raise ConfigError("seeds must name at least one seed")
    rows, cols, overrides, corner = sweep_cells(v)
    # validate every cell's configs before anything is written
    for o in overrides:
        cell = {**v, **o}
        C.gen_config(cell, seed=v["seeds"][0])
        cfg = C.train_config(cell, seed=v["seeds"][0])
        cfg.schedule.resolve(len(cfg.hidden) + 1, cfg.loss.lambda_c)
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "resolved.cfg", C.dump(v))
    dirs = [str(out / "cells" / f"r{i // len(cols)}_c{i % len(cols)}") for i in range(len(overrides))]
    jobs = [{**v, **o} for o in overrides]
    workers = pool_size(v["workers"], len(jobs))
    if workers == 1:
        results = [run_cell(j, d) for j, d in zip(jobs, dirs)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_cell, jobs, dirs))  # map keeps grid order
    grid = [[results[i * len(cols) + j]["value"] for j in range(len(cols))] for i in range(len(rows))]
    table = sweep_table_text(rows, cols, grid, corner)
    _write_text(out / "sweep_summary.csv", table)
    detail = [{"row": rows[i // len(cols)], "col": cols[i % len(cols)], **o, **r}
              for i, (o, r) in enumerate(zip(overrides, results))]
    _write_text(out / "sweep_cells.json", json.dumps(detail, indent=2) + "\n")
    sys.stdout.write(table)
    failed = [d for d in detail if d["error"]]
    for d in failed:
        log.warning("cell %s/%s failed: %s", d["row"], d["col"], d["error"])
    return EXIT_OK


def cmd_gradcheck(v: dict) -> int:
    eps_list = sorted(set(v["eps"]), reverse=True)
    if any(not e > 0 for e in eps_list):
        raise ConfigError("eps must be > 0")
    if v["nets"] < 1:
        raise ConfigError("nets must be >= 1")
    reports = {}
    for eps in eps_list:
        reports[eps] = run_suite(v["nets"], v["seed"], eps, v["tol"], inject_sign_flip=v["inject_sign_flip"])
        for path, rep in reports[eps].items():
            print(f"eps={eps:g} {path:12s} {rep.describe()}")
    fine = reports[eps_list[-1]]
    ok = all(rep.passed for rep in fine.values())
    if len(eps_list) > 1:
        coarse = reports[eps_list[0]]
        for path in fine:
            p = convergence_order(coarse[path].max_abs_error, fine[path].max_abs_error, eps_list[0], eps_list[-1])
            consistent = abs(p - 2.0) <= ORDER_SLACK
            ok = ok and consistent
            print(f"order {path:12s} {p:.3f} ({'consistent with' if consistent else 'NOT'} O(eps^2))")
    if not ok:
        raise GradcheckFailure("gradient check failed")
    print("gradcheck passed")
    return EXIT_OK


def _read_sweep_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2:
        raise FormatError(f"{path}: not a sweep summary table")
    header, body = rows[0], rows[1:]
    cells = [[None if c == "failed" else float(c) for c in r[1:]] for r in body]
    return [r[0] for r in body], header[1:], cells, header[0]


def cmd_report(v: dict) -> int:
    runs = list(v["runs"])
    labels = list(v["labels"]) or [Path(r).stem if Path(r).stem != "metrics" else Path(r).parent.name for r in runs]
    if len(labels) != len(runs):
        raise ConfigError(f"labels has {len(labels)} entries for {len(runs)} runs")
    if len(set(labels)) != len(labels):
        raise ConfigError("run labels must be unique")
    histories = [read_metrics_csv(r) for r in runs]
    sweep = _read_sweep_table(v["sweep_table"]) if v["sweep_table"] else None
    for p in emit_report(histories, labels, v["out"], sweep):
        print(f"wrote {p}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "gradcheck": cmd_gradcheck, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](resolve_args(args))
    except (ConfigError, InsufficientSamplesError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, TrainingError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except GradcheckFailure as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_GRADCHECK


if __name__ == "__main__":
    sys.exit(main())
