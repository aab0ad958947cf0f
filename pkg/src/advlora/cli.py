"""Command-line entry point.

    advlora train  --config run.json [--seed S] [--train.tau 10 ...]
    advlora eval   --config run.json --checkpoint out/run/checkpoint.json
    advlora attack --config run.json --checkpoint out/run/checkpoint.json
    advlora sweep  --config sweep.json [--jobs N]
    advlora theory --config theory.json
    advlora data gen --config run.json

Every command writes into ``<output.dir>/<output.name>/`` and drops the fully
resolved configuration there as ``config.resolved.json``.

Exit codes: 0 ok, 2 configuration or input error, 3 numerical abort,
4 theory check failed.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import sys
from dataclasses import replace
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import experiments as ex
from .data import Dataset, save_csv, save_metadata
from .errors import ConfigurationError, DataFormatError, InsufficientDataError, NumericalAbort
from .evaluation import emit_report, evaluate, report_row, write_curves_svg
from .attack import attack_inputs
from .model import Batch, load_checkpoint, save_checkpoint
from .theory import run_bench
from .trainer import train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_THEORY = 4

# Short sweep axis names; any dotted config key is accepted as well.
AXIS_ALIASES = {
    "shots": "data.shots",
    "tau": "train.tau",
    "rank": "model.rank",
    "placement": "model.placement.which_layers",
    "eps": "train.eps",
    "attack_eps": "attack.eps",
    "lr": "train.lr",
}


class UsageError(Exception):
    pass


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration (defaults if omitted)")
    common.add_argument("--seed", type=int, metavar="S", help="set model, train, few-shot and attack seeds")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes for sweep")

    p = argparse.ArgumentParser(prog="advlora", description="Adversarial low-rank adapter fine-tuning.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train adapters")
    for name, text in (("eval", "evaluate a checkpoint"), ("attack", "write adversarial test inputs as CSV")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sub.add_parser("sweep", parents=[common], help="train and evaluate a grid of settings")
    sub.add_parser("theory", parents=[common], help="run the numerical checks on the quadratic game")
    data = sub.add_parser("data", help="dataset utilities")
    dsub = data.add_subparsers(dest="data_command", required=True)
    dsub.add_parser("gen", parents=[common], help="write synthetic blobs to CSV")
    return p


def _parse_overrides(tokens):
    """``--a.b 3`` / ``--a.b=3`` pairs, values parsed as JSON when possible."""
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or "." not in tok:
            raise UsageError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, text = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise UsageError(f"override {tok} needs a value")
            i += 1
            text = tokens[i]
        out.append((key, config_mod.parse_value(text)))
        i += 1
    return out


def _resolve(args, overrides) -> dict:
    if args.config:
        cfg = config_mod.load(args.config)
    else:
        cfg = config_mod.resolve({})
    for key, value in overrides:
        cfg = config_mod.apply_override(cfg, key, value)
    if args.seed is not None:
        cfg = ex.with_seed(cfg, args.seed)
    return cfg


def _out_dir(cfg) -> Path:
    d = Path(cfg["output"]["dir"]) / cfg["output"]["name"]
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_config(cfg, out: Path):
    (out / "config.resolved.json").write_text(config_mod.dump(cfg))


def _tau_label(cfg):
    return cfg["train"]["tau"] if cfg["train"]["adversarial"] else None


def _row(cfg, metrics, name=None):
    pl = ex.placement_of(cfg).to_json()["which_layers"]
    return report_row(
        name or cfg["output"]["name"],
        cfg["data"]["shots"],
        _tau_label(cfg),
        cfg["model"]["rank"],
        pl if isinstance(pl, str) else "-".join(str(i) for i in pl),
        metrics.clean_acc,
        metrics.robust_acc,
        1,
    )


def _write_reports(cfg, rows, out: Path):
    for fmt in cfg["output"]["formats"]:
        emit_report(rows, out / f"report.{fmt}", fmt)


# -- commands ------------------------------------------------------------------

def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    _write_config(cfg, out)
    pool, _ = ex.load_datasets(cfg)
    model = ex.make_model(cfg, pool)
    try:
        trained, history = train(model, ex.support_set(cfg, pool), ex.train_config(cfg))
    except NumericalAbort as exc:
        if exc.partial is not None:
            exc.partial.to_csv(out / "history.csv")
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    save_checkpoint(trained, out / "checkpoint.json")
    history.to_csv(out / "history.csv")
    last = history.records[-1]
    print(f"trained {len(history)} iterations, final loss {last['loss']:.4f} -> {out}")
    return EXIT_OK


def _load_for_eval(cfg, checkpoint):
    path = Path(checkpoint)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    try:
        model = load_checkpoint(path)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from None
    _, test = ex.load_datasets(cfg)
    if model.input_dim != test.dim or model.num_classes != test.num_classes:
        raise ConfigurationError(
            f"checkpoint expects inputs of shape (*, {model.input_dim}) with {model.num_classes} classes; "
            f"data has shape {tuple(test.features.shape)} with {test.num_classes} classes"
        )
    return model, test


def cmd_eval(cfg, checkpoint) -> int:
    model, test = _load_for_eval(cfg, checkpoint)
    out = _out_dir(cfg)
    _write_config(cfg, out)
    metrics = evaluate(model, test, ex.attack_config(cfg, test.dim), seed=cfg["attack"]["seed"])
    _write_reports(cfg, [_row(cfg, metrics)], out)
    detail = {
        "clean_acc": metrics.clean_acc,
        "robust_acc": metrics.robust_acc,
        "harmonic_mean": metrics.harmonic_mean,
        "attack": metrics.attack_descriptor,
        "n_eval": metrics.n_eval,
        "seeds": metrics.seed_list,
    }
    (out / "metrics.json").write_text(json.dumps(detail, indent=2) + "\n")
    print(f"clean {metrics.clean_acc:.4f} robust {metrics.robust_acc:.4f} -> {out}")
    return EXIT_OK


def cmd_attack(cfg, checkpoint) -> int:
    model, test = _load_for_eval(cfg, checkpoint)
    atk = ex.attack_config(cfg, test.dim)
    if atk is None:
        raise ConfigurationError("eval.protocol is 'none'; nothing to attack with")
    atk = replace(atk, per_sample=True)
    out = _out_dir(cfg)
    _write_config(cfg, out)
    rows = []
    for start in range(0, len(test), 256):
        sl = slice(start, start + 256)
        rows.append(attack_inputs(model, Batch(test.features[sl], test.labels[sl], test.ids[sl]), atk))
    adv = Dataset(np.concatenate(rows), test.labels, test.num_classes, "adversarial", test.name, test.ids)
    save_csv(adv, out / "adversarial.csv")
    print(f"wrote {len(adv)} adversarial rows -> {out / 'adversarial.csv'}")
    return EXIT_OK


def sweep_cells(cfg) -> list:
    """Resolved per-cell configs, in cell-index order (Cartesian product of the axes)."""
    axes = cfg["sweep"]["axes"]
    if not axes:
        raise ConfigurationError("sweep.axes is empty")
    names = list(axes)
    for name in names:
        if not isinstance(axes[name], list) or not axes[name]:
            raise ConfigurationError(f"sweep axis '{name}' must be a non-empty list")
    cells = []
    for index, values in enumerate(itertools.product(*(axes[n] for n in names))):
        c = copy.deepcopy(cfg)
        for name, value in zip(names, values):
            if name == "tau" and value in ("baseline", None):
                c["train"]["adversarial"] = False
                continue
            c = config_mod.apply_override(c, AXIS_ALIASES.get(name, name), value)
        c = ex.with_seed(c, cfg["sweep"]["base_seed"] + index)
        cells.append((dict(zip(names, values)), c))
    return cells


def _run_cell(cell_cfg):
    _, _, metrics = ex.run_once(cell_cfg)
    return _row(cell_cfg, metrics)


def _axis_number(v, i):
    return v if isinstance(v, (int, float)) and not isinstance(v, bool) else i


def cmd_sweep(cfg, jobs: int = 1) -> int:
    cells = sweep_cells(cfg)
    out = _out_dir(cfg)
    _write_config(cfg, out)
    configs = [c for _, c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, configs))
    else:
        rows = [_run_cell(c) for c in configs]
    _write_reports(cfg, rows, out)

    names = list(cfg["sweep"]["axes"])
    xname, others = names[0], names[1:]
    xvalues = cfg["sweep"]["axes"][xname]
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for metric in ("clean", "robust", "hm"):
        series = {}
        for (settings, _), row in zip(cells, rows):
            label = ", ".join(f"{n}={settings[n]}" for n in others) or metric
            x = _axis_number(settings[xname], xvalues.index(settings[xname]))
            series.setdefault(label, []).append((x, row[metric]))
        write_curves_svg(series, plots / f"{metric}_vs_{xname}.svg", xlabel=xname, ylabel=f"{metric} (%)", title=f"{metric} accuracy")
    print(f"{len(rows)} cells -> {out}")
    return EXIT_OK


def cmd_theory(cfg) -> int:
    out = _out_dir(cfg)
    _write_config(cfg, out)
    game = ex.game_from(cfg)
    traces = {}
    summary = run_bench(game, ex.bench_config(cfg), traces)
    (out / "theory.json").write_text(json.dumps(summary, indent=2) + "\n")
    trace = traces["rate"]
    trace.to_csv(out / "trace.csv")
    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    keep = trace.t > 0
    series = {
        name: list(zip(np.log10(trace.t[keep]), np.log10(np.maximum(trace.min_so_far(name)[keep], 1e-300))))
        for name in ("grad_ab_sq", "grad_phi_sq")
    }
    write_curves_svg(series, plots / "stationarity.svg", xlabel="log10 t", ylabel="log10 min-so-far", title="stationarity")
    failed = [c["name"] for c in summary["checks"] if not c["passed"]]
    for c in summary["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.6g} (threshold {c['threshold']:.6g})")
    if failed:
        print("theory checks failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_THEORY
    return EXIT_OK


def cmd_data_gen(cfg) -> int:
    if cfg["data"]["source"] != "blobs":
        raise ConfigurationError("data gen needs data.source 'blobs'")
    out = _out_dir(cfg)
    _write_config(cfg, out)
    train_set, test_set = ex.load_datasets(cfg)
    for ds in (train_set, test_set):
        save_csv(ds, out / f"{ds.split}.csv")
        save_metadata(ds, out / f"{ds.split}.meta.json")
    print(f"wrote {len(train_set)} train and {len(test_set)} test rows -> {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(rest)
        cfg = _resolve(args, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "attack":
            return cmd_attack(cfg, args.checkpoint)
        if args.command == "sweep":
            if args.jobs < 1:
                raise ConfigurationError("--jobs must be >= 1")
            return cmd_sweep(cfg, args.jobs)
        if args.command == "theory":
            return cmd_theory(cfg)
        return cmd_data_gen(cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"advlora: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigurationError, DataFormatError, InsufficientDataError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
