"""Command-line entry point: ``rulforge <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes a ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .config import RunConfig, load_config
from .dataset import (holdout_split, load_cells, make_dataset, partition, read_splits, write_cells,
                      write_splits)
from .errors import ConfigError, RulforgeError
from .preprocess import incremental_capacity_curve
from .synth import SynthConfig, synthesize_cells
from .training import DatasetSplit, FreezeMask, SampleCache, get_case, run_case, run_direct

logger = logging.getLogger("rulforge")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

SWEEP_AXES = {
    "delta": ("prep", "delta", int),
    "window": ("denoise", "window", int),
    "denoiser": ("denoise", "method", str),
    "features": ("prep", "features", str),
    "activation": ("model", "activation", str),
    "integrator": ("model", "integrator", str),
    "kernel": ("model", "kernel", int),
    "hidden": ("model", "H", int),
    "rt": ("model", "rt_mode", str),
}


class UsageError(ConfigError):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seeds: list
    inputs: list
    outputs: list
    version: str = __version__
    duration_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, directory: Path) -> Path:
        path = Path(directory) / "manifest.json"
        self.outputs = sorted(set(self.outputs) | {str(path)})
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _dump_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_predictions(path: Path, rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "cycle", "rul_true", "rul_pred"])
        for cell_id, cycle, true, pred in rows:
            w.writerow([cell_id, cycle, true, repr(float(pred))])
    return path


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args, extra: dict | None = None) -> RunConfig:
    extra = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        extra.setdefault("train", {})["base_seed"] = args.seed
    if getattr(args, "runs", None) is not None:
        extra.setdefault("train", {})["n_runs"] = args.runs
    return load_config(args.config, extra)


def _load_split(directory, fmt: str, seed: int) -> DatasetSplit:
    cells = load_cells(directory, fmt)
    if not cells:
        raise RulforgeError(f"no cells found in {directory}")
    splits = read_splits(directory)
    if splits is None:
        train, test = holdout_split(cells, 0.2, seed)
    else:
        groups = partition(cells, splits)
        train, test = groups.get("train", []), groups.get("test", [])
    return DatasetSplit(train, test)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> RunManifest:
    if args.cells < 1:
        raise UsageError("--cells must be >= 1")
    cfg = SynthConfig(n_cells=args.cells, seed=args.seed, variant=args.variant, prefix=args.prefix,
                      life_min=args.life_min, life_max=args.life_max)
    out = _outdir(args.out)
    cells = synthesize_cells(cfg)
    paths = write_cells(cells, out, args.format)
    _, test = holdout_split(cells, args.test_fraction, args.seed)
    test_ids = {c.cell_id for c in test}
    splits = {c.cell_id: ("test" if c.cell_id in test_ids else "train") for c in cells}
    paths.append(write_splits(out, splits))
    return RunManifest("synth", [], asdict(cfg), [args.seed], [], [str(p) for p in paths],
                       extra={"cycle_life": {c.cell_id: c.cycle_life for c in cells}})


def cmd_train(args) -> RunManifest:
    cfg = _config(args)
    out = _outdir(args.out)
    data = _load_split(args.data, args.format, cfg.train.base_seed)
    train_cells, val_cells = holdout_split(data.train, args.val_fraction, cfg.train.base_seed)
    metrics, rows, runs, scaler = run_direct(train_cells, data.test, cfg.prep, cfg.model, cfg.train,
                                             val_cells=val_cells)
    outputs = []
    ckpt_dir = _outdir(out / "checkpoints")
    for r in runs:
        outputs += [str(p) for p in save_checkpoint(r.params, ckpt_dir / f"run_{r.seed}.ckpt")]
    outputs.append(str(_dump_json(out / "scaler.json", scaler.to_dict())))
    outputs.append(str(_write_predictions(out / "predictions.csv", rows)))
    report = {**metrics, "n_test_samples": len(rows), "seeds": cfg.train.seeds,
              "train_losses": [r.losses for r in runs], "val_losses": [r.val_losses for r in runs],
              "config": cfg.snapshot()}
    outputs.append(str(_dump_json(out / "metrics.json", report)))
    logger.info("rmse %.3f  r2 %.4f  mape %.3f%%", metrics["rmse"], metrics["r2"], metrics["mape_percent"])
    return RunManifest("train", [], cfg.snapshot(), cfg.train.seeds, [str(args.data), str(args.config)],
                       outputs, extra={"train_cells": [c.cell_id for c in train_cells],
                                       "val_cells": [c.cell_id for c in val_cells]})


def cmd_transfer(args) -> RunManifest:
    case = get_case(args.case)
    freeze = FreezeMask.parse(args.freeze)
    cfg = _config(args)
    finetune_cfg = cfg.train if args.finetune_epochs is None else replace(cfg.train, epochs=args.finetune_epochs)
    out = _outdir(args.out)
    source = _load_split(args.source, args.format, cfg.train.base_seed)
    inputs = [str(args.source)]
    if case.direct:
        if args.target:
            logger.warning("case %s trains and tests on the source dataset; --target is ignored", case.case_id)
        target = source
    else:
        if not args.target:
            raise UsageError(f"case {case.case_id} needs --target")
        target = _load_split(args.target, args.format, cfg.train.base_seed)
        inputs.append(str(args.target))
    datasets = {"first": source, "second": source} if case.direct else {case.pretrain: source, case.test: target}
    report = run_case(case, datasets["first"], datasets["second"], cfg.prep, cfg.model, cfg.train,
                      finetune_cfg, freeze)
    snapshot = {**cfg.snapshot(), "freeze": str(freeze), "finetune_epochs": finetune_cfg.epochs}
    outputs = [str(_write_predictions(out / "predictions.csv", report.predictions)),
               str(_dump_json(out / "metrics.json", report.to_dict(snapshot)))]
    return RunManifest("transfer", [], snapshot, report.seeds, inputs, outputs,
                       extra={"case": case.case_id})


def parse_values(text: str, kind) -> list:
    text = text.strip()
    if ".." in text and kind is int:
        lo, hi = text.split("..", 1)
        try:
            lo, hi = int(lo), int(hi)
        except ValueError:
            raise UsageError(f"bad range {text!r}") from None
        if hi < lo:
            raise UsageError(f"empty range {text!r}")
        return list(range(lo, hi + 1))
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    try:
        return [kind(v) for v in values]
    except ValueError:
        raise UsageError(f"bad value list {text!r}") from None


def cmd_sweep(args) -> RunManifest:
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown axis {args.axis!r}; choose from {sorted(SWEEP_AXES)}")
    section, name, kind = SWEEP_AXES[args.axis]
    values = parse_values(args.values, kind)
    base = _config(args)
    configs = [_config(args, {section: {name: v}}) for v in values]  # validate all before running
    out = _outdir(args.out)
    data = _load_split(args.data, args.format, base.train.base_seed)
    rows, outputs = [], []
    for value, cfg in zip(values, configs):
        t0 = time.perf_counter()
        metrics, preds, _, _ = run_direct(data.train, data.test, cfg.prep, cfg.model, cfg.train)
        rows.append((value, metrics["rmse"], metrics["r2"], metrics["mape_percent"]))
        logger.info("%s=%s: rmse %.3f", args.axis, value, metrics["rmse"])
        point = _outdir(out / f"{args.axis}_{value}")
        m = RunManifest("sweep-point", [], cfg.snapshot(), cfg.train.seeds, [str(args.data)],
                        [str(_write_predictions(point / "predictions.csv", preds))],
                        duration_s=time.perf_counter() - t0, extra={"axis": args.axis, "value": value})
        outputs.append(str(m.write(point)))
    path = out / "sweep.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "rmse", "r2", "mape"])
        for value, *nums in rows:
            w.writerow([value, *(repr(float(x)) for x in nums)])
    outputs.append(str(path))
    return RunManifest("sweep", [], base.snapshot(), base.train.seeds, [str(args.data)], outputs,
                       extra={"axis": args.axis, "values": values})


def parse_cycles(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad cycle list {text!r}") from None


def cmd_ic_curve(args) -> RunManifest:
    cfg = _config(args)
    cycles = parse_cycles(args.cycles)
    cells = {c.cell_id: c for c in load_cells(args.data, args.format)}
    if args.cell not in cells:
        raise UsageError(f"unknown cell {args.cell!r}")
    cell = cells[args.cell]
    rows = []
    for k in sorted(set(cycles)):
        if not 1 <= k <= len(cell.cycles):
            raise UsageError(f"cell {cell.cell_id} has cycles 1..{len(cell.cycles)}, not {k}")
        cyc = cell.cycles[k - 1]
        mask = cyc.discharge if cyc.discharge is not None and cyc.discharge.sum() >= 3 else slice(None)
        volts, dqdv = incremental_capacity_curve(cyc.V[mask], cyc.Q[mask], cfg.prep.denoise)
        rows += [(k, v, d) for v, d in zip(volts, dqdv)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cycle", "voltage", "dQdV"])
        for k, v, d in rows:
            w.writerow([k, repr(float(v)), repr(float(d))])
    return RunManifest("ic-curve", [], cfg.snapshot(), [], [str(args.data)], [str(out)],
                       extra={"cell": cell.cell_id, "cycles": sorted(set(cycles))})


def cmd_preprocess(args) -> RunManifest:
    cfg = _config(args)
    samples = make_dataset(load_cells(args.data, args.format), cfg.prep)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "cycle", "rul"] + [f"f{j}" for j in range(cfg.model.seq_len * cfg.model.feat_dim)])
        for s in samples:
            w.writerow([s.cell_id, s.cycle_index, s.label_rul] + [repr(float(x)) for x in s.features.ravel()])
    return RunManifest("preprocess", [], cfg.snapshot(), [], [str(args.data)], [str(out)],
                       extra={"n_samples": len(samples)})


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rulforge", description="Battery RUL prognostics toolkit")
    p.add_argument("--version", action="version", version=f"rulforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    sp.add_argument("--cells", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=("fast_charge", "multi_discharge"), default="fast_charge")
    sp.add_argument("--prefix", default="cell")
    sp.add_argument("--life-min", type=float, default=150.0)
    sp.add_argument("--life-max", type=float, default=500.0)
    sp.add_argument("--test-fraction", type=float, default=0.25)
    sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train an ensemble and evaluate it on the test split")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, help="override train.base_seed")
    sp.add_argument("--runs", type=int, help="override train.n_runs")
    sp.add_argument("--val-fraction", type=float, default=0.1, help="share of training cells held out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("transfer", help="run one transfer-learning case")
    common(sp, data=False)
    sp.add_argument("--case", required=True)
    sp.add_argument("--source", required=True, help="pretraining dataset directory")
    sp.add_argument("--target", help="dataset the case tests on")
    sp.add_argument("--freeze", default="alstm", help="comma-separated blocks frozen during fine-tuning")
    sp.add_argument("--finetune-epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--runs", type=int)
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("sweep", help="evaluate one configuration axis over a list of values")
    common(sp)
    sp.add_argument("--axis", required=True, help="|".join(SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma list or integer range lo..hi")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--runs", type=int)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ic-curve", help="export smoothed dQ/dV curves")
    common(sp)
    sp.add_argument("--cell", required=True)
    sp.add_argument("--cycles", required=True, help="comma-separated cycle numbers")
    sp.add_argument("--out", required=True, help="output CSV file")
    sp.set_defaults(func=cmd_ic_curve)

    sp = sub.add_parser("preprocess", help="export model input samples as CSV")
    common(sp)
    sp.add_argument("--out", required=True, help="output CSV file")
    sp.set_defaults(func=cmd_preprocess)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        manifest = args.func(args)
    except ConfigError as exc:
        print(f"rulforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RulforgeError, OSError, ValueError) as exc:
        print(f"rulforge: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:
        logger.exception("%s failed unexpectedly", args.command)
        return EXIT_RUNTIME
    manifest.argv = argv
    manifest.duration_s = round(time.perf_counter() - t0, 3)
    out = Path(args.out)
    manifest.write(out if args.command in ("synth", "train", "transfer", "sweep") else out.parent)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
