"""``ssar`` command line: transform, train, eval, ablate, synth.

Exit codes: 0 success, 2 usage, 3 data/file errors, 4 invalid configuration,
5 runtime failure (including any experiment cell that did not complete).
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import baselines, checkpoint, graph, synthlab, tgcn, trainer
from .dataproc import DataError, load_frame, load_schema
from .depmeasures import MIN_WINDOW, MeasureKind, MeasureSpec

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4, 5

logger = logging.getLogger("ssar")


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text) if p.suffix.lower() in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return doc


def _experiment_config(args, **overrides) -> trainer.ExperimentConfig:
    d = load_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    d.update(overrides)
    try:
        return trainer.ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from None


def _load_input(args):
    schema = load_schema(args.schema) if args.schema else None
    return load_frame(args.input, schema)


def _workers(args) -> int:
    return 1 if args.deterministic else args.workers


# --- subcommands -------------------------------------------------------------------------


def cmd_transform(args) -> int:
    try:
        kind = MeasureKind.parse(args.measure)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.window < MIN_WINDOW and not args.allow_small_window:
        raise UsageError(f"--window {args.window} is below the minimum of {MIN_WINDOW}; "
                         "pass --allow-small-window to override")
    try:
        spec = MeasureSpec(kind, args.window, bins=args.bins, allow_small_window=args.allow_small_window)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    frame = trainer.prepare_input(_load_input(args))
    g = graph.build_temporal(frame, spec, workers=_workers(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.output or f"graph_{kind.value}_w{args.window}.ssarg"
    graph.save(g, out / name, storage=args.storage)
    print(f"wrote {len(g)} snapshots to {out / name}")
    return EXIT_OK


def _save_checkpoints(result: trainer.ExperimentResult, out: Path) -> None:
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    for (method, window), models in sorted(result.models.items()):
        cell = result.cells[(method, window)]
        for i, m in enumerate(models):
            extra = {
                "method": method,
                "window": window,
                "sample": i,
                "seed": m.seed,
                "hp": m.hp.to_dict(),
                "ratios": [cfg.ratios.train, cfg.ratios.validation, cfg.ratios.test],
                "bins": cfg.bins,
                "ablation_constant": cfg.ablation_constant,
                "norm": cell.stats.to_dict(),
            }
            if m.linear is not None:
                extra["kernel"] = m.linear.kernel
                checkpoint.save(ckdir / f"{method}_w{window}_s{i}.ckpt", m.params, m.linear.kind.value,
                                N=cell.targets.shape[1], M=window, measure=None, extra=extra)
            else:
                checkpoint.save(ckdir / f"{method}_w{window}_s{i}.ckpt", m.params, "tgcn",
                                N=cell.targets.shape[1], Q=m.hp.Q, K=m.hp.K, M=m.hp.M,
                                measure=method, extra=extra)


def _run(args, cfg: trainer.ExperimentConfig, prefix: str) -> int:
    frame = _load_input(args)
    result = trainer.run_experiment(cfg, frame, workers=_workers(args), keep_models=True)
    out = Path(args.out)
    paths = trainer.write_outputs(result, out, prefix)
    _save_checkpoints(result, out)
    for p in paths:
        print(f"wrote {p}")
    failed = [f"{r.method}/w{r.window}: {r.error}" for r in result.reports if r.error]
    if failed:
        raise RuntimeFailure("cells failed:\n  " + "\n  ".join(failed))
    return EXIT_OK


def cmd_train(args) -> int:
    return _run(args, _experiment_config(args), "report")


def cmd_ablate(args) -> int:
    overrides = {"measures": [], "baselines": [], "ablation": True}
    if args.constant is not None:
        overrides["ablation_constant"] = args.constant
    return _run(args, _experiment_config(args, **overrides), "ablation")


def _model_from_checkpoint(header: dict, arrays: dict) -> trainer.TrainedModel:
    extra = header["extra"]
    hp = tgcn.HyperParams(**extra["hp"])
    if header["kind"] == "tgcn":
        params = tgcn.ModelParams(arrays)
        return trainer.TrainedModel(extra["method"], extra["window"], hp, tgcn.FitResult(params), extra["seed"])
    model = baselines.LinearModel(header["kind"], extra["window"], checkpoint.ParamSet(arrays), extra["kernel"])
    return trainer.TrainedModel(extra["method"], extra["window"], hp, tgcn.FitResult(model.params),
                                extra["seed"], model)


def cmd_eval(args) -> int:
    ckdir = Path(args.checkpoints) if args.checkpoints else Path(args.out) / "checkpoints"
    files = sorted(ckdir.glob("*.ckpt"))
    if not files:
        raise DataError(f"no checkpoints under {ckdir}")
    frame = _load_input(args)
    cells, rows = {}, []
    for path in files:
        header, arrays = checkpoint.load(path)
        extra = header["extra"]
        key = (extra["method"], extra["window"])
        if key not in cells:
            cfg = trainer.ExperimentConfig(
                measures=(), baselines=(), windows=(extra["window"],),
                ratios=trainer.SplitRatios(*extra["ratios"]), bins=extra["bins"],
                ablation_constant=extra["ablation_constant"],
            )
            cells[key] = trainer.prepare_cell(cfg, frame, extra["method"], extra["window"], _workers(args))
            if cells[key].stats.to_dict() != extra["norm"]:
                raise DataError(f"{path.name}: input data differ from the data the model was trained on")
        model = _model_from_checkpoint(header, arrays)
        mse = trainer.evaluate([model], cells[key])[0]
        rows.append({"checkpoint": path.name, "method": key[0], "w_s": key[1],
                     "sample": extra["sample"], "test_mse": mse})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for r in rows:
        summary.setdefault(f"{r['method']}/w{r['w_s']}", []).append(r["test_mse"])
    doc = {
        "models": rows,
        "cells": {k: {"n": len(v), "mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}
                  for k, v in sorted(summary.items())},
    }
    (out / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / 'eval.json'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    d = load_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.kind:
        d["kind"] = args.kind
    try:
        frame = synthlab.generate(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid synth config: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / (args.output or "synth.csv")
    side = synthlab.write_synth(frame, csv_path)
    print(f"wrote {csv_path} and {side}")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_globals(p, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--config", default=d(None), help="JSON or YAML config file")
    p.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the config)")
    p.add_argument("--out", default=d("out"), help="output directory")
    p.add_argument("--workers", type=int, default=d(1), help="worker processes")
    p.add_argument("--deterministic", action="store_true", default=d(False),
                   help="single worker and single-threaded BLAS")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssar", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p, suppress=True)
        p.set_defaults(func=fn)
        return p

    def data_args(p, required=True):
        p.add_argument("--input", required=required, help="CSV with a leading 'date' column")
        p.add_argument("--schema", help="JSON/YAML mapping feature -> log_return|diff|diff_ffill")

    p = add("transform", cmd_transform, "build a temporal graph file")
    data_args(p)
    p.add_argument("--measure", required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--bins", type=int)
    p.add_argument("--allow-small-window", action="store_true")
    p.add_argument("--storage", choices=("dense", "list"), default="dense")
    p.add_argument("--output", help="file name inside --out")

    data_args(add("train", cmd_train, "search, train and evaluate every configured cell"))
    p = add("eval", cmd_eval, "re-evaluate saved checkpoints on the test segment")
    data_args(p)
    p.add_argument("--checkpoints", help="checkpoint directory (default <out>/checkpoints)")
    p = add("ablate", cmd_ablate, "constant-weight ablation")
    data_args(p)
    p.add_argument("--constant", type=float, help="edge weight c (nonzero)")
    p = add("synth", cmd_synth, "generate a synthetic data set")
    p.add_argument("--kind", choices=("coupled", "regime_switching"))
    p.add_argument("--output", help="CSV file name inside --out")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ssar: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.workers < 1:
        print("ssar: usage error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    with contextlib.ExitStack() as stack:
        if args.deterministic:
            from threadpoolctl import threadpool_limits

            stack.enter_context(threadpool_limits(limits=1))
        try:
            return args.func(args)
        except UsageError as exc:
            print(f"ssar: usage error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except ConfigError as exc:
            print(f"ssar: config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except (DataError, graph.GraphFormatError, checkpoint.CheckpointError, OSError) as exc:
            print(f"ssar: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        except RuntimeFailure as exc:
            print(f"ssar: runtime error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        except Exception as exc:  # noqa: BLE001 - last-resort categorization
            print(f"ssar: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
