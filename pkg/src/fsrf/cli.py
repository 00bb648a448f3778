"""``fsrf`` command line: synth, train, eval, gradcheck.

One YAML config drives every command; flags only override it. Exit codes:
0 success, 1 internal or numerical failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import yaml

from . import checks
from .autodiff import NumericalDomainError
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split_dataset
from .distill import VARIANTS
from .evaluation import (
    CURVE_DRAWS,
    DEFAULT_RATIOS,
    GRID_CONDITIONS,
    RunReport,
    avg_missing,
    eval_inter_grid,
    eval_intra_curve,
)
from .experiments import ExperimentError, ablate, ablation_table, multi_seed, seed_runner
from .losses import js_divergence
from .training import CheckpointError, TrainConfig, TrainingError, load_checkpoint, train, write_trace

log = logging.getLogger("fsrf")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def default_config() -> dict:
    return {
        "data": {"path": None, "synthetic": dataclasses.asdict(SyntheticSpec())},
        "train": TrainConfig().to_dict(),
        "seeds": [0, 1, 2, 3, 4],
        "eval": {"ratios": list(DEFAULT_RATIOS), "draws": CURVE_DRAWS},
    }


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise UsageError(f"unknown config key {where}{key}")
        # free-form mappings (per-modality dicts) are replaced, sections merged
        if isinstance(value, dict) and isinstance(out[key], dict) and key not in _LEAF_MAPS:
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


_LEAF_MAPS = {"seq_len", "feat_dim", "strength", "noise_mean", "noise_var"}


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise UsageError(f"--set expects key=value, got {text!r}")
    value = yaml.safe_load(raw)
    for part in reversed(key.split(".")):
        value = {part: value}
    return value


def effective_config(args) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"{path} must hold a mapping")
        cfg = _merge(cfg, loaded)
    for item in args.set or []:
        cfg = _merge(cfg, parse_override(item))
    if getattr(args, "seeds", None):
        try:
            cfg["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise UsageError(f"--seeds expects comma-separated integers: {args.seeds}") from exc
    return cfg


def echo_config(cfg: dict, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def _synthetic_spec(cfg: dict) -> SyntheticSpec:
    try:
        return SyntheticSpec.from_dict(cfg["data"]["synthetic"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc


def _train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from exc


def load_data(cfg: dict, override=None):
    """Dataset from ``--data``/``data.path``, else generated from ``data.synthetic``."""
    path = override or cfg["data"]["path"]
    if path is None:
        return generate_synthetic(_synthetic_spec(cfg))
    try:
        return load_dataset(path)
    except (FileNotFoundError, DatasetError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: dict) -> int:
    if args.seed is not None:
        cfg["data"]["synthetic"]["seed"] = args.seed
    spec = _synthetic_spec(cfg)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to write into it")
    ds = generate_synthetic(spec)
    save_dataset(ds, out)
    echo_config(cfg, out)
    print(f"wrote {len(ds)} samples to {out}")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    config = _train_config(cfg)
    ds = load_data(cfg, args.data)
    out = Path(args.out)
    echo_config(cfg, out)
    if args.seeds:
        runner = seed_runner(ds, config, tuple(cfg["eval"]["ratios"]), checkpoint_root=out)
        report, _ = multi_seed(runner, cfg["seeds"], out / "partial_results.json",
                               config.hash(), config.variant)
        report.write(out)
        print(f"avg_missing {report.avg_missing:.4f} +- {report.avg_missing_std:.4f} over seeds {cfg['seeds']}")
        return EXIT_OK
    tr, va, _ = split_dataset(ds, config.split, config.split_seed)
    res = train(tr, va, config, checkpoint_dir=out, resume=args.resume)
    write_trace(res.trace, out / "trace.csv")
    print(f"best epoch {res.best_epoch} validation F1 {res.best_score:.4f}; checkpoint {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    out = Path(args.out)
    if args.ablate:
        return _eval_ablate(args, cfg, out)
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint (or --ablate)")
    try:
        ckpt = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from exc
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    model = ckpt.model
    train_cfg = ckpt.meta.get("train_config", cfg["train"])
    cfg["train"] = train_cfg
    ds = load_data(cfg, args.data)
    if {m: tuple(v) for m, v in ds.dims.items()} != {m: tuple(v) for m, v in model.config.dims.items()}:
        raise UsageError(f"dataset dims {ds.dims} do not match checkpoint dims {model.config.dims}")
    _, _, test = split_dataset(ds, tuple(train_cfg["split"]), train_cfg["split_seed"])
    if not args.grid and not args.curve:
        args.grid = args.curve = True
    seed = args.seed if args.seed is not None else train_cfg.get("seed", 0)
    grid = eval_inter_grid(model, test) if args.grid else None
    curve = eval_intra_curve(model, test, tuple(cfg["eval"]["ratios"]), int(cfg["eval"]["draws"]),
                             seed=seed) if args.curve else {}
    echo_config(cfg, out)
    if grid is not None:
        report = RunReport(grid, avg_missing(grid), curve, [seed], TrainConfig.from_dict(train_cfg).hash(),
                           variant=train_cfg.get("variant", "full"))
        paths = report.write(out)
        if not args.curve:
            paths[2].unlink()
        for c in GRID_CONDITIONS:
            print(f"{c:10s} {grid[c]:.4f}")
        print(f"avg_missing {report.avg_missing:.4f}")
    else:
        with open(out / "report_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ratio", "f1", "f1_std"])
            for p, v in sorted(curve.items()):
                w.writerow([f"{p:.1f}", repr(v), repr(0.0)])
    if curve:
        print("curve " + " ".join(f"{p:.1f}:{v:.4f}" for p, v in sorted(curve.items())))
    return EXIT_OK


def _eval_ablate(args, cfg: dict, out: Path) -> int:
    config = _train_config(cfg)
    ds = load_data(cfg, args.data)
    echo_config(cfg, out)
    ratios = tuple(cfg["eval"]["ratios"])
    reports = {}
    for variant in VARIANTS:
        reports[variant] = ablate(variant, ds, config, cfg["seeds"], ratios,
                                  partial_path=out / f"partial_{variant}.json")
        reports[variant].write(out, stem=f"report_{variant}")
    rows = ablation_table(reports)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: v if isinstance(v, str) else repr(v) for k, v in row.items()})
    print(f"{'variant':8s} " + " ".join(f"{c:>8s}" for c in GRID_CONDITIONS) + "  avg_miss  delta")
    for row in rows:
        print(f"{row['variant']:8s} " + " ".join(f"{row[c]:8.4f}" for c in GRID_CONDITIONS)
              + f"  {row['avg_missing']:.4f}  {row['delta_vs_full']:+.4f}")
    return EXIT_OK


def run_gradcheck(out=None, seed: int = 0, js=js_divergence) -> int:
    results = checks.run_suite(seed, js=js)
    lines = [f"{'item':28s} {'max_rel_err':>12s}  status"]
    for r in results:
        lines.append(f"{r.name:28s} {r.max_rel_error:12.3e}  {'pass' if r.passed else 'FAIL'}")
    print("\n".join(lines))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item", "max_rel_error", "tolerance", "passed"])
            for r in results:
                w.writerow([r.name, repr(r.max_rel_error), repr(r.tolerance), r.passed])
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_gradcheck(args, cfg: dict) -> int:
    if args.out:
        echo_config(cfg, Path(args.out))
    return run_gradcheck(args.out, args.seed or 0)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value (dotted key, repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fsrf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train and checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset directory or manifest (overrides data.path)")
    p.add_argument("--seeds", help="comma-separated seeds; trains and reports each")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="inter grid, intra curve or ablation")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--seeds")
    p.add_argument("--grid", action="store_true")
    p.add_argument("--curve", action="store_true")
    p.add_argument("--ablate", action="store_true")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--out")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def _thread_limit():
    raw = os.environ.get("FSRF_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"FSRF_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError("FSRF_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            cfg = effective_config(args)
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"fsrf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentError as exc:
        print(f"fsrf: {exc} ({len(exc.partial)} seed(s) finished before it)", file=sys.stderr)
        return EXIT_FAILURE
    except (TrainingError, NumericalDomainError) as exc:
        print(f"fsrf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001 - report and map to the internal-failure code
        log.debug("unhandled", exc_info=True)
        print(f"fsrf: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
