"""Command-line entry point: ``python -m partmix <command> [options]``.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checks, encoder, evaluation, training
from .config import REGULARIZERS, ConfigError, ExperimentConfig
from .data import load_dataset, save_dataset
from .numerics import DegenerateInputError, NumericDomainError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("partmix")


class UsageError(ValueError):
    pass


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg.validate()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_sweep(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise UsageError(f"--sweep expects NAME=v1,v2,..., got {text!r}")
    name, values = text.split("=", 1)
    name = name.strip()
    if name not in ("B", "M", "tau"):
        raise UsageError(f"cannot sweep {name!r}; choose B, M or tau")
    cast = float if name == "tau" else int
    try:
        return name, [cast(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad sweep values {values!r}") from None


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    split = training.dataset_for(cfg)
    if args.save_dataset:
        save_dataset(split, out / "dataset")
    dump = open(out / "mixes.jsonl", "w") if args.dump_mixes else None
    try:
        model = training.train_and_evaluate(cfg, split, dump_mixes=dump)
    finally:
        if dump is not None:
            dump.close()
    training.write_run(out, cfg, model)
    (out / "record.json").write_text(json.dumps({
        "config_hash": model.record.config_hash,
        "wall_clock": model.record.wall_clock,
        "diagnostics": model.record.diagnostics,
    }, indent=2, sort_keys=True) + "\n")
    for r in model.record.reports:
        print(f"{r.protocol.name:<20} {r.protocol.shot_mode:<6} "
              f"rank1={r.cmc.get(1, float('nan')):.4f} mAP={r.map_score:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args)
    params_path = Path(args.params) if args.params else out / "params.bin"
    params, _ = encoder.load_params(params_path)
    split = load_dataset(args.dataset) if args.dataset else training.dataset_for(cfg)
    dims = encoder.dims_of(params)
    if dims.C_in != split.spec.C_in or dims.num_ids != len(split.train_ids):
        raise UsageError(f"snapshot dims {dims} do not match the dataset "
                         f"(C_in={split.spec.C_in}, train ids={len(split.train_ids)})")
    reports = training.evaluate(params, split, seed=cfg.seed)
    evaluation.write_metrics(reports, out / "metrics.csv", out / "metrics.json")
    for r in reports:
        print(f"{r.protocol.name:<20} {r.protocol.shot_mode:<6} mAP={r.map_score:.4f}")
    if args.self_retrieval:
        desc = evaluation.descriptors(params, split.query)
        print(f"self-retrieval mAP={evaluation.self_retrieval(desc).map_score:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    name, values = _parse_sweep(args.sweep)
    rows = training.ablate(cfg, name, values, _out(args))
    for row in rows:
        if row["protocol"] == "infrared_to_visible" and row["shot_mode"] == "single":
            print(f"{name}={row['value']}: mAP={row['mAP']:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    regs = [r.strip() for r in args.regularizers.split(",") if r.strip()]
    for r in regs:
        if r not in REGULARIZERS:
            raise UsageError(f"unknown regularizer {r!r}; choose from {', '.join(REGULARIZERS)}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = training.compare(cfg, regs, seeds, _out(args))
    for reg in regs:
        maps = [r["mAP"] for r in rows if r["regularizer"] == reg
                and r["protocol"] == "infrared_to_visible" and r["shot_mode"] == "single"]
        print(f"{reg:<18} mean mAP={sum(maps) / len(maps):.4f} over {len(maps)} seed(s)")
    return EXIT_OK


def _report(args, report: checks.SuiteReport) -> int:
    for line in report.lines():
        print(line)
    if args.out:
        path = _out(args) / f"{report.suite}.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    if args.trials < 0:
        raise UsageError("--trials must be >= 0")
    return _report(args, checks.gradcheck(cfg, args.trials, inject=args.inject))


def cmd_oracle(args) -> int:
    cfg = _config(args)
    if args.instances < 0:
        raise UsageError("--instances must be >= 0")
    return _report(args, checks.oracle(cfg, args.instances))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON); defaults when omitted")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--dump-mixes", action="store_true",
                        help="write mixed-sample provenance to mixes.jsonl (train only)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="partmix", description="PartMix desk-scale experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="train one model and evaluate it")
    s.add_argument("--save-dataset", action="store_true", help="also persist the generated dataset")
    s.set_defaults(func=cmd_train, out_default="runs/train")

    s = sub.add_parser("eval", parents=[common], help="evaluate a params.bin snapshot")
    s.add_argument("--params", help="snapshot path (default: <out>/params.bin)")
    s.add_argument("--dataset", help="persisted dataset directory (default: regenerate from config)")
    s.add_argument("--self-retrieval", action="store_true", help="also print the sanity protocol")
    s.set_defaults(func=cmd_eval, out_default="runs/train")

    s = sub.add_parser("ablate", parents=[common], help="sweep B, M or tau")
    s.add_argument("--sweep", required=True, help="e.g. B=0,1,2,3 or M=1,2,4,6,8")
    s.set_defaults(func=cmd_ablate, out_default="runs/ablate")

    s = sub.add_parser("compare", parents=[common], help="compare regularizers on shared data")
    s.add_argument("--regularizers", default="none,partmix", help="comma-separated names")
    s.add_argument("--seeds", default=None, help="comma-separated seeds (default: the config seed)")
    s.set_defaults(func=cmd_compare, out_default="runs/compare")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--inject", default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck, out_default=None)

    s = sub.add_parser("oracle", parents=[common], help="brute-force equivalence suites")
    s.add_argument("--instances", type=int, default=100)
    s.set_defaults(func=cmd_oracle, out_default=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:      # argparse reports usage problems with code 2
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    if args.out is None:
        args.out = args.out_default
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, evaluation.ProtocolError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (training.NumericFailure, NumericDomainError, DegenerateInputError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
