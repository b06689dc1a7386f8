"""Command line entry point: ``necho <subcommand> ...``.

Every subcommand exits 0 on success. On failure it prints a JSON object
``{"error": <type>, "message": <text>, "command": <subcommand>}`` to stderr
and exits 1 (2 for usage errors, as argparse does).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..data import cohort_stats, generate_cohort, write_cohort
from ..ontology import default_ontology, parse_ontology, write_ontology
from .config import SWITCHES, load_config

log = logging.getLogger("necho")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON (or TOML on Python 3.11+) config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set lr=3e-4 --set model.d=64 (repeatable)")
    p.add_argument("--seed", type=int, help="model/training seed")
    p.add_argument("--epochs", type=int, help="max_epochs")
    p.add_argument("--cohort", help="cohort JSONL (default: generate from data config)")
    p.add_argument("--ontology", help="ontology file matching the cohort's code indices")
    p.add_argument("--freeze-word-embeddings", action="store_true", help="keep note word vectors fixed")
    p.add_argument("--no-causal", action="store_true", help="let attention see future visits")


def _config_from(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.epochs is not None:
        overrides.append(f"max_epochs={args.epochs}")
    if args.cohort:
        overrides.append(f"data.cohort={json.dumps(args.cohort)}")
    if args.ontology:
        overrides.append(f"data.ontology={json.dumps(args.ontology)}")
    if args.freeze_word_embeddings:
        overrides.append("model.freeze_word_embeddings=true")
    if args.no_causal:
        overrides.append("model.causal=false")
    for switch in SWITCHES:
        if getattr(args, switch, False):
            overrides.append(f"{switch}=true")
    return load_config(args.config, overrides)


def cmd_generate_data(args) -> dict:
    ont = parse_ontology(args.ontology) if args.ontology else default_ontology(args.parents, args.children)
    records = generate_cohort(args.seed, args.patients, ont)
    out = write_cohort(records, args.out)
    ont_out = Path(args.ontology_out) if args.ontology_out else out.with_suffix(".ontology.txt")
    write_ontology(ont, ont_out)
    return {"cohort": str(out), "ontology": str(ont_out), **cohort_stats(records)}


def cmd_train(args) -> dict:
    from .training import train
    cfg = _config_from(args)
    report = train(cfg, args.run_dir)
    return {"run_dir": args.run_dir, "acc_at_k": report["acc_at_k"], "best_epoch": report["best_epoch"],
            "epochs_run": report["epochs_run"], "baselines": report["baselines"]}


def cmd_evaluate(args) -> dict:
    from .training import evaluate, prepare_data
    from .config import from_dict
    from ..tensor.checkpoint import read_manifest
    data = None
    if args.cohort or args.ontology:
        cfg = from_dict(read_manifest(args.checkpoint)["meta"]["config"])
        data_cfg = dataclasses.replace(cfg.data, cohort=args.cohort or cfg.data.cohort,
                                       ontology=args.ontology or cfg.data.ontology)
        data = prepare_data(data_cfg)
    report = evaluate(args.checkpoint, args.split, data=data)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def cmd_ablate(args) -> dict:
    from .experiments import DEFAULT_AXES, format_table, run_ablation
    cfg = _config_from(args)
    axes = args.axes.split(",") if args.axes else list(DEFAULT_AXES)
    results = run_ablation(cfg, axes, seeds=_seeds(args, cfg), out_dir=args.out_dir)
    sys.stderr.write(format_table(results))
    return {"out_dir": args.out_dir, "rows": results}


def cmd_sweep_lambda(args) -> dict:
    from .experiments import DEFAULT_LAMBDA_GRID, format_table, sweep_lambda
    cfg = _config_from(args)
    grid = [float(g) for g in args.grid.split(",")] if args.grid else list(DEFAULT_LAMBDA_GRID)
    results = sweep_lambda(cfg, grid, seeds=_seeds(args, cfg), out_dir=args.out_dir)
    sys.stderr.write(format_table(results))
    return {"out_dir": args.out_dir, "rows": results}


def cmd_gradcheck(args) -> dict:
    from .gradsuite import run_gradient_suite
    results = run_gradient_suite(h=args.h, tol=args.tol, seed=args.seed or 0, max_coords=args.max_coords)
    for r in results:
        sys.stderr.write(f"{r.name:<18} {r.report}\n")
    failed = [r.name for r in results if not r.passed]
    summary = {"passed": not failed, "failed": failed,
               "max_rel_error": {r.name: r.report.max_rel_error for r in results}}
    if failed:
        raise GradientCheckFailed(f"gradient check failed for {', '.join(failed)}")
    return summary


class GradientCheckFailed(RuntimeError):
    pass


def _seeds(args, cfg) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    return [cfg.seed]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="necho", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic cohort JSONL and its ontology")
    p.add_argument("--out", required=True, help="cohort JSONL path")
    p.add_argument("--ontology-out", help="where to write the ontology (default: next to the cohort)")
    p.add_argument("--ontology", help="use this ontology instead of the default hierarchy")
    p.add_argument("--patients", type=int, default=600)
    p.add_argument("--parents", type=int, default=12)
    p.add_argument("--children", type=int, default=10)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one model into a run directory")
    _add_config_args(p)
    for switch in SWITCHES:
        p.add_argument(f"--{switch.replace('_', '-')}", dest=switch, action="store_true")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a data split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--cohort", help="evaluate on this cohort instead of the training data")
    p.add_argument("--ontology")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="full model plus one row per ablation switch")
    _add_config_args(p)
    p.add_argument("--axes", help=f"comma-separated subset of {','.join(SWITCHES)}")
    p.add_argument("--seeds", help="comma-separated seeds; the row value is their mean")
    p.add_argument("--out-dir", default="runs/ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-lambda", help="train once per hierarchy-loss weight")
    _add_config_args(p)
    p.add_argument("--grid", help="comma-separated weights (default 0.01,0.1,1)")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--out-dir", default="runs/sweep")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the toy network")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int, help="sample at most this many coordinates per tensor")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except Exception as exc:  # every failure becomes a machine-readable record
        log.debug("command failed", exc_info=True)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 1
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
