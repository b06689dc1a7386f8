"""Ablation grid and loss-weight sweep: one training run per (row, seed)."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..data import ConfigError
from .config import SWITCHES, TrainConfig
from .training import Dataset, prepare_data, train

log = logging.getLogger(__name__)

ROW_LABELS = {
    "drop_code": "w/o Code",
    "drop_demo": "w/o Demo",
    "drop_note": "w/o Note",
    "no_transformers": "w/o Transformers",
    "no_mag": "w/o MAG",
    "no_contrastive": "w/o L_bi-con",
    "no_hierarchy": "w/o L_hrchy",
    "no_code_centring": "w/o Code-centring",
}
DEFAULT_AXES = ("drop_code", "drop_demo", "drop_note", "no_transformers", "no_mag",
                "no_contrastive", "no_hierarchy")
FULL = "NECHO (full)"
DEFAULT_LAMBDA_GRID = (0.01, 0.1, 1.0)


def _run_rows(rows: Sequence[tuple[str, TrainConfig]], seeds: Sequence[int], out_dir: Path,
              data: Optional[Dataset]) -> list[dict]:
    results = []
    for label, cfg in rows:
        per_seed = []
        for seed in seeds:
            run_cfg = dataclasses.replace(cfg, seed=seed)
            slug = label.replace(" ", "_").replace("/", "").replace("(", "").replace(")", "").replace("=", "")
            report = train(run_cfg, out_dir / f"{slug}-seed{seed}", data=data)
            per_seed.append(report["acc_at_k"])
            log.info("%s seed %d: Acc@30 %.4f", label, seed, report["acc_at_k"].get("30", float("nan")))
        ks = list(per_seed[0])
        results.append({
            "row": label,
            "seeds": list(seeds),
            "mean": {k: float(np.mean([r[k] for r in per_seed])) for k in ks},
            "per_seed": per_seed,
        })
    return results


def run_ablation(base: TrainConfig, axes: Sequence[str] = DEFAULT_AXES, seeds: Sequence[int] = (0,),
                 out_dir="runs/ablation", data: Optional[Dataset] = None) -> list[dict]:
    """Full model plus one row per switch. The cohort is shared; seeds vary the model."""
    unknown = [a for a in axes if a not in SWITCHES]
    if unknown:
        raise ConfigError(f"unknown ablation switch(es) {unknown}; choose from {list(SWITCHES)}")
    out_dir = Path(out_dir)
    data = data or prepare_data(base.data)
    rows = [(FULL, base)] + [(ROW_LABELS[a], dataclasses.replace(base, **{a: True})) for a in axes]
    results = _run_rows(rows, seeds, out_dir, data)
    write_table(results, out_dir, "ablation")
    return results


def sweep_lambda(base: TrainConfig, grid: Sequence[float] = DEFAULT_LAMBDA_GRID, seeds: Sequence[int] = (0,),
                 out_dir="runs/sweep", data: Optional[Dataset] = None) -> list[dict]:
    """One row per hierarchy-loss weight."""
    if not grid or any(g < 0 for g in grid):
        raise ConfigError("the lambda grid must hold non-negative weights")
    out_dir = Path(out_dir)
    data = data or prepare_data(base.data)
    rows = [(f"lambda_hrchy={g:g}", dataclasses.replace(base, loss=dataclasses.replace(base.loss, hrchy=float(g))))
            for g in grid]
    results = _run_rows(rows, seeds, out_dir, data)
    write_table(results, out_dir, "sweep")
    return results


def format_table(results: Sequence[dict]) -> str:
    """Plain-text table: one row per configuration, Acc@k in percent."""
    ks = list(results[0]["mean"])
    head = ["Model"] + [f"Acc@{k}" for k in ks]
    body = [[r["row"]] + [f"{100 * r['mean'][k]:.2f}" for k in ks] for r in results]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)  # noqa: E731
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    rule = "-" * len(line(head))
    return "\n".join([line(head), rule] + [line(r) for r in body]) + "\n"


def to_csv(results: Sequence[dict]) -> str:
    ks = list(results[0]["mean"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "n_seeds"] + [f"acc@{k}" for k in ks])
    for r in results:
        writer.writerow([r["row"], len(r["seeds"])] + [repr(r["mean"][k]) for k in ks])
    return buf.getvalue()


def write_table(results: Sequence[dict], out_dir: Path, name: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.csv").write_text(to_csv(results))
    (out_dir / f"{name}.txt").write_text(format_table(results))
    (out_dir / f"{name}.json").write_text(json.dumps(results, indent=2) + "\n")
