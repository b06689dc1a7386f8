"""Training, evaluation and the run directory layout.

A run directory holds ``config.json``, ``metrics.jsonl`` (one loss line per
optimiser step), ``report.json`` and ``checkpoint.ckpt`` (best validation
epoch). Everything except ``timing.json`` is a deterministic function of the
config.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..data import (Batch, ConfigError, PatientRecord, generate_cohort, make_batches, preprocess,
                    read_cohort, split)
from ..model import NECHO, build_model
from ..objectives import compute_losses
from ..ontology import Ontology, default_ontology, parse_ontology
from ..tensor.checkpoint import check_compatible, load_checkpoint, read_manifest, save_checkpoint
from ..tensor.core import Tape
from ..tensor.nn import flatten_parameters
from .config import TrainConfig, canonical_json, config_hash, from_dict, to_dict
from .metrics import (accuracy_at_ks, label_frequencies, random_ranking_accuracy,
                      repeat_previous_scores)
from .optim import EarlyStopping, make_optimizer

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class Dataset:
    ontology: Ontology
    train: list
    valid: list
    test: list
    vocab: int
    demo_sizes: tuple


def load_ontology(cfg) -> Ontology:
    if cfg.ontology:
        return parse_ontology(cfg.ontology)
    return default_ontology(cfg.n_parents, cfg.children_per_parent)


def prepare_data(cfg) -> Dataset:
    """Load or generate the cohort named by a :class:`DataConfig`, then clean and split it."""
    ont = load_ontology(cfg)
    if cfg.cohort:
        path = Path(cfg.cohort)
        if not path.exists():
            raise FileNotFoundError(f"cohort file {path} does not exist")
        records = read_cohort(path)
    else:
        records = generate_cohort(cfg.seed, cfg.n_patients, ont, cfg.gen)
    records = preprocess(records, cfg.max_visits, cfg.max_words)
    for rec in records:
        for v in rec.visits:
            if max(v.codes) >= ont.n_leaves or min(v.codes) < 0:
                raise ConfigError(f"patient {rec.patient_id} has a code outside the {ont.n_leaves}-leaf ontology")
    train, valid, test = split(records, cfg.split, cfg.split_seed)
    vocab = max(cfg.gen.vocab_size, 1 + max(max(v.note) for r in records for v in r.visits))
    return Dataset(ont, train, valid, test, vocab, tuple(cfg.gen.demo_sizes))


def model_for(cfg: TrainConfig, data: Dataset) -> NECHO:
    return build_model(cfg.resolved_model(), data.ontology.n_leaves, data.ontology.n_parents,
                       data.vocab, data.demo_sizes, seed=cfg.seed)


def predict_visits(model: NECHO, batches: Sequence[Batch]) -> tuple[np.ndarray, list, list]:
    """Stack eval-mode next-visit probabilities for every real visit.

    Returns ``(scores, truths, current_codes)`` aligned row by row.
    """
    rows, truths, current = [], [], []
    for batch in batches:
        probs = model.predict(batch)
        for b in range(batch.size):
            n = int(batch.lengths[b])
            rows.append(probs[b, :n])
            truths.extend(batch.target_codes[b])
            current.extend(batch.input_codes[b])
    if not rows:
        raise ValueError("no visits to evaluate")
    return np.concatenate(rows, axis=0), truths, current


def evaluate_model(model: NECHO, records: Sequence[PatientRecord], ont: Ontology,
                   ks: Sequence[int], batch_size: int = 32) -> dict:
    return evaluate_batches(model, make_batches(records, batch_size, ont), ks)


def evaluate_batches(model: NECHO, batches: Sequence[Batch], ks: Sequence[int]) -> dict:
    scores, truths, _ = predict_visits(model, batches)
    return {int(k): float(v) for k, v in accuracy_at_ks(scores, truths, ks).items()}


def baselines(data: Dataset, records: Sequence[PatientRecord], ks: Sequence[int]) -> dict:
    """Random-ranking and repeat-previous-visit Acc@k on ``records``."""
    freq = label_frequencies((v.codes for r in data.train for v in r.visits), data.ontology.n_leaves)
    truths = [r.visits[t + 1].codes for r in records for t in range(len(r.visits) - 1)]
    previous = [r.visits[t].codes for r in records for t in range(len(r.visits) - 1)]
    repeat = accuracy_at_ks(repeat_previous_scores(previous, freq), truths, ks)
    return {
        "random": {str(k): float(v) for k, v in random_ranking_accuracy(truths, data.ontology.n_leaves, ks).items()},
        "repeat_previous": {str(k): float(v) for k, v in repeat.items()},
    }


def _named_state(model: NECHO) -> dict:
    return {name: p.data for name, p in model.named_parameters()}


def checkpoint_meta(cfg: TrainConfig, data: Dataset, epoch: int) -> dict:
    return {"config": to_dict(cfg), "config_hash": config_hash(cfg), "epoch": epoch,
            "n_codes": data.ontology.n_leaves, "n_parents": data.ontology.n_parents,
            "vocab": data.vocab, "demo_sizes": list(data.demo_sizes)}


def _json_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":")) + "\n"


def train(cfg: TrainConfig, run_dir, data: Optional[Dataset] = None) -> dict:
    """Train one model; returns the report (also written to ``run_dir/report.json``)."""
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    started = time.perf_counter()
    data = data or prepare_data(cfg.data)
    ont = data.ontology
    model = model_for(cfg, data)
    weights = cfg.resolved_weights()
    flat, flat_grad = flatten_parameters(model)
    opt = make_optimizer(cfg.optimizer, flat, flat_grad, cfg.lr)
    stopper = EarlyStopping(cfg.early_stop_patience)
    valid_batches = make_batches(data.valid, cfg.eval_batch_size, ont)
    ckpt_path = run_dir / CHECKPOINT_NAME
    best_state = None
    epochs = []
    step = 0
    with open(run_dir / "metrics.jsonl", "w", encoding="utf-8") as metrics_out:
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            batches = make_batches(data.train, cfg.batch_size, ont, shuffle_seed=cfg.seed * 100003 + epoch)
            sums = dict.fromkeys(("L_ce", "L_bi_con", "L_hrchy", "L_total"), 0.0)
            for batch in batches:
                step += 1
                flat_grad.fill(0.0)
                with Tape() as tape:
                    out = model(batch)
                    total, parts = compute_losses(out, batch, weights)
                if not np.isfinite(parts["L_total"]):
                    raise TrainingDivergence(f"loss became {parts['L_total']} at step {step} (epoch {epoch}): {parts}")
                tape.backward(total)
                if not opt.step():
                    raise TrainingDivergence(f"non-finite gradient at step {step} (epoch {epoch})")
                metrics_out.write(_json_line({"step": step, **parts}))
                for key in sums:
                    sums[key] += parts[key]
            metrics_out.flush()
            valid_acc = evaluate_batches(model, valid_batches, cfg.ks)
            improved = stopper.update(epoch, valid_acc[cfg.monitor_k])
            if improved:
                best_state = {k: v.copy() for k, v in _named_state(model).items()}
                save_checkpoint(ckpt_path, best_state, checkpoint_meta(cfg, data, epoch))
            epochs.append({"epoch": epoch, **{k: v / len(batches) for k, v in sums.items()},
                           "valid_acc": {str(k): v for k, v in valid_acc.items()}})
            log.info("epoch %d loss %.4f valid Acc@%d %.4f%s", epoch, epochs[-1]["L_total"], cfg.monitor_k,
                     valid_acc[cfg.monitor_k], " *" if improved else "")
            if stopper.should_stop:
                break

    model.load_state_dict(best_state)
    test_acc = evaluate_model(model, data.test, ont, cfg.ks, cfg.eval_batch_size)
    report = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "acc_at_k": {str(k): v for k, v in test_acc.items()},
        "valid_acc_at_k": epochs[stopper.best_epoch - 1]["valid_acc"],
        "best_epoch": stopper.best_epoch,
        "epochs_run": len(epochs),
        "stopped_early": len(epochs) < cfg.max_epochs,
        "steps": step,
        "epochs": epochs,
        "baselines": baselines(data, data.test, cfg.ks),
        "n_patients": {"train": len(data.train), "valid": len(data.valid), "test": len(data.test)},
    }
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (run_dir / "timing.json").write_text(json.dumps({"seconds": time.perf_counter() - started}) + "\n")
    return report


def load_trained(checkpoint, data: Optional[Dataset] = None, config: Optional[TrainConfig] = None):
    """Rebuild the model stored in ``checkpoint``; returns ``(model, config, data)``.

    The stored shapes are validated against the model implied by the config
    and dataset before any parameter is loaded.
    """
    manifest = read_manifest(checkpoint)
    meta = manifest.get("meta", {})
    cfg = config or from_dict(meta["config"])
    data = data or prepare_data(cfg.data)
    model = model_for(cfg, data)
    expected = {name: p.shape for name, p in model.named_parameters()}
    check_compatible({e["name"]: tuple(e["shape"]) for e in manifest["params"]}, expected)
    params, _ = load_checkpoint(checkpoint)
    model.load_state_dict(params)
    return model, cfg, data


def evaluate(checkpoint, split_name: str = "test", data: Optional[Dataset] = None,
             records: Optional[Sequence[PatientRecord]] = None) -> dict:
    """Eval-mode Acc@k of a stored model on one split (or on explicit records)."""
    model, cfg, data = load_trained(checkpoint, data)
    if records is None:
        if split_name not in ("train", "valid", "test"):
            raise ConfigError(f"unknown split {split_name!r}")
        records = getattr(data, split_name)
    acc = evaluate_model(model, records, data.ontology, cfg.ks, cfg.eval_batch_size)
    return {"config_hash": config_hash(cfg), "seed": cfg.seed, "split": split_name,
            "acc_at_k": {str(k): v for k, v in acc.items()},
            "baselines": baselines(data, records, cfg.ks)}


def report_json(report: dict) -> str:
    return canonical_json(report)
