import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_config
from necho.data import make_batches
from necho.harness import training
from necho.harness.config import ConfigError, DataConfig, TrainConfig, load_config
from necho.harness.optim import Adam, EarlyStopping, SGD
from necho.harness.training import (CHECKPOINT_NAME, TrainingDivergence, evaluate, load_trained, model_for,
                                    prepare_data, train)
from necho.objectives import LossWeights, compute_losses, multilabel_ce
from necho.tensor import Tape
from necho.tensor.checkpoint import CheckpointError
from necho.tensor.nn import flatten_parameters


def test_plateau_stops_exactly_patience_epochs_after_the_best():
    stopper = EarlyStopping(5)
    schedule = [0.1, 0.3, 0.5, 0.5, 0.4, 0.5, 0.45, 0.2, 0.9]
    stopped = None
    for epoch, value in enumerate(schedule, start=1):
        stopper.update(epoch, value)
        if stopper.should_stop:
            stopped = epoch
            break
    assert stopper.best_epoch == 3 and stopped == 8


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.integers(1, 8), st.integers(1, 50))
def test_early_stopping_bounds(values, patience, max_epochs):
    stopper = EarlyStopping(patience)
    last = 0
    for epoch in range(1, max_epochs + 1):
        stopper.update(epoch, values[(epoch - 1) % len(values)])
        last = epoch
        if stopper.should_stop:
            break
    assert last <= max_epochs
    if last < max_epochs:
        assert last - stopper.best_epoch == patience


def test_optimisers_move_against_the_gradient():
    data, grad = np.array([1.0, -2.0]), np.array([0.5, -0.5])
    assert SGD(data, grad, lr=0.1).step()
    np.testing.assert_allclose(data, [0.95, -1.95])
    data = np.array([1.0, -2.0])
    opt = Adam(data, grad, lr=1e-3)
    assert opt.step()
    # the first bias-corrected Adam step has magnitude lr for every coordinate
    np.testing.assert_allclose(data, [1.0 - 1e-3, -2.0 + 1e-3], rtol=1e-9)
    grad[0] = np.nan
    assert not opt.step()


def test_adam_matches_the_textbook_update():
    r = np.random.default_rng(0)
    data = r.normal(size=7)
    ref = data.copy()
    grad = np.zeros(7)
    opt = Adam(data, grad, lr=0.01)
    m = v = np.zeros(7)
    for t in range(1, 6):
        g = r.normal(size=7)
        grad[:] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(data, ref, rtol=1e-12)


def test_tiny_cohort_ce_only_loss_decreases_every_epoch(tmp_path):
    # default generator and model; only the cohort and hierarchy are shrunk
    cfg = TrainConfig(max_epochs=5, early_stop_patience=10, loss=LossWeights(1.0, 0.0, 0.0),
                      data=DataConfig(n_patients=20, n_parents=3, children_per_parent=4))
    report = train(cfg, tmp_path)
    losses = [e["L_total"] for e in report["epochs"]]
    assert len(losses) == 5
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_run_directory_and_determinism(tmp_path):
    cfg = tiny_config()
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    for name in ("metrics.jsonl", "report.json", "config.json", CHECKPOINT_NAME):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert a == b
    lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert list(first) == ["step", "L_ce", "L_bi_con", "L_hrchy", "L_total"]
    assert len(lines) == a["steps"]
    assert 1 <= a["best_epoch"] <= a["epochs_run"] <= cfg.max_epochs
    for k, v in a["acc_at_k"].items():
        assert 0.0 <= v <= 1.0
    assert load_config(tmp_path / "a" / "config.json") == cfg


def test_different_seed_changes_the_run(tmp_path):
    a = train(tiny_config(max_epochs=1), tmp_path / "a")
    b = train(tiny_config(max_epochs=1, seed=1), tmp_path / "b")
    assert a["epochs"][0]["L_total"] != b["epochs"][0]["L_total"]


def test_divergence_names_the_step(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = training.compute_losses

    def flaky(out, batch, weights):
        total, parts = real(out, batch, weights)
        calls["n"] += 1
        if calls["n"] == 3:
            parts = dict(parts, L_total=float("nan"))
        return total, parts

    monkeypatch.setattr(training, "compute_losses", flaky)
    with pytest.raises(TrainingDivergence, match="step 3"):
        train(tiny_config(), tmp_path)


def test_zero_auxiliary_weights_give_the_plain_ce_gradient():
    cfg = tiny_config(no_contrastive=True, no_hierarchy=True)
    data = prepare_data(cfg.data)
    batch = make_batches(data.train, 4, data.ontology)[0]

    def grads(loss_fn):
        model = model_for(cfg, data)
        _, flat_grad = flatten_parameters(model)
        model.reseed_dropout(5)
        with Tape() as tape:
            loss = loss_fn(model(batch))
        tape.backward(loss)
        return flat_grad.copy()

    via_total = grads(lambda out: compute_losses(out, batch, cfg.resolved_weights())[0])
    plain = grads(lambda out: multilabel_ce(out.y_hat, batch.y, batch.mask))
    assert via_total.tobytes() == plain.tobytes()


def test_evaluate_is_repeatable_and_read_only(tmp_path):
    cfg = tiny_config(max_epochs=2)
    train(cfg, tmp_path)
    ckpt = tmp_path / CHECKPOINT_NAME
    before = ckpt.read_bytes()
    first = evaluate(ckpt, "test")
    second = evaluate(ckpt, "test")
    assert first == second
    assert ckpt.read_bytes() == before
    assert set(first["acc_at_k"]) == {"5", "10"}
    model, _, _ = load_trained(ckpt)
    state = model.state_dict()
    evaluate(ckpt, "valid")
    for name, value in model.state_dict().items():
        assert value.tobytes() == state[name].tobytes()
    with pytest.raises(ConfigError):
        evaluate(ckpt, "holdout")


def test_checkpoint_shape_mismatch_lists_parameters(tmp_path):
    cfg = tiny_config(max_epochs=1)
    train(cfg, tmp_path)
    wider = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, d=32, d_ff=32))
    with pytest.raises(CheckpointError, match="code_encoder.embedding"):
        load_trained(tmp_path / CHECKPOINT_NAME, config=wider)


def test_frozen_word_embeddings_stay_put(tmp_path):
    cfg = tiny_config(max_epochs=1, model=dataclasses.replace(tiny_config().model, freeze_word_embeddings=True))
    data = prepare_data(cfg.data)
    initial = model_for(cfg, data).note_encoder.words.weight.data.copy()
    train(cfg, tmp_path, data)
    model, _, _ = load_trained(tmp_path / CHECKPOINT_NAME, data)
    assert model.note_encoder.words.weight.data.tobytes() == initial.tobytes()
    assert model.note_encoder.convs["2"].kernel.data.tobytes() != model_for(cfg, data).note_encoder.convs["2"].kernel.data.tobytes()


def test_invalid_configs_are_rejected():
    with pytest.raises(ConfigError):
        load_config(None, ["lr=0"])
    with pytest.raises(ConfigError):
        load_config(None, ["optimizer=rmsprop"])
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, ["model.width=3"])
    with pytest.raises(ConfigError):
        load_config(None, ["loss.hrchy=-1"])
    assert load_config(None, ["model.d=64", "loss.hrchy=1"]).model.d == 64
