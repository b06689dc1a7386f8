import math

import numpy as np
import pytest

from necho.fusion import (AdaptationGate, MultiHeadAttention, PredictionHead, SelfAttentionStream, TemporalProjector,
                          attention_mask, code_residual, cross_modal_attention, mag_combine)
from necho.harness.gradsuite import toy_batch, toy_model
from necho.harness.probes import backbone_invariance, run_causality_suite
from necho.model import ModelConfig
from necho.tensor import Tensor, ops
from necho.tensor.nn import Dropout

RNG = np.random.default_rng


def _off():
    d = Dropout(0.0, RNG(0))
    d.training = False
    return d


def test_projector_identity_and_hand_oracle():
    proj = TemporalProjector(3, RNG(0))
    proj.conv.kernel.data[0] = np.eye(3)
    x = RNG(1).normal(size=(1, 2, 3))
    np.testing.assert_array_equal(proj(Tensor(x)).data, x)
    np.testing.assert_array_equal(proj(Tensor(x[:, :1])).data, x[:, :1])  # T=1
    k, b = RNG(2).normal(size=(3, 3)), RNG(3).normal(size=3)
    proj.conv.kernel.data[0], proj.conv.bias.data[:] = k, b
    np.testing.assert_allclose(proj(Tensor(x)).data, x @ k + b, atol=1e-15)
    with pytest.raises(ValueError):
        TemporalProjector(3, RNG(0), width=2)


def test_cross_modal_attention_cases():
    eye = Tensor(np.eye(2))
    v_row = Tensor([[[0.7, -1.2]]])
    out, w = cross_modal_attention(Tensor([[[1.0, 2.0]]]), v_row, eye, eye, eye)
    np.testing.assert_array_equal(w.data, [[[1.0]]])
    np.testing.assert_array_equal(out.data, v_row.data)

    # identical keys: uniform weights, output is the mean of the values
    src = np.array([[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]])
    w_v = Tensor(RNG(0).normal(size=(2, 2)))
    out, w = cross_modal_attention(Tensor(RNG(1).normal(size=(1, 2, 2))), Tensor(src), eye, eye, w_v)
    np.testing.assert_allclose(w.data, 1 / 3, atol=1e-15)

    # T=2, d_k=1 hand oracle
    q = Tensor([[[1.0], [2.0]]])
    s = Tensor([[[0.5], [-1.0]]])
    one = Tensor([[1.0]])
    out, w = cross_modal_attention(q, s, one, one, one)
    for i, qi in enumerate((1.0, 2.0)):
        logits = np.array([qi * 0.5, qi * -1.0])
        p = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(w.data[0, i], p, rtol=1e-14)
        np.testing.assert_allclose(out.data[0, i, 0], p @ [0.5, -1.0], rtol=1e-14)


def test_attention_rows_are_stochastic_over_unmasked_keys():
    mha = MultiHeadAttention(8, 2, RNG(0))
    x = Tensor(RNG(1).normal(size=(3, 5, 8)))
    key_mask = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0], [1, 0, 0, 0, 0]], dtype=bool)
    for causal in (False, True):
        mha(x, x, key_mask, causal)
        w = mha.last_weights
        allowed = attention_mask(key_mask, 5, causal)
        assert np.all(np.abs(w.sum(axis=-1) - 1.0) <= 1e-10)
        assert np.all(w[~np.broadcast_to(allowed, w.shape)] == 0.0)


def test_self_attention_with_one_visit_attends_to_itself():
    sa = SelfAttentionStream(4, 2, 2, 4, RNG(0), _off())
    sa(Tensor(RNG(1).normal(size=(1, 1, 4))), np.ones((1, 1), bool))
    assert np.all(sa.layers[0].attn.last_weights == 1.0)


def test_code_residual():
    np.testing.assert_array_equal(code_residual(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    y = Tensor(RNG(0).normal(size=(2, 3)))
    np.testing.assert_array_equal(code_residual(y, Tensor(np.zeros((2, 3)))).data, y.data)


def test_gate_alpha_cases():
    y = Tensor([[2.0, 0.0]])
    out, alpha = mag_combine(y, Tensor([[0.0, 1.0]]), Tensor(0.25))
    assert alpha.data.item() == 0.5
    np.testing.assert_array_equal(out.data, [[2.0, 0.5]])

    out, alpha = mag_combine(Tensor([[3.0, 4.0]]), Tensor([[0.0, 5.0]]), Tensor(1.0))
    assert alpha.data.item() == 1.0
    np.testing.assert_array_equal(out.data, [[3.0, 9.0]])

    out, alpha = mag_combine(y, Tensor(np.zeros((1, 2))), Tensor(0.7))
    assert alpha.data.item() == 0.0
    np.testing.assert_array_equal(out.data, y.data)

    # beta large: the clamp holds alpha at exactly one; negative beta floors at zero
    _, alpha = mag_combine(Tensor([[10.0]]), Tensor([[1.0]]), Tensor(5.0))
    assert alpha.data.item() == 1.0
    _, alpha = mag_combine(Tensor([[10.0]]), Tensor([[1.0]]), Tensor(-5.0))
    assert alpha.data.item() == 0.0


def test_gate_with_zero_displacement_is_layer_norm_of_the_code_stream():
    gate = AdaptationGate(4, RNG(0), _off())
    gate.gate.weight.data[:] = 0.0
    gate.gate.bias.data[:] = 0.0
    y = RNG(1).normal(size=(2, 3, 4))
    out = gate(Tensor(y), Tensor(RNG(2).normal(size=(2, 3, 4))), Tensor(RNG(3).normal(size=(2, 3, 4))))
    np.testing.assert_array_equal(gate.last_alpha, 0.0)
    expected = ops.layer_norm(Tensor(y), gate.norm.gain, gate.norm.bias).data
    np.testing.assert_array_equal(out.data, expected)


def test_alpha_stays_in_the_unit_interval():
    gate = AdaptationGate(6, RNG(4), _off())
    for s in range(20):
        r = RNG(s)
        gate.beta.data[...] = r.uniform(-2, 2)
        gate(*(Tensor(r.normal(size=(2, 4, 6)) * r.uniform(0.01, 10)) for _ in range(3)))
        assert np.all((gate.last_alpha >= 0) & (gate.last_alpha <= 1))


def test_prediction_head_cases():
    head = PredictionHead(2, 3, RNG(0))
    head.proj.weight.data[:] = [[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]]
    head.proj.bias.data[:] = [0.0, -1.0, 0.25]
    np.testing.assert_allclose(head(Tensor(np.zeros((1, 2)))).data[0], 1 / (1 + np.exp(-head.proj.bias.data)))
    m = np.array([[0.3, -0.4]])
    z = m @ head.proj.weight.data + head.proj.bias.data
    np.testing.assert_allclose(head(Tensor(m)).data, 1 / (1 + np.exp(-z)), rtol=1e-15)


def test_model_predictions_are_probabilities_and_finite():
    batch, _ = toy_batch(0)
    probs = toy_model(0).predict(batch)
    assert probs.shape == (2, 2, 6)
    assert np.all((probs > 0) & (probs < 1))


def test_causal_model_ignores_the_future():
    result = run_causality_suite(n_cases=20, seed=3)
    assert result.cases == 20 and result.max_diff == 0.0


def test_bidirectional_model_sees_the_future():
    cfg = ModelConfig(d=16, d_word=8, d_note=8, heads=4, layers=2, d_ff=16, causal=False)
    assert run_causality_suite(n_cases=5, seed=3, cfg=cfg).max_diff > 0.0


def test_code_backbone_survives_zeroed_fusion_weights():
    side, codes = backbone_invariance(seed=1)
    assert side == 0.0
    assert codes > 0.0


def test_eval_switches_shared_dropout_off():
    model = toy_model(0, dropout=0.5)
    batch, _ = toy_batch(0)
    a, b = model.predict(batch), model.predict(batch)
    np.testing.assert_array_equal(a, b)
    model.train()
    assert model.code_encoder._dropout.training
    model.eval()
    assert not model.code_encoder._dropout.training


def test_scaled_attention_uses_root_dk():
    q = Tensor([[[2.0, 0.0, 0.0, 0.0]]])
    k = Tensor([[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]])
    eye = Tensor(np.eye(4))
    _, w = cross_modal_attention(q, k, eye, eye, eye)
    p = 1 / (1 + math.exp(-2.0 / 2.0))
    np.testing.assert_allclose(w.data[0, 0], [p, 1 - p], rtol=1e-14)
