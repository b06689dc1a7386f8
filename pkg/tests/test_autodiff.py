import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from necho.tensor import DimensionError, NumericError, Tape, Tensor, grad_check, grad_check_many, ops
from necho.tensor import core
from necho.tensor.nn import Linear, flatten_parameters


def test_quadratic_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_constant_function_has_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.add(ops.sum(ops.mul(x, 0.0)), 4.0)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_non_scalar_loss_is_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 2.0)
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_loss_must_be_on_the_tape():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = ops.sum(x)
    with Tape() as other:
        pass
    with pytest.raises(ValueError):
        other.backward(loss)


def test_untraced_inputs_are_untouched_and_nothing_records_outside_a_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    y = ops.mul(x, c)
    assert y.node is None
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, c))
    tape.backward(loss)
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, [3.0, 4.0])


def test_nodes_are_visited_in_reverse_append_order():
    x = Tensor([0.5], requires_grad=True)
    with Tape() as tape:
        a = ops.exp(x)
        b = ops.mul(a, a)
        loss = ops.sum(b)
    kinds = [n.kind for n in tape.nodes]
    assert kinds == ["exp", "mul", "sum"]
    assert all(n.index == i for i, n in enumerate(tape.nodes))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2 * np.exp(1.0)], rtol=1e-14)


def test_shared_subexpression_gradients_add_up():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, 3.0)
        loss = ops.sum(ops.add(ops.mul(y, y), y))  # 9x^2 + 3x
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, [18 * 2.0 + 3.0])


def test_leaf_gradients_accumulate_into_existing_buffers():
    lin = Linear(3, 2, np.random.default_rng(0))
    flat, grad = flatten_parameters(lin)
    x = Tensor(np.ones((1, 3)))
    for _ in range(2):
        with Tape() as tape:
            loss = ops.sum(lin(x))
        tape.backward(loss)
    np.testing.assert_array_equal(lin.bias.grad, [2.0, 2.0])
    assert np.shares_memory(lin.weight.grad, grad)
    assert np.shares_memory(lin.weight.data, flat)


def test_backward_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.softmax(ops.matmul(x, w)) * rng.normal(size=(4, 3)))
        tape.backward(loss)
        return x.grad.copy(), w.grad.copy()

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_grad_check_sum_of_squares_passes_tight():
    report = grad_check(lambda x: ops.sum(ops.mul(x, x)), Tensor(np.random.default_rng(0).uniform(-1, 1, 6)),
                        tol=1e-6)
    assert report.passed, report


def test_grad_check_softmax_matmul_chain():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 3))
    target = rng.normal(size=(2, 3))
    report = grad_check(lambda x: ops.sum(ops.mul(ops.softmax(ops.matmul(x, w)), target)),
                        Tensor(rng.uniform(-1, 1, (2, 4))))
    assert report.passed, report


def test_grad_check_catches_a_corrupted_rule(monkeypatch):
    def bad_exp(a):
        a = core.as_tensor(a)
        out = np.exp(a.data)
        return ops._emit("exp", (a,), out, lambda g: (g * out * 1.01,))

    monkeypatch.setattr(ops, "exp", bad_exp)
    report = grad_check(lambda x: ops.sum(ops.exp(x)), Tensor([0.1, -0.4]))
    assert not report.passed
    assert report.max_rel_error > 5e-3


def test_grad_check_reports_nan_coordinate():
    x = Tensor([0.5, 1e-6])

    def f(t):
        return ops.sum(ops.log(ops.sub(t, 1e-6 - 1e-12)))

    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="index 1"):
        grad_check(f, x, h=1e-5)


def test_check_finite_names_index():
    with pytest.raises(NumericError, match=r"\(1,\)"):
        Tensor([1.0, np.nan]).check_finite()


_UNARY = {
    "exp": ops.exp,
    "sigmoid": ops.sigmoid,
    "tanh-like": lambda x: ops.sub(ops.mul(ops.sigmoid(ops.mul(x, 2.0)), 2.0), 1.0),
    "softmax": lambda x: ops.softmax(x, axis=-1),
    "log_softmax": lambda x: ops.log_softmax(x, axis=-1),
    "l2_norm": lambda x: ops.l2_norm(x, axis=-1),
}


@settings(max_examples=25, deadline=None)
@given(name=st.sampled_from(sorted(_UNARY)), seed=st.integers(0, 10_000))
def test_random_smooth_primitives_pass_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, (2, 4)))
    w = rng.normal(size=_UNARY[name](x).shape)
    report = grad_check(lambda t: ops.sum(ops.mul(_UNARY[name](t), w)), x)
    assert report.passed, report
