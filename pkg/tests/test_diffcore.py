import numpy as np
import pytest

from capt import diffcore as dc
from capt.errors import ContractError, NumericError, ShapeError


def test_softmax_symmetry():
    out = dc.softmax(dc.Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_tanh_at_origin():
    assert dc.tanh(dc.Tensor(0.0)).data == 0.0


def test_softmax_two_logits():
    out = dc.softmax(dc.Tensor([2.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.8808, 0.1192], atol=1e-4)


def test_softmax_positive_sums_to_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z = rng.normal(0, 5, size=(rng.integers(1, 6), rng.integers(2, 9)))
        s = dc.softmax(dc.Tensor(z)).data
        assert (s > 0).all()
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_backward_identity():
    x = dc.Tensor(3.0, requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.scale(x, 1.0)
        tape.backward(loss)
    assert x.grad == 1.0


def test_backward_mse_at_minimum():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.mse(x, np.array([1.0, 2.0]))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_linear_map_column_sums():
    # loss = sum(A @ x) -> dloss/dx = column sums of A
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    x = dc.Tensor(rng.normal(size=3), requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.total_sum(dc.matmul(dc.Tensor(a), x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, a.sum(axis=0), atol=1e-12)


def test_gradient_accumulates_across_uses():
    x = dc.Tensor([2.0], requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.total_sum(dc.add(x, x))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0])


def test_backward_linearity_of_sum():
    rng = np.random.default_rng(2)
    xv = rng.normal(size=5)
    t1, t2 = rng.normal(size=5), rng.normal(size=5)

    x = dc.Tensor(xv, requires_grad=True)
    with dc.Tape() as tape:
        tape.backward(dc.add(dc.mse(x, t1), dc.mse(x, t2)))
    g_sum = x.grad.copy()

    parts = []
    for t in (t1, t2):
        x = dc.Tensor(xv, requires_grad=True)
        with dc.Tape() as tape:
            tape.backward(dc.mse(x, t))
        parts.append(x.grad.copy())
    np.testing.assert_allclose(g_sum, parts[0] + parts[1], atol=1e-12)


def test_backward_rejects_nonscalar_loss():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    with dc.Tape() as tape:
        y = dc.tanh(x)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_rejects_empty_tape():
    with dc.Tape() as tape:
        pass
    with pytest.raises(ContractError):
        tape.backward(dc.Tensor(0.0))


@pytest.mark.parametrize("op,args", [
    ("matmul", (dc.Tensor(np.zeros((2, 3))), dc.Tensor(np.zeros((4, 2))))),
    ("mul", (dc.Tensor(np.zeros(3)), dc.Tensor(np.zeros(4)))),
    ("add", (dc.Tensor(np.zeros((2, 3))), dc.Tensor(np.zeros((3, 2))))),
    ("mse", (dc.Tensor(np.zeros(3)), dc.Tensor(np.zeros(2)))),
])
def test_shape_errors_name_primitive(op, args):
    with pytest.raises(ShapeError) as e:
        dc.forward_op(op, *args)
    assert op.split("_")[0] in str(e.value)


def test_forward_op_unknown_name():
    with pytest.raises(ContractError):
        dc.forward_op("frobnicate", dc.Tensor(1.0))


def test_grad_check_quadratic():
    x = dc.Tensor(3.0, requires_grad=True)
    err = dc.grad_check(lambda: dc.mul(x, x), [x], epsilon=1e-4)
    assert err < 1e-6


def test_grad_check_epsilon_range():
    x = dc.Tensor(1.0, requires_grad=True)
    with pytest.raises(ContractError):
        dc.grad_check(lambda: dc.mul(x, x), [x], epsilon=1e-2)


def test_grad_check_three_layer_composition():
    rng = np.random.default_rng(3)
    w1 = dc.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w2 = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w3 = dc.Tensor(rng.normal(size=(3,)), requires_grad=True)
    xin = rng.normal(size=(2, 4))

    def f():
        h = dc.tanh(dc.matmul(dc.Tensor(xin), w1))
        h = dc.silu(dc.matmul(h, w2))
        return dc.mean(dc.matmul(h, w3))

    assert dc.grad_check(f, [w1, w2, w3], epsilon=1e-4) < 1e-4


def test_grad_check_catches_wrong_backward():
    # a primitive with a deliberately wrong adjoint must be flagged
    def bad_square(t):
        out = dc.Tensor(t.data**2)

        def bwd():
            if out.grad is not None:
                dc._acc(t, out.grad * 3.0 * t.data)  # wrong factor

        dc._record(bwd)
        return out

    x = dc.Tensor(1.5, requires_grad=True)
    err = dc.grad_check(lambda: bad_square(x), [x], epsilon=1e-4)
    assert err > 1e-2


def test_grad_check_nonfinite_probe():
    x = dc.Tensor(0.0, requires_grad=True)

    def f():
        # log at 0 blows up under probing below zero
        return dc.Tensor(np.log(np.abs(x.data) + 0.0)) if False else _diverge(x)

    def _diverge(t):
        out = dc.Tensor(np.asarray(1.0 / t.data if t.data != 0 else np.inf))
        dc._record(lambda: None)
        return out

    with pytest.raises(NumericError):
        dc.grad_check(lambda: _diverge(x), [x], epsilon=1e-4)


PRIMS = ["tanh", "silu", "exp", "softplus", "sigmoid", "softmax"]


def test_elementwise_primitives_random_shapes_gradcheck():
    # >= 100 random shape/value instances across the primitive set
    rng = np.random.default_rng(4)
    fns = {"tanh": dc.tanh, "silu": dc.silu, "exp": dc.exp,
           "softplus": dc.softplus, "sigmoid": dc.sigmoid, "softmax": dc.softmax}
    count = 0
    for _ in range(20):
        for name in PRIMS:
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
            x = dc.Tensor(rng.normal(0, 1.5, size=shape), requires_grad=True)
            w = rng.normal(size=shape)

            def f(x=x, w=w, fn=fns[name]):
                return dc.mean(dc.mul(fn(x), dc.Tensor(w)))

            assert dc.grad_check(f, [x], epsilon=1e-4) < 1e-4, name
            count += 1
    assert count >= 100


def test_matmul_conv_losses_random_gradcheck():
    rng = np.random.default_rng(5)
    for _ in range(20):
        n, k, m = rng.integers(1, 5, size=3)
        a = dc.Tensor(rng.normal(size=(n, k)), requires_grad=True)
        b = dc.Tensor(rng.normal(size=(k, m)), requires_grad=True)
        assert dc.grad_check(lambda: dc.mean(dc.matmul(a, b)), [a, b]) < 1e-4

        t, c, w = int(rng.integers(2, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = dc.Tensor(rng.normal(size=(t, c)), requires_grad=True)
        kern = dc.Tensor(rng.normal(size=(w, c)), requires_grad=True)
        assert dc.grad_check(lambda: dc.mean(dc.conv1d_causal(x, kern)), [x, kern]) < 1e-4

        logits = dc.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        labels = rng.integers(0, 5, size=3)
        assert dc.grad_check(lambda: dc.cross_entropy(logits, labels), [logits]) < 1e-4


def test_cross_entropy_label_range():
    with pytest.raises(ContractError):
        dc.cross_entropy(dc.Tensor(np.zeros((2, 3))), [0, 3])
