import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dropleak import autodiff as ad
from dropleak.autodiff import Tape, backward, grad, grad_check, record


def test_record_add_scalars():
    assert record("add", [2.0, 3.0]).item() == 5.0


def test_record_identity_matmul():
    a = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(record("matmul", [np.eye(3), a]).data, a)


def test_conv2d_output_shape():
    x = np.zeros((1, 3, 32, 32))
    k = np.zeros((12, 3, 5, 5))
    assert ad.conv2d(x, k, None, stride=2, pad=2).shape == (1, 12, 16, 16)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        record("matmul", [np.ones((2, 3)), np.ones((2, 3))])
    with pytest.raises(ad.ShapeError, match="add"):
        record("add", [np.ones(3), np.ones(4)])


def test_unknown_op():
    with pytest.raises(ad.UnknownOpError):
        record("frobnicate", [1.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_reported():
    with pytest.raises(ad.NonFiniteError, match="exp"):
        ad.exp(np.array([1000.0]))


def test_first_and_second_derivative_of_square():
    with Tape() as tape:
        x = tape.watch(np.array(3.0))
        (dx,) = backward(x * x, [x], create_graph=True)
        (ddx,) = backward(dx, [x])
    assert dx.item() == 6.0
    assert ddx.item() == 2.0


def test_backward_requires_scalar():
    with Tape() as tape:
        x = tape.watch(np.ones(3))
        with pytest.raises(ad.ShapeError):
            backward(x * 2.0, [x])


def test_unreached_target_gets_exact_zeros():
    with Tape() as tape:
        x = tape.watch(np.ones((2, 2)))
        y = tape.watch(np.ones(5))
        gx, gy = backward((x * x).sum(), [x, y])
    np.testing.assert_array_equal(gy.data, np.zeros(5))
    assert gx.shape == (2, 2)


def test_matmul_square_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    b = ad.constant(rng.standard_normal((4, 4)))

    def f(a):
        ab = a @ b
        return (ab * ab).sum()

    assert grad_check(f, rng.standard_normal((4, 4)), 1e-5) < 1e-6


def test_grad_check_examples():
    assert grad_check(lambda x: x.sum(), np.random.default_rng(0).standard_normal(5)) < 1e-9
    assert grad_check(lambda x: ad.sigmoid(x).sum(), np.random.default_rng(2).standard_normal(8)) < 1e-6
    x = np.array([1.0, 2.0])
    np.testing.assert_allclose(grad(lambda t: (t * t * t).sum(), x), [3.0, 12.0], rtol=1e-12)
    assert grad_check(lambda t: (t * t * t).sum(), x) < 1e-8


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), np.ones(2), eps=0.0)


@pytest.mark.parametrize("seed", range(5))
def test_second_order_norm_of_gradient(seed):
    # g(x) = ||grad f(x) - c||^2 with f(x) = sum(sigmoid(W x)^2)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((4, 3))
    c = rng.standard_normal(3)

    def f(x):
        h = ad.sigmoid(ad.constant(w) @ x)
        return (h * h).sum()

    def g_value(x):
        gf = grad(f, x)
        return float(np.sum((gf - c) ** 2))

    def g_tensor(xt):
        (gf,) = backward(f(xt), [xt], create_graph=True)
        d = gf - c
        return (d * d).sum()

    x0 = rng.standard_normal((3, 1))
    with Tape() as tape:
        xt = tape.watch(x0)
        (analytic,) = backward(g_tensor(xt), [xt])
    eps = 1e-5
    numeric = np.zeros_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e.flat[i] = eps
        numeric.flat[i] = (g_value(x0 + e) - g_value(x0 - e)) / (2 * eps)
    rel = np.abs(analytic.data - numeric) / np.maximum(np.maximum(np.abs(analytic.data), np.abs(numeric)), 1e-8)
    assert rel.max() < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_linearity_of_backward(a, b, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(6)
    c = rng.standard_normal(6)

    def f(x):
        return (ad.sigmoid(x) * c).sum()

    def h(x):
        return (x * x * x).sum()

    with Tape() as tape:
        x = tape.watch(x0)
        (combined,) = backward(f(x) * a + h(x) * b, [x])
        (gf,) = backward(f(x), [x])
        (gh,) = backward(h(x), [x])
    np.testing.assert_allclose(combined.data, a * gf.data + b * gh.data, rtol=1e-12, atol=1e-12)


def test_tape_parents_precede_children_and_replay_is_bit_identical():
    rng = np.random.default_rng(4)
    with Tape() as tape:
        x = tape.watch(rng.standard_normal((1, 2, 6, 6)))
        k = tape.watch(rng.standard_normal((3, 2, 3, 3)))
        y = ad.sigmoid(ad.conv2d(x, k, None, stride=1, pad=1))
        loss = (y * y).sum()
        backward(loss, [x, k], create_graph=True)
        for i, node in enumerate(tape.nodes):
            assert all(t.node < i for t in node.inputs if tape.owns(t))
        replayed = tape.replay()
        for node, value in zip(tape.nodes, replayed):
            np.testing.assert_array_equal(node.out.data, value)


def test_reset_and_truncate():
    with Tape() as tape:
        x = tape.watch(np.ones(2))
        mark = tape.checkpoint()
        y = x * 2.0
        assert len(tape) == mark + 1
        tape.truncate(mark)
        assert len(tape) == mark and not y.live
        tape.reset()
        assert len(tape) == 0 and not x.live


def test_determinism_within_process():
    def run():
        rng = np.random.default_rng(9)
        with Tape() as tape:
            x = tape.watch(rng.standard_normal((3, 3)))
            out = ad.logsumexp(x @ x, axis=1).sum()
            (g,) = backward(out, [x], create_graph=True)
            return [n.out.data.copy() for n in tape.nodes]

    a, b = run(), run()
    assert len(a) == len(b)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)


def test_ops_outside_tape_are_constants():
    y = ad.constant(np.ones(3)) * 2.0
    assert not y.live
