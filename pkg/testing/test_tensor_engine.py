#!/usr/bin/env python3
"""Tape, primitives and finite-difference gradient checks of every differentiable op."""

import numpy as np
import pytest

from retinagan.core.errors import GradientError, NonFiniteError, ShapeError
from retinagan.core import tensor_engine as te
from retinagan.core.tensor_engine import Tape, Tensor, backward, gradient_check

TOL = 1e-4


def param(shape, seed=0, low=-1.0, high=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, dtype="float64")


def test_add_mul_backward_accumulates():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape():
        loss = te.tsum(a * a + a)
    grads = backward(loss, [a])
    np.testing.assert_allclose(grads[a.id], [3.0, 5.0])


def test_unreached_params_get_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with Tape():
        loss = te.tsum(a * 2.0)
    grads = backward(loss, [a, b])
    np.testing.assert_array_equal(grads[b.id], np.zeros(2))


def test_backward_rejects_non_scalar():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        out = a * 2.0
    with pytest.raises(GradientError):
        backward(out)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with te.no_grad():
            te.tsum(a * 3.0)
    assert len(tape) == 0


def test_backward_without_params_returns_leaves():
    a = Tensor(np.ones(2), requires_grad=True)
    with Tape():
        loss = te.tsum(a * 4.0)
    grads = backward(loss)
    assert list(grads) == [a.id]


def test_tape_replay_matches_forward():
    x = param((2, 3))
    with Tape() as tape:
        out = te.tsum(te.sigmoid(x) * 2.0)
    values = tape.replay()
    assert values[out.id] == pytest.approx(out.item())


def test_non_finite_output_names_the_op():
    x = Tensor(np.array([0.0, 1.0]))
    with pytest.raises(NonFiniteError, match="log"):
        te.log(x)


def test_shape_mismatch_is_reported():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_detach_stops_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape():
        loss = te.tsum(te.detach(x) * x)
    grads = backward(loss, [x])
    np.testing.assert_array_equal(grads[x.id], np.ones(2))


def test_precision_context_switches_default_dtype():
    with te.precision("float64"):
        assert Tensor(1.0).dtype == np.float64
    assert Tensor(1.0).dtype == np.float32


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 8, 8))
    w = rng.normal(size=(3, 2, 4, 4))
    y = rng.normal(size=(1, 3, 4, 4))
    forward = te.conv2d(Tensor(x, dtype="float64"), Tensor(w, dtype="float64"), stride=2, pad=1).data
    # conv_transpose2d weights are laid out [Cin, Cout, k, k]
    back = te.conv_transpose2d(Tensor(y, dtype="float64"), Tensor(w, dtype="float64"), stride=2, pad=1).data
    assert np.sum(forward * y) == pytest.approx(np.sum(x * back), rel=1e-10)


UNARY_CASES = [
    ("exp", lambda x: te.tsum(te.exp(x))),
    ("log", lambda x: te.tsum(te.log(x * x + 1.0))),
    ("abs", lambda x: te.tsum(te.absolute(x))),
    ("pow", lambda x: te.tsum((x * x + 0.5) ** 1.5)),
    ("relu", lambda x: te.tsum(te.relu(x) * x)),
    ("leaky_relu", lambda x: te.tsum(te.leaky_relu(x, 0.2) * x)),
    ("sigmoid", lambda x: te.tsum(te.sigmoid(x))),
    ("tanh", lambda x: te.tsum(te.tanh(x))),
    ("clip", lambda x: te.tsum(te.clip(x, lo=-0.5, hi=0.5) * x)),
    ("huber", lambda x: te.tsum(te.huber(x * 3.0, 1.0))),
    ("mean", lambda x: te.tsum(te.mean(x * x, axis=1))),
    ("max", lambda x: te.tsum(te.tmax(x * x, axis=-1))),
    ("reshape", lambda x: te.tsum(te.reshape(x, (-1,)) * te.reshape(x, (-1,)))),
    ("transpose", lambda x: te.tsum(te.transpose(x, (1, 0)) * 2.0 * te.transpose(x, (1, 0)))),
    ("slice", lambda x: te.tsum(te.slice_axis(x, 1, 1, 3) ** 2.0)),
    ("div", lambda x: te.tsum(x / (x * x + 1.0))),
    ("neg", lambda x: te.tsum(-(x * x))),
]


@pytest.mark.parametrize("name,fn", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_elementwise_and_reduction_gradients(name, fn):
    x = param((3, 4), seed=len(name))
    assert gradient_check(fn, [x], points=20) <= TOL


def test_matmul_and_concat_gradients():
    a, b = param((3, 4), 1), param((4, 2), 2)
    assert gradient_check(lambda a, b: te.tsum(te.concat([te.matmul(a, b), te.slice_axis(a, 1, 0, 2)],
                                                          axis=1) ** 2.0), [a, b]) <= TOL


def test_instance_norm_gradient():
    x = param((2, 3, 4, 4), 3)
    weights = np.random.default_rng(9).normal(size=(2, 3, 4, 4))
    assert gradient_check(lambda x: te.tsum(te.instance_norm(x) * weights), [x]) <= TOL


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_gradient(stride, pad):
    x, w, b = param((2, 2, 6, 6), 4), param((3, 2, 3, 3), 5), param((3,), 6)
    assert gradient_check(lambda x, w, b: te.tsum(te.conv2d(x, w, b, stride=stride, pad=pad) ** 2.0),
                          [x, w, b]) <= TOL


def test_conv_transpose2d_gradient():
    x, w = param((1, 3, 3, 3), 7), param((3, 2, 4, 4), 8)
    assert gradient_check(lambda x, w: te.tsum(te.conv_transpose2d(x, w, stride=2, pad=1) ** 2.0), [x, w]) <= TOL


def test_spatial_op_gradients():
    x = param((1, 2, 6, 6), 9)
    weights = np.random.default_rng(1).normal(size=(1, 2, 12, 12))
    assert gradient_check(lambda x: te.tsum(te.upsample_nearest_2x(x) * weights), [x]) <= TOL
    assert gradient_check(lambda x: te.tsum(te.pad_reflect(x, 1) ** 2.0), [x]) <= TOL
    assert gradient_check(lambda x: te.tsum(te.crop(x, 1, 2, 3, 3) ** 2.0), [x]) <= TOL


def test_conv2d_identity_kernel_returns_input():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 5, 5)), dtype="float64")
    kernel = np.zeros((3, 3, 3, 3))
    for c in range(3):
        kernel[c, c, 1, 1] = 1.0
    out = te.conv2d(x, Tensor(kernel, dtype="float64"), pad=1)
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
def test_conv2d_matches_nested_loops_on_ramp(stride, pad):
    x = np.arange(2 * 2 * 6 * 6, dtype=float).reshape(2, 2, 6, 6) / 10.0
    w = np.random.default_rng(3).normal(size=(3, 2, 3, 3))
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    size = (6 + 2 * pad - 3) // stride + 1
    expected = np.zeros((2, 3, size, size))
    for n in range(2):
        for o in range(3):
            for i in range(size):
                for j in range(size):
                    for c in range(2):
                        for a in range(3):
                            for b in range(3):
                                expected[n, o, i, j] += padded[n, c, i * stride + a, j * stride + b] * w[o, c, a, b]
    out = te.conv2d(Tensor(x, dtype="float64"), Tensor(w, dtype="float64"), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-12)
