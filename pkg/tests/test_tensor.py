import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grfnet.gradcheck import GradCase, check
from grfnet.tensor import (
    ConvConfig,
    Graph,
    GraphError,
    ShapeError,
    Tensor,
    activation,
    concat,
    conv,
    max_pool,
    mean_all,
    mul,
    pool,
    relu,
    sigmoid,
    split,
    sum_all,
    tanh,
)


def naive_conv3d(x, w, b, kernel, stride, dilation):
    """Direct summation over (b, z, y, x, cout) with explicit same padding."""
    B, D, H, W, cin = x.shape
    cout = w.shape[-1]
    outs, pads = [], []
    for n, k, s, d in zip((D, H, W), kernel, stride, dilation):
        o = math.ceil(n / s)
        total = max((o - 1) * s + (k - 1) * d + 1 - n, 0)
        outs.append(o)
        pads.append(total // 2)
    y = np.zeros((B, *outs, cout))
    for bi in range(B):
        for oz in range(outs[0]):
            for oy in range(outs[1]):
                for ox in range(outs[2]):
                    for co in range(cout):
                        acc = 0.0 if b is None else b[co]
                        for kz, ky, kx in itertools.product(*(range(k) for k in kernel)):
                            iz = oz * stride[0] + kz * dilation[0] - pads[0]
                            iy = oy * stride[1] + ky * dilation[1] - pads[1]
                            ix = ox * stride[2] + kx * dilation[2] - pads[2]
                            if 0 <= iz < D and 0 <= iy < H and 0 <= ix < W:
                                acc += np.dot(x[bi, iz, iy, ix], w[kz, ky, kx, :, co])
                        y[bi, oz, oy, ox, co] = acc
    return y


def test_conv_scalar_case():
    x = Tensor(np.full((1, 1, 1, 1), 2.0))
    w = Tensor(np.full((1, 1, 1, 1, 1), 3.0))
    out = conv(x, w, None, ConvConfig.make(1))
    assert out.data.ravel().tolist() == [6.0]


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 4, 5, 3, 1))
    w = np.zeros((3, 3, 3, 1, 1))
    w[1, 1, 1] = 1.0
    out = conv(Tensor(x), Tensor(w), None, ConvConfig.make(3))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize(
    "kernel,stride,dilation",
    [((3, 3, 3), (1, 1, 1), (2, 2, 2)), ((3, 1, 2), (2, 1, 2), (1, 3, 1)), ((1, 1, 1), (2, 2, 1), (1, 1, 1))],
)
def test_conv_matches_loop_oracle(kernel, stride, dilation):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 4, 5, 2))
    w = rng.standard_normal((*kernel, 2, 3))
    b = rng.standard_normal(3)
    cfg = ConvConfig(kernel, stride, dilation)
    out = conv(Tensor(x), Tensor(w), Tensor(b), cfg)
    np.testing.assert_allclose(out.data, naive_conv3d(x, w, b, kernel, stride, dilation), atol=1e-12, rtol=0)


def test_conv_unbatched_and_2d():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 6, 2))
    w = rng.standard_normal((3, 3, 2, 4))
    out = conv(Tensor(x), Tensor(w), None, ConvConfig.make(3, dims=2))
    assert out.shape == (5, 6, 4)
    # 2D case embedded as a depth-1 volume
    ref = naive_conv3d(x[None, None], w[None], None, (1, 3, 3), (1, 1, 1), (1, 1, 1))
    np.testing.assert_allclose(out.data, ref[0, 0], atol=1e-12)


def test_conv_errors():
    x = Tensor(np.ones((1, 4, 4, 4, 2)))
    with pytest.raises(ShapeError):
        conv(x, Tensor(np.ones((3, 3, 3, 3, 1))), None, ConvConfig.make(3))
    with pytest.raises(ShapeError):
        conv(x, Tensor(np.ones((3, 3, 3, 2, 1))), Tensor(np.ones(2)), ConvConfig.make(3))
    # valid padding with a kernel wider than the input leaves nothing
    cfg = ConvConfig((5, 5, 5), padding=((0, 0),) * 3)
    with pytest.raises(ShapeError):
        conv(x, Tensor(np.ones((5, 5, 5, 2, 1))), None, cfg)
    with pytest.raises(ValueError):
        ConvConfig.make(0)


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


@settings(max_examples=60, deadline=None)
@given(
    k=st.sampled_from([1, 2, 3]),
    s=st.sampled_from([1, 2]),
    d=st.sampled_from([1, 2, 3, 5]),
    n=st.integers(4, 9),
)
def test_same_padding_shape_law(k, s, d, n):
    cfg = ConvConfig.make(k, s, d, dims=1)
    assert cfg.output_shape((n,)) == (math.ceil(n / s),)
    x = Tensor(np.ones((1, n, 1)))
    out = conv(x, Tensor(np.ones((k, 1, 1))), None, cfg)
    assert out.shape == (1, math.ceil(n / s), 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_conv_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 1, 4, 3, 4, 2))
    w = Tensor(rng.standard_normal((3, 3, 3, 2, 2)))
    cfg = ConvConfig.make(3, 1, 2)
    lhs = conv(Tensor(a * x + b * y), w, None, cfg).data
    rhs = a * conv(Tensor(x), w, None, cfg).data + b * conv(Tensor(y), w, None, cfg).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_activations():
    zero = Tensor(np.zeros(1))
    assert sigmoid(zero).data[0] == 0.5
    assert tanh(zero).data[0] == 0.0
    x = np.random.default_rng(3).uniform(-30, 30, 1000)
    s = sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data
    np.testing.assert_allclose(s, 1.0, atol=1e-12)
    assert np.all(activation(Tensor(x), "relu").data >= 0)
    with pytest.raises(ValueError):
        activation(zero, "gelu")


def test_max_pool_constant_and_oracle():
    out = pool(Tensor(np.full((1, 4, 4, 4, 3), 7.0)), "max")
    assert out.shape == (1, 2, 2, 2, 3)
    assert np.all(out.data == 7.0)
    x = np.random.default_rng(4).standard_normal((2, 4, 4, 4, 3))
    ref = np.empty((2, 2, 2, 2, 3))
    for bi, i, j, k, c in itertools.product(range(2), range(2), range(2), range(2), range(3)):
        ref[bi, i, j, k, c] = max(
            x[bi, 2 * i + a, 2 * j + b, 2 * k + e, c] for a, b, e in itertools.product(range(2), repeat=3)
        )
    np.testing.assert_array_equal(max_pool(Tensor(x), 2).data, ref)


def test_max_pool_window_too_large():
    with pytest.raises(ShapeError):
        max_pool(Tensor(np.ones((1, 1, 4, 4, 1))), 2)


def test_max_pool_tie_gradient_goes_to_first():
    x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
    with Graph() as g:
        loss = sum_all(max_pool(x, 2))
    g.backward(loss)
    assert x.grad.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_global_average():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1))
    out = pool(x, "global_average")
    assert out.shape == x.shape
    assert np.all(out.data == 2.5)


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True, name="x")
    with Graph() as g:
        y = x * x
    grads = g.backward(y)
    assert grads["x"] == 6.0


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = x * 2.0
    with pytest.raises(GraphError):
        g.backward(y)
    with pytest.raises(GraphError):
        g.backward(Tensor(np.array(1.0)))


def test_gradients_accumulate():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for _ in range(2):
        with Graph() as g:
            loss = sum_all(x * x)
        g.backward(loss)
    np.testing.assert_array_equal(x.grad, [4.0, -8.0])


def test_no_graph_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert y._backward is None


def test_float32_stays_float32():
    x = Tensor(np.ones((1, 3, 3, 2), np.float32))
    w = Tensor(np.ones((3, 3, 2, 2), np.float32))
    y = relu(conv(x, w, None, ConvConfig.make(3, dims=2)) * 0.5 + 1.0)
    assert y.dtype == np.float32


def test_concat_split_roundtrip():
    rng = np.random.default_rng(5)
    a = Tensor(rng.standard_normal((2, 3, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
    with Graph() as g:
        c = concat([a, b])
        p, q = split(c, [2, 5])
        loss = sum_all(mul(p, 2.0)) + sum_all(q)
    g.backward(loss)
    np.testing.assert_array_equal(p.data, a.data)
    np.testing.assert_array_equal(a.grad, 2.0)
    np.testing.assert_array_equal(b.grad, 1.0)
    with pytest.raises(ShapeError):
        concat([a, Tensor(np.ones((3, 3, 1)))])
    with pytest.raises(ShapeError):
        split(c, [3, 3])


def _fd_case(seed, composite):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 6, size=3))
    cin, cout = rng.integers(1, 3, size=2)
    k = tuple(int(v) for v in rng.integers(1, 4, size=3))
    d = tuple(int(v) for v in rng.integers(1, 3, size=3))
    s = tuple(int(v) for v in rng.integers(1, 3, size=3))
    x = Tensor(rng.uniform(-1, 1, (1, *shape, cin)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (*k, cin, cout)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, cout), requires_grad=True)
    cfg = ConvConfig(k, s, d)
    proj = None

    def loss():
        nonlocal proj
        y = conv(x, w, b, cfg)
        if composite:
            y = sigmoid(y)
        if proj is None:
            proj = rng.standard_normal(y.shape)
        return sum_all(mul(y, proj))

    return GradCase("conv", {"x": x, "w": w, "b": b}, loss)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("composite", [False, True])
def test_conv_gradient_finite_differences(seed, composite):
    errs = check(_fd_case(seed, composite))
    assert max(errs.values()) < 1e-6, errs


@pytest.mark.parametrize("op", ["sigmoid", "tanh", "relu", "maxpool", "gap", "mean", "sub", "bcast"])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(6)
    x = Tensor(rng.uniform(-1, 1, (1, 4, 4, 2)), requires_grad=True)
    y = Tensor(rng.uniform(-1, 1, (1, 1, 1, 2)), requires_grad=True)
    proj = rng.standard_normal((1, 4, 4, 2))

    def out():
        if op == "sigmoid":
            return sigmoid(x)
        if op == "tanh":
            return tanh(x)
        if op == "relu":
            return relu(x)
        if op == "maxpool":
            return max_pool(x, 2)
        if op == "gap":
            return pool(x, "global_average")
        if op == "mean":
            return mean_all(x * x) + x * 0.0
        if op == "sub":
            return x - y
        return x * y + y

    def loss():
        r = out()
        return sum_all(mul(r, proj[tuple(slice(0, n) for n in r.shape)]))

    errs = check(GradCase(op, {"x": x, "y": y}, loss)) if op in ("sub", "bcast") else check(GradCase(op, {"x": x}, loss))
    assert max(errs.values()) < 1e-6, errs


def test_determinism():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((1, 4, 4, 4, 3)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 3, 3, 3, 2)), requires_grad=True)
        with Graph() as g:
            loss = sum_all(tanh(conv(x, w, None, ConvConfig.make(3, 2))))
        g.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()
