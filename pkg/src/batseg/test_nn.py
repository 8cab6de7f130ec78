import numpy as np
from pytest import mark

from . import nn
from .nn import ConvGeometry


def numeric_grad(f, x, h=1e-6):
    """Central differences of the scalar f() with respect to x, in place."""
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def direct_conv(x, w, b, stride, dilation, padding):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    g = ConvGeometry(stride, dilation, padding)
    ho, wo = g.output_size(h, kh), g.output_size(wd, kw)
    out = np.zeros((n, ho, wo, cout))
    for s in range(n):
        for r in range(ho):
            for c in range(wo):
                for o in range(cout):
                    acc = b[o]
                    for i in range(kh):
                        for j in range(kw):
                            rr = r * stride + i * dilation - padding
                            cc = c * stride + j * dilation - padding
                            if 0 <= rr < h and 0 <= cc < wd:
                                acc += x[s, rr, cc] @ w[i, j, :, o]
                    out[s, r, c, o] = acc
    return out


@mark.parametrize(
    "size, stride, dilation, padding",
    [(8, 2, 1, 1), (7, 1, 1, 1), (4, 1, 3, 3), (4, 1, 6, 6), (5, 2, 2, 0)],
)
def test_conv2d_matches_direct_loops(size, stride, dilation, padding):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, size, size, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    got = nn.conv2d(x, w, b, ConvGeometry(stride, dilation, padding))
    expected = direct_conv(x, w, b, stride, dilation, padding)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


@mark.parametrize("geometry", [ConvGeometry(2, 1, 1), ConvGeometry(1, 3, 3)])
def test_conv2d_backward(geometry):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    out_shape = nn.conv2d(x, w, b, geometry).shape
    r = rng.normal(size=out_shape)

    def f():
        return (nn.conv2d(x, w, b, geometry) * r).sum()

    dx, dw, db = nn.conv2d_backward(r, x, w, geometry)
    np.testing.assert_allclose(dx, numeric_grad(f, x), atol=1e-7)
    np.testing.assert_allclose(dw, numeric_grad(f, w), atol=1e-7)
    np.testing.assert_allclose(db, numeric_grad(f, b), atol=1e-7)


def test_layer_norm_backward():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 6))
    gamma = rng.normal(size=6)
    beta = rng.normal(size=6)
    r = rng.normal(size=x.shape)

    def f():
        return (nn.layer_norm(x, gamma, beta)[0] * r).sum()

    _, cache = nn.layer_norm(x, gamma, beta)
    dx, dgamma, dbeta = nn.layer_norm_backward(r, cache, gamma)
    np.testing.assert_allclose(dx, numeric_grad(f, x), atol=1e-7)
    np.testing.assert_allclose(dgamma, numeric_grad(f, gamma), atol=1e-7)
    np.testing.assert_allclose(dbeta, numeric_grad(f, beta), atol=1e-7)


def test_layer_norm_normalizes():
    x = np.random.default_rng(3).normal(3, 5, size=(4, 16))
    y, _ = nn.layer_norm(x, np.ones(16), np.zeros(16))
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=-1), 1, atol=1e-4)


def test_linear_backward():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=5)
    r = rng.normal(size=(2, 3, 5))

    def f():
        return (nn.linear(x, w, b) * r).sum()

    dx, dw, db = nn.linear_backward(r, x, w)
    np.testing.assert_allclose(dx, numeric_grad(f, x), atol=1e-7)
    np.testing.assert_allclose(dw, numeric_grad(f, w), atol=1e-7)
    np.testing.assert_allclose(db, numeric_grad(f, b), atol=1e-7)


def test_gelu():
    x = np.linspace(-4, 4, 41)
    assert nn.gelu(np.zeros(3)).tolist() == [0.0, 0.0, 0.0]
    h = 1e-6
    numeric = (nn.gelu(x + h) - nn.gelu(x - h)) / (2 * h)
    np.testing.assert_allclose(nn.gelu_grad(x), numeric, atol=1e-8)


def test_softmax():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4, 7)) * 10
    y = nn.softmax(x)
    np.testing.assert_allclose(y.sum(axis=-1), 1, atol=1e-12)
    r = rng.normal(size=x.shape)

    def f():
        return (nn.softmax(x) * r).sum()

    np.testing.assert_allclose(
        nn.softmax_backward(r, y), numeric_grad(f, x), atol=1e-6
    )


def test_heads_round_trip():
    x = np.arange(2 * 5 * 8, dtype=float).reshape(2, 5, 8)
    heads = nn.split_heads(x, 4)
    assert heads.shape == (2, 4, 5, 2)
    np.testing.assert_array_equal(heads[:, 1], x[..., 2:4])
    np.testing.assert_array_equal(nn.merge_heads(heads), x)


def test_bilinear_matrix_rows_sum_to_one():
    m = nn.bilinear_matrix(4, 16)
    assert m.shape == (64, 4)
    np.testing.assert_allclose(m.sum(axis=1), 1, atol=1e-15)


def test_upsample_constant_and_adjoint():
    rng = np.random.default_rng(6)
    np.testing.assert_allclose(nn.upsample(np.full((1, 4, 4), 2.5), 16), 2.5)

    x = rng.normal(size=(2, 4, 4))
    y = rng.normal(size=(2, 64, 64))
    lhs = (nn.upsample(x, 16) * y).sum()
    rhs = (x * nn.upsample_backward(y, 16)).sum()
    assert abs(lhs - rhs) < 1e-10
