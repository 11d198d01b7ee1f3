import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from apcsim import kernels
from apcsim.errors import EmptyTape, LabelOutOfRange, NonFinite, ShapeMismatch
from apcsim.tensor import (
    GradientTape, LayerKind, LayerSpec, as_tensor, backward, forward, init_weights, shape_chain,
    softmax, softmax_cross_entropy,
)

from oracles import check_layers, naive_conv2d, naive_maxpool, numeric_grad, rel_error


def test_identity_dense_forward():
    layers = [LayerSpec.dense(2, 2)]
    weights = [{"weight": np.eye(2), "bias": np.zeros(2)}]
    out = forward(layers, weights, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(out[-1], [1.0, 2.0])


def test_relu_forward():
    out = forward([LayerSpec.relu()], [{}], np.array([-1.0, 0.0, 3.5]))
    np.testing.assert_array_equal(out[-1], [0.0, 0.0, 3.5])


def test_conv_all_ones():
    layer = LayerSpec.conv2d(1, 1, 2)
    w = {"weight": np.ones((1, 1, 2, 2)), "bias": np.zeros(1)}
    out = forward([layer], [w], np.ones((1, 3, 3)))[-1]
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 4.0))


def test_linear_map_gradients():
    layers = [LayerSpec.dense(2, 1)]
    weights = [{"weight": np.array([[2.0, 3.0]]), "bias": np.zeros(1)}]
    tape = GradientTape()
    forward(layers, weights, np.array([1.0, 1.0]), tape=tape)
    g = backward(tape, np.array([1.0]))
    np.testing.assert_array_equal(g.input, [2.0, 3.0])
    np.testing.assert_array_equal(g.params[0]["weight"], [[1.0, 1.0]])


def test_relu_subgradient():
    tape = GradientTape()
    forward([LayerSpec.relu()], [{}], np.array([-1.0, 2.0]), tape=tape)
    np.testing.assert_array_equal(backward(tape, np.ones(2)).input, [0.0, 1.0])


def test_relu_gradient_at_zero_is_zero():
    tape = GradientTape()
    forward([LayerSpec.relu()], [{}], np.array([0.0]), tape=tape)
    assert backward(tape, np.ones(1)).input[0] == 0.0


def test_maxpool_tie_routes_to_first():
    tape = GradientTape()
    x = np.array([[[1.0, 1.0], [1.0, 0.0]]])
    forward([LayerSpec.maxpool2d(2)], [{}], x, tape=tape)
    g = backward(tape, np.ones((1, 1, 1))).input
    np.testing.assert_array_equal(g, [[[1.0, 0.0], [0.0, 0.0]]])


def test_empty_tape():
    with pytest.raises(EmptyTape):
        backward(GradientTape(), np.ones(2))


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        forward([LayerSpec.dense(3, 2)], init_weights([LayerSpec.dense(3, 2)], 1), np.ones(2))
    with pytest.raises(ShapeMismatch):
        forward([LayerSpec.relu()], [{}], np.ones(3), input_shape=(4,))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_output():
    layers = [LayerSpec.dense(1, 1)]
    weights = [{"weight": np.array([[1e308]]), "bias": np.zeros(1)}]
    with pytest.raises(NonFinite):
        forward(layers, weights, np.array([1e308]))


def test_loss_gradient_shape_checked():
    tape = GradientTape()
    forward([LayerSpec.relu()], [{}], np.ones(3), tape=tape)
    with pytest.raises(ShapeMismatch):
        backward(tape, np.ones(2))


def test_layer_param_validation():
    with pytest.raises(ValueError):
        LayerSpec.dense(0, 2)
    with pytest.raises(ValueError):
        LayerSpec.conv2d(1, 1, 2, padding=-1)
    with pytest.raises(ValueError):
        LayerSpec.from_dict({"kind": "Dense", "in_features": 2})
    spec = LayerSpec.from_dict({"kind": "Conv2d", "in_channels": 1, "out_channels": 2,
                                "kernel_h": 3, "kernel_w": 3, "stride": 1, "padding": 0})
    assert LayerSpec.from_dict(spec.to_dict()) == spec


def test_softmax_cross_entropy_examples():
    loss, grad = softmax_cross_entropy(np.array([0.0, 0.0]), 0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-15)
    loss, grad = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)
    assert np.isfinite(grad).all()
    with pytest.raises(LabelOutOfRange):
        softmax_cross_entropy(np.array([0.0, 0.0]), 2)
    with pytest.raises(ShapeMismatch):
        softmax_cross_entropy(np.array([0.0]), 0)


@pytest.mark.parametrize("seed", range(10))
def test_softmax_cross_entropy_fd(seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1, 1, 5)
    label = int(rng.integers(5))
    _, grad = softmax_cross_entropy(z, label)
    num = numeric_grad(lambda: softmax_cross_entropy(z, label)[0], z)
    assert rel_error(grad, num) < 1e-6
    assert abs(grad.sum()) < 1e-12


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_is_probability_vector(values):
    p = softmax(np.array(values))
    assert ((p >= 0) & (p <= 1)).all()
    assert abs(p.sum() - 1.0) <= 1e-12


def test_forward_deterministic():
    layers = [LayerSpec.conv2d(1, 2, 3), LayerSpec.relu(), LayerSpec.flatten(), LayerSpec.dense(18, 3)]
    weights = init_weights(layers, 99)
    x = np.random.default_rng(0).uniform(-1, 1, (1, 5, 5))
    a = forward(layers, weights, x)
    b = forward(layers, init_weights(layers, 99), x.copy())
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_init_is_glorot_bounded_and_seeded():
    layers = [LayerSpec.dense(6, 4), LayerSpec.conv2d(2, 3, 3)]
    w = init_weights(layers, 5)
    assert np.abs(w[0]["weight"]).max() <= math.sqrt(6 / 10)
    assert np.abs(w[1]["weight"]).max() <= math.sqrt(6 / (18 + 27))
    assert (w[0]["bias"] == 0).all()
    assert all((a["weight"] == b["weight"]).all() for a, b in zip(w, init_weights(layers, 5)))
    assert not (w[0]["weight"] == init_weights(layers, 6)[0]["weight"]).all()


def _shape_cases():
    for h in range(1, 9):
        for wd in range(1, 9):
            for k in range(1, 4):
                for stride in (1, 2, 3):
                    for pad in (0, 1):
                        yield h, wd, k, stride, pad


def test_output_shape_table_conv_and_pool():
    rng = np.random.default_rng(3)
    checked = 0
    for h, wd, k, stride, pad in _shape_cases():
        x = rng.uniform(-1, 1, (2, h, wd))
        conv = LayerSpec.conv2d(2, 2, k, k, stride, pad)
        if h + 2 * pad < k or wd + 2 * pad < k:
            with pytest.raises(ShapeMismatch):
                conv.output_shape(x.shape)
        else:
            w = init_weights([conv], h * 100 + wd)
            out = forward([conv], w, x)[-1]
            ref = naive_conv2d(x, w[0]["weight"], w[0]["bias"], stride, pad)
            assert out.shape == conv.output_shape(x.shape) == ref.shape
            np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)
            checked += 1
        pool = LayerSpec.maxpool2d(k, stride)
        if h < k or wd < k:
            with pytest.raises(ShapeMismatch):
                pool.output_shape(x.shape)
        else:
            out = forward([pool], [{}], x)[-1]
            ref = naive_maxpool(x, k, stride)
            assert out.shape == pool.output_shape(x.shape) == ref.shape
            np.testing.assert_array_equal(out, ref)
    assert checked > 500


def test_shape_chain_dense_flatten_softmax():
    layers = [LayerSpec.conv2d(1, 4, 3), LayerSpec.maxpool2d(2), LayerSpec.flatten(),
              LayerSpec.dense(36, 5), LayerSpec.softmax()]
    assert shape_chain(layers, (1, 8, 8)) == [(1, 8, 8), (4, 6, 6), (4, 3, 3), (36,), (5,), (5,)]


# Gradient checks.  Inputs are resampled away from ReLU/maxpool kinks so the
# central difference does not straddle a non-differentiable point.

def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.uniform(-1, 1, shape)
    while (np.abs(x) < margin).any():
        x = rng.uniform(-1, 1, shape)
    return x


def _distinct(rng, shape, margin=1e-3):
    while True:
        x = rng.uniform(-1, 1, shape)
        v = np.sort(x.ravel())
        if (np.diff(v) > margin).all():
            return x


def gradient_case(kind: LayerKind, seed: int):
    rng = np.random.default_rng(seed)
    if kind is LayerKind.DENSE:
        layers = [LayerSpec.dense(4, 3)]
        w = init_weights(layers, seed)
        w[0]["bias"] = rng.uniform(-1, 1, 3)
        return layers, w, rng.uniform(-1, 1, 4), rng
    if kind is LayerKind.CONV2D:
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        layers = [LayerSpec.conv2d(2, 2, 3, 2, stride, pad)]
        w = init_weights(layers, seed)
        w[0]["bias"] = rng.uniform(-1, 1, 2)
        return layers, w, rng.uniform(-1, 1, (2, 5, 4)), rng
    if kind is LayerKind.RELU:
        return [LayerSpec.relu()], [{}], _away_from_zero(rng, (6,)), rng
    if kind is LayerKind.MAXPOOL2D:
        return [LayerSpec.maxpool2d(2)], [{}], _distinct(rng, (2, 4, 4)), rng
    if kind is LayerKind.FLATTEN:
        return [LayerSpec.flatten()], [{}], rng.uniform(-1, 1, (2, 2, 3)), rng
    if kind is LayerKind.SOFTMAX:
        return [LayerSpec.softmax()], [{}], rng.uniform(-1, 1, 5), rng
    raise ValueError(kind)


@pytest.mark.parametrize("kind", list(LayerKind))
@pytest.mark.parametrize("seed", range(5))
def test_layer_gradients_fd(kind, seed):
    layers, weights, x, rng = gradient_case(kind, seed)
    assert check_layers(layers, weights, x, rng) < 1e-6


def mlp_case(seed):
    rng = np.random.default_rng(seed)
    layers = [LayerSpec.dense(3, 4), LayerSpec.relu(), LayerSpec.dense(4, 2)]
    while True:
        weights = init_weights(layers, seed)
        weights[0]["bias"] = rng.uniform(-0.5, 0.5, 4)
        x = rng.uniform(-1, 1, 3)
        pre = forward(layers, weights, x)[0]
        if (np.abs(pre) > 1e-3).all():
            return layers, weights, x, rng
        seed += 1000


@pytest.mark.parametrize("seed", range(10))
def test_two_layer_mlp_gradients_fd(seed):
    layers, weights, x, rng = mlp_case(seed)
    assert check_layers(layers, weights, x, rng) < 1e-6


def test_backward_upto_skips_trailing_layers():
    layers = [LayerSpec.dense(2, 3), LayerSpec.softmax()]
    weights = init_weights(layers, 1)
    tape = GradientTape()
    forward(layers, weights, np.array([0.3, -0.2]), tape=tape)
    g = backward(tape, np.array([1.0, 0.0, 0.0]), upto=0)
    np.testing.assert_allclose(g.input, weights[0]["weight"][0])
    assert g.params[1] == {}


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="compiled kernels not built")
@pytest.mark.parametrize("seed", range(8))
def test_backends_agree(seed):
    backends = kernels.available_backends()
    c, py = backends["cython"], backends["numpy"]
    rng = np.random.default_rng(seed)
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.uniform(-1, 1, (3, 2, 7, 6))
    w = rng.uniform(-1, 1, (4, 2, 3, 2))
    b = rng.uniform(-1, 1, 4)
    yc, yp = c.conv2d_forward(x, w, b, stride, pad), py.conv2d_forward(x, w, b, stride, pad)
    np.testing.assert_allclose(yc, yp, atol=1e-12)
    gy = rng.uniform(-1, 1, yc.shape)
    for a, b_ in zip(c.conv2d_backward(x, w, gy, stride, pad), py.conv2d_backward(x, w, gy, stride, pad)):
        np.testing.assert_allclose(a, b_, atol=1e-12)
    xr = np.round(rng.uniform(-1, 1, (2, 3, 6, 6)), 1)  # rounding forces ties
    (mc, ic), (mp, ip) = c.maxpool2d_forward(xr, 2, 2), py.maxpool2d_forward(xr, 2, 2)
    np.testing.assert_array_equal(mc, mp)
    np.testing.assert_array_equal(ic, ip)
    gm = rng.uniform(-1, 1, mc.shape)
    np.testing.assert_array_equal(c.maxpool2d_backward(gm, ic, xr.shape), py.maxpool2d_backward(gm, ip, xr.shape))
    a = np.concatenate([xr.ravel(), np.zeros(5)])
    assert c.activation_stats(a)[0] == py.activation_stats(a)[0]
    assert c.abs_entropy(a) == pytest.approx(py.abs_entropy(a), abs=1e-12)
    blob = rng.bytes(300)
    assert c.fnv1a64(blob) == py.fnv1a64(blob)


def test_fnv1a_known_vectors():
    # Published FNV-1a 64-bit test vectors.
    assert kernels.fnv1a64(b"") == 0xCBF29CE484222325
    assert kernels.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert kernels.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_as_tensor_guards():
    with pytest.raises(NonFinite):
        as_tensor([1.0, float("nan")])
    with pytest.raises(ShapeMismatch):
        as_tensor([1.0, 2.0, 3.0], (2, 2))
    assert as_tensor([1, 2, 3, 4], (2, 2)).dtype == np.float64
