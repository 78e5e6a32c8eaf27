import numpy as np
import pytest
from gradcheck import away_from_zero, distinct_windows, numeric_grad, rel_error
from hypothesis import given, settings
from hypothesis import strategies as st

from multiprize import nn
from multiprize.errors import ConfigError, ShapeError

from conftest import tiny_spec


@pytest.fixture
def f64():
    nn.set_precision("float64")


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_forward_matches_loop_oracle(stride, padding):
    gen = np.random.default_rng(stride * 10 + padding)
    x = gen.standard_normal((2, 3, 7, 7))
    w = gen.standard_normal((4, 3, 3, 3))
    np.testing.assert_allclose(nn.conv2d_forward(x, w, stride, padding), nn.conv2d_reference(x, w, stride, padding), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0)])
def test_conv_backward_finite_differences(stride, padding):
    gen = np.random.default_rng(7)
    x = gen.standard_normal((2, 2, 5, 5))
    w = gen.standard_normal((3, 2, 3, 3))
    y = nn.conv2d_forward(x, w, stride, padding)
    r = gen.standard_normal(y.shape)
    gx, gw = nn.conv2d_backward(x, w, r, stride, padding)
    loss = lambda: float(np.sum(nn.conv2d_forward(x, w, stride, padding) * r))
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-6
    assert rel_error(gw, numeric_grad(loss, w)) < 1e-6


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        nn.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 4, 3, 3)))


def test_conv_output_size():
    assert nn.conv_output_size(32, 3, 1, 1) == 32
    assert nn.conv_output_size(7, 3, 2, 0) == 3


def test_linear_backward_finite_differences():
    gen = np.random.default_rng(1)
    x, w = gen.standard_normal((4, 6)), gen.standard_normal((5, 6))
    r = gen.standard_normal((4, 5))
    gx, gw = nn.linear_backward(x, w, r)
    loss = lambda: float(np.sum(nn.linear_forward(x, w) * r))
    assert rel_error(gx, numeric_grad(loss, x)) < 1e-6
    assert rel_error(gw, numeric_grad(loss, w)) < 1e-6


def test_relu_gradient_is_zero_at_zero():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(nn.relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])


def test_relu_finite_differences():
    gen = np.random.default_rng(2)
    x = away_from_zero(gen, (3, 7))
    r = gen.standard_normal(x.shape)
    g = nn.relu_backward(x, r)
    assert rel_error(g, numeric_grad(lambda: float(np.sum(nn.relu_forward(x) * r)), x)) < 1e-6


def test_maxpool_values_and_tie_break():
    x = np.array([[[[1.0, 3.0], [3.0, 0.0]]]])
    out, idx = nn.maxpool2x2_forward(x)
    assert out.item() == 3.0 and idx.item() == 1
    g = nn.maxpool2x2_backward(idx, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(g[0, 0], [[0, 1], [0, 0]])


def test_maxpool_finite_differences():
    gen = np.random.default_rng(3)
    x = distinct_windows(gen, (2, 3, 4, 6))
    out, idx = nn.maxpool2x2_forward(x)
    r = gen.standard_normal(out.shape)
    g = nn.maxpool2x2_backward(idx, r)
    assert rel_error(g, numeric_grad(lambda: float(np.sum(nn.maxpool2x2_forward(x)[0] * r)), x)) < 1e-6


def test_maxpool_rejects_odd_extent():
    with pytest.raises(ShapeError):
        nn.maxpool2x2_forward(np.zeros((1, 1, 3, 4)))


def test_softmax_cross_entropy_finite_differences():
    gen = np.random.default_rng(4)
    z = gen.standard_normal((5, 4)) * 3
    y = gen.integers(0, 4, 5)
    _, g = nn.softmax_cross_entropy(z, y)
    assert rel_error(g, numeric_grad(lambda: nn.softmax_cross_entropy(z, y)[0], z)) < 1e-6


def test_softmax_cross_entropy_stable_and_validated():
    loss, _ = nn.softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ConfigError):
        nn.softmax_cross_entropy(np.zeros((1, 2)), np.array([2]))


def test_uniform_logits_loss_is_log_classes():
    loss, _ = nn.softmax_cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert loss == pytest.approx(np.log(10))


def test_network_backward_finite_differences(f64):
    gen = np.random.default_rng(5)
    spec = tiny_spec(shape=(2, 4, 4), widths=(3, 3), head=5)
    weights = [gen.standard_normal(s) * 0.5 for s in spec.weight_shapes()]
    x = gen.standard_normal((3, *spec.input_shape))
    y = gen.integers(0, 3, 3)

    def loss():
        return nn.softmax_cross_entropy(nn.network_forward(spec, weights, x), y)[0]

    logits, tape = nn.network_forward(spec, weights, x, keep_tape=True)
    _, g = nn.softmax_cross_entropy(logits, y)
    grads = nn.network_backward(spec, weights, tape, g)
    for w, gw in zip(weights, grads):
        assert rel_error(gw, numeric_grad(loss, w)) < 1e-6


def test_network_backward_partial_need_matches_full(f64):
    gen = np.random.default_rng(6)
    spec = tiny_spec()
    weights = [gen.standard_normal(s) for s in spec.weight_shapes()]
    x = gen.standard_normal((2, *spec.input_shape))
    logits, tape = nn.network_forward(spec, weights, x, keep_tape=True)
    g = gen.standard_normal(logits.shape)
    full = nn.network_backward(spec, weights, tape, g)
    last = nn.network_backward(spec, weights, tape, g, need=[False, False, False, True])
    assert last[:3] == [None, None, None]
    np.testing.assert_array_equal(last[3], full[3])


def test_conv_family_shapes():
    spec = nn.conv_family("conv6")
    assert [layer.kind for layer in spec.prunable_layers].count("conv2d") == 6
    assert spec.weight_shapes()[-2] == (256, 128 * 4 * 4)
    assert [g["feature_map_size"] for g in spec.conv_geometry()] == [32, 32, 16, 16, 8, 8]
    with pytest.raises(ConfigError):
        nn.conv_family("conv5")


def test_spec_dict_round_trip():
    spec = nn.conv_family("conv4", (1, 28, 28), 10)
    assert nn.NetworkSpec.from_dict(spec.to_dict()) == spec


def test_spec_rejects_bad_head():
    with pytest.raises(ConfigError):
        nn.NetworkSpec("x", (nn.LayerSpec("linear", in_features=4, out_features=3),), (1, 2, 2), 2)


def test_precision_context():
    with nn.precision("float64"):
        assert nn.get_dtype() is np.float64
    assert nn.get_dtype() is np.float32
    with pytest.raises(ConfigError):
        nn.set_precision("float16")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 6), st.sampled_from([1, 3]), st.integers(0, 1))
def test_conv_linearity_in_weights(n, m, size, k, padding):
    gen = np.random.default_rng(n * 100 + m * 10 + size)
    x = gen.standard_normal((1, n, size, size))
    w1, w2 = gen.standard_normal((2, m, n, k, k))
    lhs = nn.conv2d_forward(x, w1 + 2 * w2, 1, padding)
    rhs = nn.conv2d_forward(x, w1, 1, padding) + 2 * nn.conv2d_forward(x, w2, 1, padding)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
