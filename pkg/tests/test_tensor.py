import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ecoweednet import ops
from ecoweednet.errors import DegenerateChannelError, DimensionError, UnknownValueError
from ecoweednet.tensor import GradTape, Parameter, Tensor, backward, default_dtype, get_default_dtype

from gradcheck import check_gradients

TOL = 1e-4


def rand(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# -- construction ----------------------------------------------------------


def test_default_dtype_is_single_and_switchable():
    assert get_default_dtype() == np.float32
    assert Tensor([1, 2]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_feature_map_length_matches_shape():
    x = Tensor(np.zeros((2, 3, 4, 5)))
    assert x.size == 2 * 3 * 4 * 5


# -- conv2d ----------------------------------------------------------------


def test_conv_identity_1x1_is_bitwise_identity():
    rng = np.random.default_rng(0)
    x = t64(rand(rng, 2, 3, 5, 4))
    w = t64(np.eye(3).reshape(3, 3, 1, 1))
    y = ops.conv2d(x, w, t64(np.zeros(3)))
    assert_array_equal(y.data, x.data)


def test_conv_hand_sum():
    x = t64([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = t64(np.ones((1, 1, 2, 2)))
    assert_array_equal(ops.conv2d(x, w).data, [[[[10.0]]]])


def test_conv_zero_input_gives_bias():
    x = t64(np.zeros((1, 2, 4, 4)))
    w = t64(np.random.default_rng(1).normal(size=(3, 2, 3, 3)))
    y = ops.conv2d(x, w, t64([0.5, -1.0, 2.0]), padding=1)
    assert_array_equal(y.data[0, 1], np.full((4, 4), -1.0))
    assert_array_equal(y.data[0, 2], np.full((4, 4), 2.0))


@pytest.mark.parametrize("h,k,s,p", [(7, 3, 1, 1), (7, 3, 2, 1), (8, 3, 2, 0), (6, 1, 1, 0), (9, 5, 3, 2)])
def test_conv_output_size(h, k, s, p):
    x = t64(np.zeros((1, 2, h, h + 1)))
    w = t64(np.zeros((4, 2, k, k)))
    y = ops.conv2d(x, w, stride=s, padding=p)
    assert y.shape == (1, 4, (h + 2 * p - k) // s + 1, (h + 1 + 2 * p - k) // s + 1)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rand(rng, 2, 4, 6, 5)
    w = rand(rng, 6, 2, 3, 3)
    b = rand(rng, 6)
    y = ops.conv2d(t64(x), t64(w), t64(b), stride=2, padding=1, groups=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(6):
            g = o // 3
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    patch = xp[n, 2 * g:2 * g + 2, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_conv_channel_mismatch_names_axis():
    x = t64(np.zeros((1, 3, 4, 4)))
    with pytest.raises(DimensionError) as err:
        ops.conv2d(x, t64(np.zeros((2, 4, 3, 3))))
    assert err.value.axis == "channels"


def test_conv_rejects_bad_stride_and_padding():
    x = t64(np.zeros((1, 1, 4, 4)))
    w = t64(np.zeros((1, 1, 3, 3)))
    with pytest.raises(ValueError):
        ops.conv2d(x, w, stride=0)
    with pytest.raises(ValueError):
        ops.conv2d(x, w, padding=-1)


def test_conv_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        ops.conv2d(t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 3, 3))))


# -- channel moments -------------------------------------------------------


def literal_loo(channel):
    flat = channel.reshape(-1)
    mu = np.empty_like(flat)
    var = np.empty_like(flat)
    for i in range(flat.size):
        rest = np.delete(flat, i)
        mu[i] = rest.mean()
        var[i] = np.mean((rest - mu[i]) ** 2)
    return mu.reshape(channel.shape), var.reshape(channel.shape)


def test_moments_two_neurons():
    mu, var = ops.channel_moments(t64([[[[1.0, 3.0]]]]))
    assert mu.data[0, 0, 0, 0] == 3.0
    assert var.data[0, 0, 0, 0] == 0.0


def test_moments_four_neurons():
    mu, var = ops.channel_moments(t64([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert_allclose(mu.data[0, 0, 1, 1], 2.0, rtol=1e-15)
    assert_allclose(var.data[0, 0, 1, 1], 2.0 / 3.0, rtol=1e-14)


@pytest.mark.parametrize("mode", ["leave-one-out", "whole-channel"])
def test_moments_constant_channel(mode):
    mu, var = ops.channel_moments(t64(np.full((1, 2, 3, 3), 1.7)), mode)
    assert_allclose(mu.data, 1.7, rtol=1e-15)
    assert_allclose(var.data, 0.0, atol=1e-15)


def test_moments_match_literal_loop():
    rng = np.random.default_rng(3)
    for _ in range(20):
        h, w = rng.integers(1, 9, size=2)
        if h * w < 2:
            continue
        x = rand(rng, 1, 3, h, w)
        mu, var = ops.channel_moments(t64(x))
        for c in range(3):
            ref_mu, ref_var = literal_loo(x[0, c])
            assert_allclose(mu.data[0, c], ref_mu, atol=1e-10)
            assert_allclose(var.data[0, c], ref_var, atol=1e-10)


def test_moments_whole_channel_uses_m_minus_one():
    x = np.array([1.0, 2.0, 4.0, 9.0]).reshape(1, 1, 2, 2)
    mu, var = ops.channel_moments(t64(x), "whole-channel")
    assert_allclose(mu.data.reshape(()), 4.0)
    assert_allclose(var.data.reshape(()), np.var(x, ddof=1))


def test_moments_degenerate_channel():
    with pytest.raises(DegenerateChannelError):
        ops.channel_moments(t64(np.ones((1, 1, 1, 1))))


# -- pointwise and structural ops -----------------------------------------


def test_symmetric_sigmoid_values():
    assert ops.symmetric_sigmoid(t64([0.0])).data[0] == 0.0
    x = np.linspace(-30, 30, 121)
    assert_array_equal(ops.symmetric_sigmoid(t64(-x)).data, -ops.symmetric_sigmoid(t64(x)).data)
    assert_allclose(ops.symmetric_sigmoid(t64(x)).data, 1 / (1 + np.exp(-x)) - 0.5, atol=1e-15)


def test_sigmoid_is_stable_for_large_inputs():
    y = ops.sigmoid(t64([-800.0, 800.0])).data
    assert np.all(np.isfinite(y))
    assert_allclose(y, [0.0, 1.0])


def test_upsample_nearest():
    y = ops.upsample_nearest(t64([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
    assert_array_equal(y.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])


def test_maxpool_basic_and_padded():
    assert_array_equal(ops.maxpool2d(t64([[[[1.0, 2.0], [3.0, 4.0]]]]), 2, 2).data, [[[[4.0]]]])
    x = t64(-np.arange(9.0).reshape(1, 1, 3, 3))
    y = ops.maxpool2d(x, 3, 1, 1)
    assert y.shape == (1, 1, 3, 3)
    assert y.data[0, 0, 2, 2] == -4.0  # padding never wins


def test_concat_then_slice_recovers_inputs():
    rng = np.random.default_rng(4)
    a, b = t64(rand(rng, 2, 3, 4, 4)), t64(rand(rng, 2, 5, 4, 4))
    y = ops.concat_channels([a, b])
    assert_array_equal(y[:, :3].data, a.data)
    assert_array_equal(y[:, 3:].data, b.data)


def test_concat_mismatch_names_axis():
    with pytest.raises(DimensionError) as err:
        ops.concat_channels([t64(np.zeros((1, 1, 4, 4))), t64(np.zeros((1, 1, 4, 2)))])
    assert err.value.axis == "width"


def test_elementwise_allows_only_full_or_channel_shapes():
    x = t64(np.ones((2, 3, 4, 4)))
    assert ops.elementwise(x, t64([1.0, 2.0, 3.0]), "mul").data[0, 2, 0, 0] == 3.0
    assert ops.elementwise(x, t64(np.ones((1, 3, 1, 1))), "add").data.max() == 2.0
    with pytest.raises(DimensionError) as err:
        ops.elementwise(x, t64(np.ones((2, 3, 4, 1))), "add")
    assert err.value.axis == "width"
    with pytest.raises(DimensionError):
        ops.elementwise(x, t64(np.ones(4)), "mul")


def test_activation_lookup():
    with pytest.raises(ValueError):
        ops.activation(t64([1.0]), "gelu")


# -- tape ------------------------------------------------------------------


def test_sum_gradient_is_ones():
    x = Parameter(np.random.default_rng(0).normal(size=(2, 3)))
    with GradTape() as tape:
        loss = ops.sum(x)
    grads = backward(tape, loss)
    assert_array_equal(grads[x], np.ones((2, 3)))


def test_square_gradient_is_two_x():
    x = Parameter(np.random.default_rng(0).normal(size=(1, 2, 3, 3)))
    with GradTape() as tape:
        loss = ops.sum(ops.elementwise(x, x, "mul"))
    (g,) = tape.gradient(loss, [x])
    assert_allclose(g, 2 * x.data, rtol=1e-6)


def test_gradient_accumulates_over_consumers():
    with default_dtype(np.float64):
        x = Parameter([1.5])
        with GradTape() as tape:
            y = x * x + x * 3.0 + ops.exp(x)
            loss = ops.sum(y)
        (g,) = tape.gradient(loss, [x])
    assert_allclose(g, [2 * 1.5 + 3 + np.exp(1.5)], rtol=1e-14)


def test_unknown_value_error():
    x = Parameter([1.0])
    with GradTape() as tape:
        ops.sum(x * 2.0)
    stranger = Tensor([3.0])
    with pytest.raises(UnknownValueError):
        tape.gradient(stranger, [x])


def test_unrelated_source_gets_zero():
    x, z = Parameter([1.0]), Parameter([2.0, 3.0])
    with GradTape() as tape:
        loss = ops.sum(x * 2.0)
    gx, gz = tape.gradient(loss, [x, z])
    assert_array_equal(gz, [0.0, 0.0])
    assert_array_equal(gx, [2.0])


def test_nested_tapes_both_record():
    x = Parameter([2.0])
    with GradTape() as outer:
        with GradTape() as inner:
            loss = ops.sum(x * x)
    assert_allclose(inner.gradient(loss, [x])[0], [4.0])
    assert_allclose(outer.gradient(loss, [x])[0], [4.0])


def test_ops_outside_tape_are_not_recorded():
    x = Parameter([1.0])
    y = ops.sum(x * 2.0)
    with GradTape() as tape:
        pass
    with pytest.raises(UnknownValueError):
        tape.gradient(y, [x])


def test_finite_outputs_on_finite_inputs():
    rng = np.random.default_rng(5)
    x = t64(rand(rng, 2, 4, 6, 6, lo=-50, hi=50))
    for y in (
        ops.sigmoid(x), ops.silu(x), ops.symmetric_sigmoid(x), ops.softmax(x, axis=1),
        ops.log_softmax(x, axis=-1), ops.bce_with_logits(x, np.ones(x.shape)),
        ops.channel_moments(x)[1], ops.maxpool2d(x, 5, 1, 2),
    ):
        assert np.all(np.isfinite(y.data))


# -- finite-difference checks (double precision) ---------------------------

RNG = np.random.default_rng(11)
A = rand(RNG, 2, 3, 4, 4)
B = rand(RNG, 2, 3, 4, 4)
POS = rand(RNG, 2, 3, 4, 4, lo=0.5, hi=2.0)
W = rand(RNG, 3, 3, 1, 1)


def weighted(y):
    # a fixed random projection so every output element matters
    r = np.random.default_rng(99).normal(size=y.shape)
    return ops.sum(y * r)


UNARY_CASES = {
    "neg": (lambda x: weighted(-x), A),
    "power": (lambda x: weighted(ops.power(x, 3.0)), A),
    "exp": (lambda x: weighted(ops.exp(x)), A),
    "log": (lambda x: weighted(ops.log(x)), POS),
    "arctan": (lambda x: weighted(ops.arctan(x)), A),
    "clamp_min": (lambda x: weighted(ops.clamp_min(x, 0.1)), A),
    "sum_axis": (lambda x: weighted(ops.sum(x, axis=(1, 3), keepdims=True)), A),
    "mean": (lambda x: weighted(ops.mean(x, axis=2)), A),
    "reshape": (lambda x: weighted(ops.reshape(x, (6, 16))), A),
    "transpose": (lambda x: weighted(ops.transpose(x, (3, 1, 0, 2))), A),
    "getitem_basic": (lambda x: weighted(x[:, 1:, ::2]), A),
    "getitem_fancy": (lambda x: weighted(x[np.array([0, 1, 1]), np.array([2, 0, 2])]), A),
    "softmax": (lambda x: weighted(ops.softmax(x, axis=1)), A),
    "log_softmax": (lambda x: weighted(ops.log_softmax(x, axis=-1)), A),
    "sigmoid": (lambda x: weighted(ops.sigmoid(x)), A),
    "symmetric_sigmoid": (lambda x: weighted(ops.symmetric_sigmoid(x)), A),
    "silu": (lambda x: weighted(ops.silu(x)), A),
    "identity": (lambda x: weighted(ops.identity(x)), A),
    "maxpool": (lambda x: weighted(ops.maxpool2d(x, 3, 1, 1)), A),
    "maxpool_strided": (lambda x: weighted(ops.maxpool2d(x, 2, 2)), A),
    "upsample": (lambda x: weighted(ops.upsample_nearest(x, 2)), A),
    "moments_loo": (lambda x: weighted(ops.concat(list(ops.channel_moments(x)), axis=1)), A),
    "moments_whole": (lambda x: weighted(ops.concat(list(ops.channel_moments(x, "whole-channel")), axis=1)), A),
    "bce": (lambda x: ops.sum(ops.bce_with_logits(x, (B > 0).astype(float))), A),
}


@pytest.mark.parametrize("name", sorted(UNARY_CASES))
def test_unary_gradients(name):
    fn, x = UNARY_CASES[name]
    assert check_gradients(fn, x) < TOL


BINARY_CASES = {
    "add": lambda x, y: weighted(x + y),
    "sub": lambda x, y: weighted(x - y),
    "mul": lambda x, y: weighted(x * y),
    "div": lambda x, y: weighted(x / (y * y + 0.5)),
    "maximum": lambda x, y: weighted(ops.maximum(x, y)),
    "minimum": lambda x, y: weighted(ops.minimum(x, y)),
    "concat": lambda x, y: weighted(ops.concat_channels([x, y])),
    "elementwise_mul": lambda x, y: weighted(ops.elementwise(x, y, "mul")),
    "broadcast_add": lambda x, y: weighted(x + y[:1, :, :1]),
}


@pytest.mark.parametrize("name", sorted(BINARY_CASES))
def test_binary_gradients(name):
    assert check_gradients(BINARY_CASES[name], A, B) < TOL


def test_matmul_gradient():
    rng = np.random.default_rng(12)
    assert check_gradients(lambda a, b: weighted(ops.matmul(a, b)), rand(rng, 2, 3, 4), rand(rng, 2, 4, 5)) < TOL


@pytest.mark.parametrize("stride,padding,groups,bias", [(1, 1, 1, True), (2, 1, 1, False), (1, 0, 3, True), (2, 2, 1, True)])
def test_conv2d_gradient(stride, padding, groups, bias):
    rng = np.random.default_rng(13)
    x = rand(rng, 2, 3, 5, 5)
    w = rand(rng, 6, 3 // groups, 3, 3)
    b = rand(rng, 6)
    if bias:
        fn = lambda x, w, b: weighted(ops.conv2d(x, w, b, stride, padding, groups))  # noqa: E731
        assert check_gradients(fn, x, w, b) < TOL
    else:
        fn = lambda x, w: weighted(ops.conv2d(x, w, None, stride, padding, groups))  # noqa: E731
        assert check_gradients(fn, x, w) < TOL


def test_conv_silu_sum_oracle():
    rng = np.random.default_rng(14)
    x = rand(rng, 2, 3, 4, 4)
    w = rand(rng, 3, 3, 3, 3)
    assert check_gradients(lambda x, w: ops.sum(ops.silu(ops.conv2d(x, w, padding=1))), x, w) < TOL


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradient(training):
    rng = np.random.default_rng(15)
    x = rand(rng, 3, 2, 3, 3)
    g, b = rand(rng, 2), rand(rng, 2)

    def fn(x, g, b):
        rm, rv = np.array([0.1, -0.2]), np.array([1.5, 0.7])
        return weighted(ops.batch_norm(x, g, b, rm, rv, training))

    assert check_gradients(fn, x, g, b) < TOL


def test_batch_norm_updates_running_stats():
    rng = np.random.default_rng(16)
    x = rand(rng, 4, 2, 3, 3)
    rm, rv = np.zeros(2), np.ones(2)
    with default_dtype(np.float64):
        ops.batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, True, momentum=0.1)
    assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
