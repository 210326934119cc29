import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longiseg.autodiff import NumericalError, Tensor, backward, no_grad, set_debug
from longiseg.autodiff import functional as F

import oracles

RNG = np.random.default_rng(1234)


def rnd(*shape, lo=-1.0, hi=1.0, rng=RNG):
    return rng.uniform(lo, hi, size=shape)


# ---------------------------------------------------------------- backward basics


def test_sum_gradient_is_ones():
    x = Tensor(rnd(2, 3), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_product_gradient_is_other_factor():
    x = Tensor(rnd(4), requires_grad=True)
    y = Tensor(rnd(4), requires_grad=True)
    backward((x * y).sum())
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_reused_tensor_accumulates_branch_gradients():
    a = rnd(3, 4)

    def fn(x):
        return F.mul(F.exp(x), x) + F.sigmoid(x) * x

    assert oracles.check_grads(fn, [a]) < 1e-6
    x = Tensor(a, requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2 * a)


def test_backward_rejects_non_scalar():
    x = Tensor(rnd(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor(rnd(3), requires_grad=True)
    with no_grad():
        y = F.relu(x)
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_debug_mode_surfaces_nan():
    set_debug(True)
    try:
        with pytest.raises(NumericalError):
            F.log(Tensor(np.array([-1.0, 1.0]), requires_grad=True))
    finally:
        set_debug(False)


# ---------------------------------------------------------------- trivial forward values


def test_sigmoid_zero_and_softmax_equal_logits():
    assert F.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5
    sm = F.softmax(Tensor(np.zeros((1, 3, 2, 2, 2))), axis=1).data
    np.testing.assert_allclose(sm, 1 / 3)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_open_interval_sigmoid_never_saturates(dtype):
    x = Tensor(np.array([-1e4, -60.0, 0.0, 60.0, 1e4], dtype))
    out = F.sigmoid(x, open_interval=True).data
    assert np.all((out > 0) & (out < 1)) and out[2] == 0.5
    plain = F.sigmoid(x).data
    assert plain[-1] == 1 and plain[0] == 0  # what the flag guards against
    mid = Tensor(rnd(20, lo=-4, hi=4).astype(dtype))
    assert F.sigmoid(mid, open_interval=True).data.tobytes() == F.sigmoid(mid).data.tobytes()


def test_softmax_channel_sums_are_one_for_large_logits():
    sm = F.softmax(Tensor(rnd(2, 3, 4, 4, 4, lo=-500, hi=500)), axis=1).data
    assert np.all(np.isfinite(sm))
    np.testing.assert_allclose(sm.sum(axis=1), 1.0, atol=1e-6)


def test_identity_conv_and_shape_errors():
    x = rnd(1, 2, 3, 4, 5)
    w = np.zeros((2, 2, 1, 1, 1))
    w[0, 0] = w[1, 1] = 1.0
    np.testing.assert_array_equal(F.conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(2))).data, x)
    with pytest.raises(ValueError, match="expected"):
        F.conv3d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3, 3))), padding=1)


def test_conv_transpose_doubles_spatial_dims():
    x = rnd(1, 2, 3, 4, 5)
    w = np.zeros((2, 2, 2, 2, 2))
    w[0, 0] = w[1, 1] = 1.0
    y = F.conv_transpose3d(Tensor(x), Tensor(w), stride=2).data
    assert y.shape == (1, 2, 6, 8, 10)
    np.testing.assert_array_equal(y[:, :, ::2, ::2, ::2], x)
    np.testing.assert_array_equal(y[:, :, 1::2, 1::2, 1::2], x)


def test_instance_norm_statistics_and_constant_channel():
    x = rnd(2, 3, 16, 16, 16, lo=-5, hi=9)
    y = F.instance_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.abs(y.mean(axis=(2, 3, 4))).max() < 1e-6
    assert np.abs(y.var(axis=(2, 3, 4)) - 1).max() < 1e-4
    const = np.full((1, 2, 4, 4, 4), 7.0)
    beta = np.array([0.3, -2.0])
    y = F.instance_norm(Tensor(const), Tensor(np.array([5.0, 1.0])), Tensor(beta)).data
    np.testing.assert_allclose(y, np.broadcast_to(beta.reshape(1, 2, 1, 1, 1), y.shape))


def test_pooling_constants_and_binary_max():
    c = np.full((1, 2, 5, 6, 7), 3.5)
    np.testing.assert_allclose(F.avgpool3d(Tensor(c)).data, 3.5)
    np.testing.assert_allclose(F.maxpool3d(Tensor(c)).data, 3.5)
    np.testing.assert_allclose(F.global_avgpool_s(Tensor(c)).data, 3.5)
    np.testing.assert_allclose(F.global_maxpool_s(Tensor(c)).data, 3.5)
    m = (RNG.random((1, 1, 8, 8, 8)) > 0.7).astype(float)
    assert set(np.unique(F.maxpool3d(Tensor(m)).data)) <= {0.0, 1.0}


def test_channel_pooling_single_channel_is_identity():
    x = rnd(2, 1, 3, 4, 5)
    np.testing.assert_array_equal(F.avgpool_c(Tensor(x)).data, x)
    np.testing.assert_array_equal(F.maxpool_c(Tensor(x)).data, x)


def test_attention_products_trivial_cases_and_expansion_oracle():
    f = rnd(2, 3, 4, 5, 6)
    np.testing.assert_array_equal(F.mul_channelwise(Tensor(f), Tensor(np.ones((2, 3, 1, 1, 1)))).data, f)
    np.testing.assert_array_equal(F.mul_spatialwise(Tensor(f), Tensor(np.zeros((2, 1, 4, 5, 6)))).data, 0)
    ac, asp = rnd(2, 3, 1, 1, 1), rnd(2, 1, 4, 5, 6)
    np.testing.assert_allclose(F.mul_channelwise(Tensor(f), Tensor(ac)).data, f * np.tile(ac, (1, 1, 4, 5, 6)))
    np.testing.assert_allclose(F.mul_spatialwise(Tensor(f), Tensor(asp)).data, f * np.tile(asp, (1, 3, 1, 1, 1)))


def test_elementwise_ops_refuse_general_broadcasting():
    with pytest.raises(ValueError):
        F.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 3))))


# ---------------------------------------------------------------- oracle equivalence


def test_conv3d_matches_loop_oracle_example():
    x, w, b = rnd(1, 2, 5, 5, 5), rnd(3, 2, 3, 3, 3), rnd(3)
    got = F.conv3d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    assert np.abs(got - oracles.conv3d_loops(x, w, b, 1, 1)).max() < 1e-5


@settings(max_examples=60, deadline=None)
@given(
    cin=st.integers(1, 3), cout=st.integers(1, 3), k=st.sampled_from([1, 2, 3]),
    stride=st.integers(1, 2), pad=st.integers(0, 2), dims=st.tuples(*[st.integers(3, 6)] * 3),
    seed=st.integers(0, 2 ** 31),
)
def test_conv3d_oracle_property(cin, cout, k, stride, pad, dims, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, cin, *dims)), rng.normal(size=(cout, cin, k, k, k)), rng.normal(size=cout)
    for dt, tol in ((np.float64, 1e-10), (np.float32, 1e-4)):
        got = F.conv3d(Tensor(x.astype(dt)), Tensor(w.astype(dt)), Tensor(b.astype(dt)), stride, pad).data
        np.testing.assert_allclose(got, oracles.conv3d_loops(x, w, b, stride, pad), atol=tol, rtol=tol)


@settings(max_examples=50, deadline=None)
@given(
    k=st.sampled_from([2, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1),
    dims=st.tuples(*[st.integers(1, 4)] * 3), seed=st.integers(0, 2 ** 31),
)
def test_conv_transpose_matches_scatter_oracle(k, stride, pad, dims, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(1, 2, *dims)), rng.normal(size=(2, 3, k, k, k)), rng.normal(size=3)
    if any((d - 1) * stride - 2 * pad + k < 1 for d in dims):
        return
    got = F.conv_transpose3d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, oracles.conv_transpose3d_scatter(x, w, b, stride, pad), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(
    cin=st.integers(1, 3), cout=st.integers(1, 3), k=st.sampled_from([2, 3]),
    stride=st.integers(1, 2), pad=st.integers(0, 1), out=st.tuples(*[st.integers(1, 4)] * 3),
    seed=st.integers(0, 2 ** 31),
)
def test_conv_adjoint_identity(cin, cout, k, stride, pad, out, seed):
    """<conv(x, w), y> = <x, conv_transpose(y, w)> for matched shapes."""
    rng = np.random.default_rng(seed)
    # input dims chosen so the transposed conv maps back onto them exactly
    dims = tuple((o - 1) * stride + k - 2 * pad for o in out)
    if min(dims) < 1:
        dims = tuple((o - 1) * stride + k for o in out)
        pad = 0
    x = rng.normal(size=(1, cin, *dims))
    w = rng.normal(size=(cout, cin, k, k, k))
    y = rng.normal(size=(1, cout, *out))
    lhs = float((F.conv3d(Tensor(x), Tensor(w), None, stride, pad).data * y).sum())
    # conv_transpose3d takes (its C_in = cout)×(its C_out = cin)×k³, i.e. the same array
    rhs = float((x * F.conv_transpose3d(Tensor(y), Tensor(w), None, stride, pad).data).sum())
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


@settings(max_examples=50, deadline=None)
@given(dims=st.tuples(*[st.integers(1, 7)] * 3), op=st.sampled_from(["avg", "max"]), seed=st.integers(0, 2 ** 31))
def test_pooling_matches_loop_oracle(dims, op, seed):
    x = np.random.default_rng(seed).normal(size=(2, 2, *dims))
    fn = F.avgpool3d if op == "avg" else F.maxpool3d
    np.testing.assert_allclose(fn(Tensor(x), 3, 2, 1).data, oracles.pool3d_loops(x, 3, 2, 1, op), atol=1e-12)


def test_pooling_ramp_exact():
    x = np.arange(64, dtype=np.float64).reshape(1, 1, 4, 4, 4)
    for op, fn in (("avg", F.avgpool3d), ("max", F.maxpool3d)):
        np.testing.assert_array_equal(fn(Tensor(x), 3, 2, 1).data, oracles.pool3d_loops(x, 3, 2, 1, op))


def test_global_and_channel_pooling_match_direct_reductions():
    x = rnd(2, 4, 3, 5, 2)
    np.testing.assert_allclose(F.global_avgpool_s(Tensor(x)).data, x.mean(axis=(2, 3, 4), keepdims=True))
    np.testing.assert_array_equal(F.global_maxpool_s(Tensor(x)).data, x.max(axis=(2, 3, 4), keepdims=True))
    np.testing.assert_allclose(F.avgpool_c(Tensor(x)).data, x.mean(axis=1, keepdims=True))
    np.testing.assert_array_equal(F.maxpool_c(Tensor(x)).data, x.max(axis=1, keepdims=True))


def test_instance_norm_matches_reference():
    x, g, b = rnd(2, 3, 4, 5, 6), rnd(3), rnd(3)
    np.testing.assert_allclose(
        F.instance_norm(Tensor(x), Tensor(g), Tensor(b)).data, oracles.instance_norm_ref(x, g, b), atol=1e-12
    )


# ---------------------------------------------------------------- finite-difference gradient checks

GRAD_TOL = 1e-5


def _away_from_zero(*shape):
    """Values in ±[0.2, 1]: keeps ReLU and max-pool comparisons away from kinks."""
    return RNG.uniform(0.2, 1.0, size=shape) * RNG.choice([-1.0, 1.0], size=shape)


GRAD_CASES = {
    "add": (lambda a, b: a + b, [rnd(2, 3), rnd(2, 3)]),
    "sub": (lambda a, b: a - b, [rnd(2, 3), rnd(2, 3)]),
    "mul": (lambda a, b: a * b, [rnd(2, 3), rnd(2, 3)]),
    "div": (lambda a, b: a / b, [rnd(2, 3), rnd(2, 3, lo=0.5, hi=2)]),
    "exp": (F.exp, [rnd(5)]),
    "log": (F.log, [rnd(5, lo=0.5, hi=3)]),
    "relu": (F.relu, [_away_from_zero(2, 6)]),
    "sigmoid": (F.sigmoid, [rnd(2, 6, lo=-4, hi=4)]),
    "softmax": (lambda a: F.softmax(a, axis=1), [rnd(2, 3, 2, 2, 2, lo=-3, hi=3)]),
    "log_softmax": (lambda a: F.log_softmax(a, axis=1), [rnd(2, 3, 2, 2, 2, lo=-3, hi=3)]),
    "sum_axis": (lambda a: F.sum(a, axis=(1, 2), keepdims=True), [rnd(2, 3, 4)]),
    "mean": (lambda a: F.mean(a, axis=0), [rnd(3, 4)]),
    "reshape": (lambda a: F.reshape(a, (4, 3)), [rnd(2, 6)]),
    "getitem": (lambda a: a[:, 1:3], [rnd(3, 4)]),
    "concat": (lambda a, b: F.concat([a, b], axis=1), [rnd(1, 2, 3), rnd(1, 1, 3)]),
    "linear": (F.linear, [rnd(3, 5), rnd(4, 5), rnd(4)]),
    "conv3d_s1": (lambda x, w, b: F.conv3d(x, w, b, 1, 1), [rnd(1, 2, 4, 4, 4), rnd(2, 2, 3, 3, 3), rnd(2)]),
    "conv3d_s2": (lambda x, w, b: F.conv3d(x, w, b, 2, 1), [rnd(1, 2, 5, 4, 4), rnd(3, 2, 3, 3, 3), rnd(3)]),
    "conv3d_k7": (lambda x, w, b: F.conv3d(x, w, b, 1, 3), [rnd(1, 2, 3, 3, 3), rnd(1, 2, 7, 7, 7), rnd(1)]),
    "conv_transpose3d": (lambda x, w, b: F.conv_transpose3d(x, w, b, 2, 0), [rnd(1, 3, 2, 2, 2), rnd(3, 2, 2, 2, 2), rnd(2)]),
    "instance_norm": (F.instance_norm, [rnd(2, 2, 3, 3, 2), rnd(2, lo=0.5, hi=2), rnd(2)]),
    "avgpool3d": (lambda x: F.avgpool3d(x, 3, 2, 1), [rnd(1, 2, 5, 4, 3)]),
    "maxpool3d": (lambda x: F.maxpool3d(x, 3, 2, 1), [RNG.permutation(120).reshape(1, 2, 5, 4, 3) / 10.0]),
    "global_avgpool_s": (F.global_avgpool_s, [rnd(2, 3, 3, 2, 2)]),
    "global_maxpool_s": (F.global_maxpool_s, [RNG.permutation(72).reshape(2, 3, 3, 2, 2) / 7.0]),
    "avgpool_c": (F.avgpool_c, [rnd(2, 3, 2, 2, 2)]),
    "maxpool_c": (F.maxpool_c, [RNG.permutation(48).reshape(2, 3, 2, 2, 2) / 5.0]),
    "mul_channelwise": (F.mul_channelwise, [rnd(2, 3, 2, 3, 2), rnd(2, 3, 1, 1, 1)]),
    "mul_spatialwise": (F.mul_spatialwise, [rnd(2, 3, 2, 3, 2), rnd(2, 1, 2, 3, 2)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradients_match_finite_differences(name):
    fn, arrays = GRAD_CASES[name]
    assert oracles.check_grads(fn, arrays, eps=1e-4) < GRAD_TOL


def test_f32_and_f64_forward_agree():
    x, w, b = rnd(1, 2, 6, 6, 6, lo=-10, hi=10), rnd(3, 2, 3, 3, 3), rnd(3)
    for fn in (
        lambda d: F.conv3d(Tensor(x.astype(d)), Tensor(w.astype(d)), Tensor(b.astype(d)), 1, 1),
        lambda d: F.instance_norm(Tensor(x.astype(d)), Tensor(np.ones(2, d)), Tensor(np.zeros(2, d))),
        lambda d: F.softmax(Tensor(x.astype(d)), axis=1),
        lambda d: F.sigmoid(Tensor(x.astype(d))),
        lambda d: F.avgpool3d(Tensor(x.astype(d))),
    ):
        a, c = fn(np.float32).data.astype(np.float64), fn(np.float64).data
        assert np.max(np.abs(a - c) / np.maximum(np.abs(c), 1e-2)) < 1e-3
