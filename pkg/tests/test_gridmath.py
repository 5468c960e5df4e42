import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supermeshing import gridmath as gm
from supermeshing.errors import ConfigurationError, InvariantError
from supermeshing.gridmath import Adam, AdamState, Parameter, Tensor, adam_step, check_gradients

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad, dtype=F64)


def rand(shape, seed=0, lo=-2.0, hi=2.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


# -- tensor basics -------------------------------------------------------------

def test_default_dtype_is_float32():
    assert Tensor(np.zeros((1, 1, 2, 2))).dtype == np.float32


def test_backward_accumulates_through_shared_node():
    x = t64([[[[1.0, 2.0]]]], grad=True)
    y = gm.sum_all(x * x + x)
    y.backward()
    np.testing.assert_array_equal(x.grad, [[[[3.0, 5.0]]]])


def test_no_grad_records_nothing():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    with gm.no_grad():
        y = gm.sum_all(x * 2.0)
    assert y._parents == () or not y.requires_grad


# -- conv2d ---------------------------------------------------------------------

def test_conv_all_ones_center_is_nine():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = gm.conv2d(x, w, Tensor(np.zeros(1)))
    assert out.data[0, 0, 1, 1] == 9.0
    # zero padding: a corner sees four ones
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_identity_kernel_bitwise():
    x = Tensor(rand((2, 1, 5, 7), 1))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = gm.conv2d(x, Tensor(w), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x.data)


def test_conv_stride_two_shape():
    out = gm.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
    assert out.shape == (1, 1, 2, 2)
    out = gm.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((2, 1, 3, 3))), stride=2)
    assert out.shape == (1, 2, 3, 3)


def test_conv_matches_direct_loop():
    x = rand((2, 3, 5, 4), 2)
    w = rand((2, 3, 3, 3), 3)
    b = rand((2,), 4)
    out = gm.conv2d(t64(x), t64(w), t64(b)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 2, 5, 4))
    for n in range(2):
        for o in range(2):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("w_shape", [(1, 2, 3, 3), (1, 1, 2, 2), (1, 1, 3, 1)])
def test_conv_shape_errors(w_shape):
    with pytest.raises(ConfigurationError):
        gm.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones(w_shape)))


def test_conv_bad_stride():
    with pytest.raises(ConfigurationError):
        gm.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=3)


# -- pooling --------------------------------------------------------------------

def test_channel_stats_values():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    avg, mx = gm.pool_channel_stats(x)
    assert avg.shape == (1, 1, 1, 1) and mx.shape == (1, 1, 1, 1)
    assert avg.item() == 2.5 and mx.item() == 4.0


def test_channel_stats_constant_and_shape():
    avg, mx = gm.pool_channel_stats(Tensor(np.full((2, 3, 4, 5), 0.75)))
    assert avg.shape == (2, 3, 1, 1)
    assert np.all(avg.data == 0.75) and np.all(mx.data == 0.75)


def test_channel_max_tie_goes_to_first_row_major():
    x = t64(np.array([[5.0, 1.0], [5.0, 5.0]]).reshape(1, 1, 2, 2), grad=True)
    _, mx = gm.pool_channel_stats(x)
    gm.sum_all(mx).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_spatial_stats():
    x = Tensor(np.array([2.0, 4.0]).reshape(1, 2, 1, 1))
    avg, mx = gm.pool_spatial_stats(x)
    assert avg.item() == 3.0 and mx.item() == 4.0
    single = Tensor(rand((2, 1, 3, 4), 5))
    a, m = gm.pool_spatial_stats(single)
    assert np.array_equal(a.data, single.data) and np.array_equal(m.data, single.data)
    a, m = gm.pool_spatial_stats(Tensor(np.ones((2, 5, 3, 4))))
    assert a.shape == (2, 1, 3, 4) and m.shape == (2, 1, 3, 4)


def test_pool_errors():
    with pytest.raises(ConfigurationError):
        gm.pool_channel_stats(Tensor(np.ones((1, 1, 0, 3))))
    with pytest.raises(ConfigurationError):
        gm.pool_spatial_stats(Tensor(np.ones((1, 0, 2, 2))))


# -- bilinear -------------------------------------------------------------------

def test_upsample_rows_align_corners():
    x = t64(np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2))
    out = gm.upsample_bilinear(x, 2).data[0, 0]
    for row in out:
        np.testing.assert_allclose(row, [0, 1 / 3, 2 / 3, 1], rtol=0, atol=1e-15)


@pytest.mark.parametrize("scale", [2, 4, 8])
def test_upsample_constant(scale):
    out = gm.upsample_bilinear(Tensor(np.full((1, 1, 4, 4), 0.3)), scale)
    assert out.shape == (1, 1, 4 * scale, 4 * scale)
    np.testing.assert_allclose(out.data, 0.3, rtol=0, atol=1e-7)


@pytest.mark.parametrize("scale", [2, 4, 8])
def test_upsample_ramp_exact(scale):
    n = 4
    c = np.linspace(0.0, 1.0, n)
    ramp = (c[:, None] + c[None, :]).reshape(1, 1, n, n)
    out = gm.upsample_bilinear(t64(ramp), scale).data[0, 0]
    co = np.linspace(0.0, 1.0, n * scale)
    assert np.abs(out - (co[:, None] + co[None, :])).max() <= 1e-12


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5),
       h=st.integers(2, 9), w=st.integers(2, 9), scale=st.sampled_from([2, 4, 8]))
def test_upsample_affine_property(a, b, c, h, w, scale):
    yy, xx = np.meshgrid(np.arange(h, dtype=F64), np.arange(w, dtype=F64), indexing="ij")
    field = (a * yy + b * xx + c).reshape(1, 1, h, w)
    out = gm.upsample_bilinear(t64(field), scale).data[0, 0]
    ys = np.linspace(0, h - 1, h * scale)
    xs = np.linspace(0, w - 1, w * scale)
    exact = a * ys[:, None] + b * xs[None, :] + c
    assert np.abs(out - exact).max() <= 1e-12


def test_upsample_rejects_bad_scale():
    with pytest.raises(ConfigurationError):
        gm.upsample_bilinear(Tensor(np.ones((1, 1, 2, 2))), 3)


# -- activations ----------------------------------------------------------------

def test_activation_values():
    assert gm.leaky_relu(t64([[[[-1.0]]]]), 0.01).item() == pytest.approx(-0.01, abs=1e-15)
    assert gm.sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).item() == 0.5
    assert gm.sigmoid(t64([[[[4.0]]]])).item() == pytest.approx(0.98201, abs=1e-5)


def test_sigmoid_strictly_inside_unit_interval():
    out = gm.sigmoid(Tensor(np.array([-200.0, -50.0, 0.0, 50.0, 200.0]).reshape(1, 1, 1, 5))).data
    assert np.all(out > 0) and np.all(out < 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20))
def test_leaky_relu_monotone(values):
    v = np.sort(np.array(values))
    out = gm.leaky_relu(t64(v.reshape(1, 1, 1, -1))).data.ravel()
    assert np.all(np.diff(out) >= 0)


def test_leaky_slope_validated():
    with pytest.raises(ConfigurationError):
        gm.leaky_relu(Tensor(np.ones((1, 1, 1, 1))), 1.5)


# -- adam -----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = Parameter("w", np.array([1.0, -2.0]))
    p.grad = np.zeros(2, dtype=np.float32)
    adam_step([p], AdamState())
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_magnitude_is_lr():
    p = Parameter("theta", np.array([1.0]), dtype=F64)
    p.grad = np.array([0.5])
    state = AdamState(lr=0.1)
    adam_step([p], state)
    assert abs(p.data[0] - 0.9) < 1e-6
    assert state.t == 1


def test_adam_identical_params_identical_updates():
    a = Parameter("a", np.array([0.3, 0.7]))
    b = Parameter("b", np.array([0.3, 0.7]))
    opt = Adam([a, b], lr=0.01)
    for _ in range(5):
        a.grad = np.array([0.2, -0.1], dtype=np.float32)
        b.grad = a.grad.copy()
        opt.step()
    assert np.array_equal(a.data, b.data)


def test_adam_missing_gradient_names_parameter():
    p = Parameter("layer.weight", np.ones(3))
    with pytest.raises(InvariantError, match="layer.weight"):
        adam_step([p], AdamState())


def test_adam_skips_frozen():
    p = Parameter("frozen", np.ones(2))
    p.freeze()
    opt = Adam([p])
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 1.0])


# -- gradient checker -----------------------------------------------------------

def test_check_gradients_linear_is_exact():
    x = t64(rand((1, 2, 3, 3), 6), grad=True)
    gm.sum_all(x).backward()
    assert np.all(x.grad == 1.0)
    assert check_gradients(gm.sum_all, t64(rand((1, 2, 3, 3), 6))) < 1e-12
    # dyadic inputs and step make the central difference exact as well
    dyadic = np.arange(18, dtype=F64).reshape(1, 2, 3, 3) / 8
    assert check_gradients(gm.sum_all, t64(dyadic), h=2.0 ** -10) == 0.0


def test_check_gradients_quadratic():
    x = t64(np.full((1, 1, 1, 1), 2.0))
    x.requires_grad = True
    y = gm.sum_all(gm.square(x))
    y.backward()
    assert x.grad.item() == 4.0
    assert check_gradients(lambda t: gm.sum_all(gm.square(t)), x) < 1e-6


def test_check_gradients_l1_away_from_kink():
    c = 0.1
    x = rand((1, 1, 4, 4), 7)
    x[np.abs(x - c) < 0.05] += 0.2
    err = check_gradients(lambda t: gm.mean_all(gm.abs(t - c)), t64(x))
    assert err < 1e-4


def test_check_gradients_rejects_nonfinite():
    def fn(t):
        return gm.sum_all(t) * np.inf
    with pytest.raises(InvariantError):
        check_gradients(fn, t64(np.ones((1, 1, 1, 1))))


# -- kernel gradient suite (float64, h=1e-6) -------------------------------------

def _away_from_zero(a, margin=0.05):
    a = a.copy()
    a[np.abs(a) < margin] += 2 * margin
    return a


def _weighted(seed, shape):
    w = t64(rand(shape, seed))
    return lambda out: gm.sum_all(gm.mul(out, w))


KERNEL_CASES = {
    "add": lambda: ((1, 2, 3, 3), lambda x: x + t64(rand((1, 2, 3, 3), 11))),
    "sub": lambda: ((1, 2, 3, 3), lambda x: t64(rand((1, 2, 3, 3), 12)) - x),
    "mul": lambda: ((1, 2, 3, 3), lambda x: x * x),
    "square": lambda: ((2, 1, 3, 3), gm.square),
    "leaky_relu": lambda: ((1, 2, 4, 4), lambda x: gm.leaky_relu(x, 0.01)),
    "sigmoid": lambda: ((1, 2, 4, 4), gm.sigmoid),
    "mean_all": lambda: ((1, 2, 3, 3), gm.mean_all),
    "concat": lambda: ((1, 2, 3, 3), lambda x: gm.concat([x, x * 2.0], axis=1)),
    "log_softmax": lambda: ((2, 1, 4, 4), gm.log_softmax_spatial),
    "channel_avg": lambda: ((1, 3, 4, 4), lambda x: gm.pool_channel_stats(x)[0]),
    "channel_max": lambda: ((1, 3, 4, 4), lambda x: gm.pool_channel_stats(x)[1]),
    "spatial_avg": lambda: ((1, 3, 4, 4), lambda x: gm.pool_spatial_stats(x)[0]),
    "spatial_max": lambda: ((1, 3, 4, 4), lambda x: gm.pool_spatial_stats(x)[1]),
    "upsample2": lambda: ((1, 1, 3, 3), lambda x: gm.upsample_bilinear(x, 2)),
    "upsample4": lambda: ((1, 2, 2, 3), lambda x: gm.upsample_bilinear(x, 4)),
    "resize": lambda: ((1, 1, 5, 4), lambda x: gm.resize_bilinear(x, 3, 6)),
    "conv_input": lambda: ((1, 2, 5, 5),
                           lambda x: gm.conv2d(x, t64(rand((3, 2, 3, 3), 13)), t64(rand(3, 14)))),
    "conv_input_stride2": lambda: ((1, 2, 6, 5),
                                   lambda x: gm.conv2d(x, t64(rand((2, 2, 3, 3), 15)), stride=2)),
}


@pytest.mark.parametrize("name", sorted(KERNEL_CASES))
def test_kernel_gradients(name):
    shape, op = KERNEL_CASES[name]()
    x = rand(shape, 100)
    if name in ("leaky_relu", "abs"):
        x = _away_from_zero(x)
    if name in ("channel_max", "spatial_max"):
        # distinct values keep the max away from ties
        x = np.random.default_rng(101).permutation(np.linspace(-2, 2, x.size)).reshape(shape)
    probe = None

    def fn(t):
        nonlocal probe
        out = op(t)
        if probe is None:
            probe = _weighted(200, out.shape)
        return probe(out)

    assert check_gradients(fn, t64(x), h=1e-6) < 1e-4


def test_abs_gradient():
    x = _away_from_zero(rand((1, 1, 4, 4), 16))
    assert check_gradients(lambda t: gm.sum_all(gm.abs(t)), t64(x), h=1e-6) < 1e-4


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_weight_and_bias_gradients(stride):
    x = t64(rand((2, 2, 5, 5), 17))
    w0 = rand((3, 2, 3, 3), 18)
    b0 = rand((3,), 19)
    probe = t64(rand((2, 3, 5 if stride == 1 else 3, 5 if stride == 1 else 3), 20))
    err_w = check_gradients(lambda w: gm.sum_all(gm.mul(gm.conv2d(x, w, t64(b0), stride), probe)),
                            t64(w0), h=1e-6)
    err_b = check_gradients(lambda b: gm.sum_all(gm.mul(gm.conv2d(x, t64(w0), b, stride), probe)),
                            t64(b0), h=1e-6)
    assert err_w < 1e-4 and err_b < 1e-4


# -- purity ---------------------------------------------------------------------

def test_ops_are_pure():
    x = rand((1, 2, 6, 6), 21).astype(np.float32)
    w = rand((2, 2, 3, 3), 22).astype(np.float32)
    run = lambda: gm.sigmoid(gm.conv2d(gm.upsample_bilinear(Tensor(x), 2), Tensor(w))).data
    assert np.array_equal(run(), run())
