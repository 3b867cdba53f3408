import itertools
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hasa.autodiff import functional as F
from hasa.autodiff import kernels
from hasa.autodiff.optim import Adam
from hasa.autodiff.tensor import Parameter, Tape, Tensor, backward, finite_checks, precision, record_activations
from hasa.errors import ConfigError, DimensionError, NumericalError, UsageError

from gradcheck import check, random_loss_weights


def brute_conv(x, w, b, stride, padding, dilation, groups):
    """Direct nested-loop correlation."""
    N, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    Wo = (W + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    og = O // groups
    for n, o, i, j in itertools.product(range(N), range(O), range(Ho), range(Wo)):
        g = o // og
        acc = 0.0
        for c in range(Cg):
            for u in range(kh):
                for v in range(kw):
                    acc += xp[n, g * Cg + c, i * stride + u * dilation, j * stride + v * dilation] * w[o, c, u, v]
        out[n, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def brute_bilinear(x, factor):
    """Half-pixel-centre interpolation evaluated at each output coordinate."""
    N, C, H, W = x.shape
    out = np.zeros((N, C, H * factor, W * factor))

    def src(o, size):
        s = min(max((o + 0.5) / factor - 0.5, 0.0), size - 1)
        i0 = int(np.floor(s))
        return i0, min(i0 + 1, size - 1), s - i0

    for i in range(H * factor):
        y0, y1, ty = src(i, H)
        for j in range(W * factor):
            x0, x1, tx = src(j, W)
            out[:, :, i, j] = ((1 - ty) * (1 - tx) * x[:, :, y0, x0] + (1 - ty) * tx * x[:, :, y0, x1]
                               + ty * (1 - tx) * x[:, :, y1, x0] + ty * tx * x[:, :, y1, x1])
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    assert np.array_equal(F.conv2d(Tensor(x), Tensor(w)).data, Tensor(x).data)


def test_conv_all_ones_center_and_corner():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == 4.0


def test_conv_dilated_one_hot_matches_brute_force():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 0, 0] = 1.0
    with precision(np.float64):
        got = F.conv2d(Tensor(x), Tensor(w), padding=2, dilation=2).data
    ref = brute_conv(x, w, None, 1, 2, 2, 1)
    assert np.array_equal(got, ref)
    # the kernel's (0,0) tap sits 2 pixels up-left: the impulse moves down-right
    assert got[0, 0, 4, 4] == 1.0 and got.sum() == 1.0


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 2), cg=st.integers(1, 3), og=st.integers(1, 3), groups=st.integers(1, 3),
    h=st.integers(3, 7), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 2),
    padding=st.integers(0, 2), dilation=st.integers(1, 2), bias=st.booleans(), seed=st.integers(0, 10**6),
)
def test_conv_matches_brute_force(n, cg, og, groups, h, k, stride, padding, dilation, bias, seed):
    if h + 2 * padding - dilation * (k - 1) < 1:
        return
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, cg * groups, h, h))
    w = rng.standard_normal((og * groups, cg, k, k))
    b = rng.standard_normal(og * groups) if bias else None
    with precision(np.float64):
        got = F.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride, padding, dilation, groups).data
    np.testing.assert_allclose(got, brute_conv(x, w, b, stride, padding, dilation, groups), atol=1e-10)


def test_conv_output_size_formula():
    x = Tensor(np.zeros((1, 2, 9, 7)))
    out = F.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))), stride=2, padding=1, dilation=2)
    assert out.shape == (1, 4, (9 + 2 - 4 - 1) // 2 + 1, (7 + 2 - 4 - 1) // 2 + 1)


def test_conv_errors():
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((3, 2, 1, 1))), groups=2)
    with pytest.raises(ConfigError):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


# ---------------------------------------------------------------- pooling / resampling


def test_global_avg_constant():
    out = F.pool2d(Tensor(np.full((2, 3, 4, 5), 1.75)), "global_avg")
    assert out.shape == (2, 3, 1, 1) and np.all(out.data == 1.75)


def test_pool_two_by_two():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert F.pool2d(x, "max", 2, 2).data.item() == 4.0
    assert F.pool2d(x, "avg", 2, 2).data.item() == 2.5


def test_max_pool_routes_gradient_to_argmax():
    x = Tensor(np.array([[[[1.0, 5.0], [3.0, 4.0]]]]), requires_grad=True)
    backward(F.total(F.pool2d(x, "max", 2, 2)))
    assert np.array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_avg_pool_distributes_uniformly():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
    backward(F.total(F.pool2d(x, "avg", 2, 2)))
    assert np.allclose(x.grad, 0.25)


def test_pool_kernel_too_large():
    with pytest.raises(ConfigError):
        F.pool2d(Tensor(np.zeros((1, 1, 2, 2))), "max", kernel=5)


def test_upsample_constant_and_single_pixel():
    up = F.bilinear_upsample(Tensor(np.full((1, 2, 3, 3), -0.5)), 2)
    assert up.shape == (1, 2, 6, 6) and np.all(up.data == -0.5)
    one = F.bilinear_upsample(Tensor(np.full((1, 1, 1, 1), 3.0)), 2)
    assert np.array_equal(one.data, np.full((1, 1, 2, 2), 3.0, dtype=np.float32))


@pytest.mark.parametrize("factor", [2, 4])
def test_upsample_matches_brute_force(factor):
    ramp = np.arange(4.0).reshape(1, 1, 2, 2)
    with precision(np.float64):
        got = F.bilinear_upsample(Tensor(ramp), factor).data
    assert np.array_equal(got, brute_bilinear(ramp, factor))
    x = np.random.default_rng(3).standard_normal((2, 3, 3, 5))
    with precision(np.float64):
        got = F.bilinear_upsample(Tensor(x), factor).data
    np.testing.assert_allclose(got, brute_bilinear(x, factor), atol=1e-12)


def test_upsample_bad_factor():
    with pytest.raises(ConfigError):
        F.bilinear_upsample(Tensor(np.zeros((1, 1, 2, 2))), 3)


# ---------------------------------------------------------------- dense / activations


def test_dense_identity_and_bias():
    x = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)
    assert np.array_equal(F.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = np.array([1.0, -2.0, 0.5])
    out = F.dense(Tensor(x), Tensor(np.zeros((3, 4))), Tensor(b)).data
    assert np.array_equal(out, np.tile(b.astype(np.float32), (3, 1)))


def test_dense_vs_triple_loop():
    rng = np.random.default_rng(7)
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    ref = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            ref[i, j] = sum(x[i, k] * w[j, k] for k in range(4)) + b[j]
    with precision(np.float64):
        got = F.dense(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-13)
    with pytest.raises(DimensionError):
        F.dense(Tensor(x), Tensor(np.zeros((5, 3))))


def test_activations():
    assert np.all(F.activation(Tensor(-np.ones((2, 3))), "relu").data == 0)
    assert F.activation(Tensor(np.zeros(1)), "sigmoid").data[0] == 0.5
    sm = F.activation(Tensor(np.zeros((1, 9, 1, 1))), "softmax_channel").data
    np.testing.assert_allclose(sm, 1 / 9, rtol=1e-6)
    with pytest.raises(ConfigError):
        F.activation(Tensor(np.zeros(1)), "tanh")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_sums_to_one(logits):
    out = F.softmax(Tensor(np.array(logits)[None]), axis=-1).data
    assert abs(out.sum() - 1.0) < 1e-6 and np.all(out >= 0)


def test_sigmoid_extreme_inputs_are_finite():
    out = F.sigmoid(Tensor(np.array([-1e4, 0.0, 1e4]))).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[2] == 1.0


# ---------------------------------------------------------------- group norm


def test_group_norm_statistics():
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3)) * 5 + 2
    with precision(np.float64):
        one = F.group_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), groups=1).data
        inst = F.group_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), groups=4).data
    np.testing.assert_allclose(one.mean(axis=(1, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(one.std(axis=(1, 2, 3)), 1, atol=1e-5)
    np.testing.assert_allclose(inst.mean(axis=(2, 3)), 0, atol=1e-12)
    with pytest.raises(DimensionError):
        F.group_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), groups=3)


# ---------------------------------------------------------------- backward


def test_backward_linear():
    x = np.random.default_rng(0).standard_normal((2, 3))
    w = Parameter(np.zeros((2, 3)), name="w")
    grads = backward(F.total(F.mul(w, Tensor(x))), [w])
    assert np.array_equal(grads["w"], Tensor(x).data)


def test_backward_unreachable_gets_zero():
    w = Parameter(np.ones(3), name="w")
    p = Parameter(np.ones(2), name="p")
    grads = backward(F.total(F.mul(w, w)), [w, p])
    assert np.array_equal(grads["p"], np.zeros(2))
    assert np.array_equal(p.grad, np.zeros(2))


def test_backward_needs_scalar():
    w = Parameter(np.ones(3), name="w")
    with pytest.raises(UsageError):
        backward(F.mul(w, w))


def test_tape_is_topological_and_visits_once():
    a = Parameter(np.ones(2), name="a")
    b = F.mul(a, a)
    c = F.add(b, b, a)
    tape = Tape.from_output(F.total(c))
    pos = {id(t): i for i, t in enumerate(tape.order)}
    assert len(pos) == len(tape.order)
    for t in tape.order:
        if t.node is not None:
            assert all(pos[id(p)] < pos[id(t)] for p in t.node.parents if p.requires_grad)
    backward(F.total(c))
    assert np.array_equal(a.grad, 4 * np.ones(2) + 1)


def test_tape_isolation():
    a, b = Parameter(np.ones(2), name="a"), Parameter(np.ones(2), name="b")
    backward(F.total(F.mul(b, b)))
    before = b.grad.copy()
    backward(F.total(F.mul_scalar(a, 3.0)))
    assert np.array_equal(b.grad, before)
    assert np.array_equal(a.grad, 3 * np.ones(2))


def test_non_finite_forward_is_an_error():
    with pytest.raises(NumericalError):
        F.mul_scalar(Tensor(np.array([1e38])), 1e10)
    with finite_checks(False):
        F.mul_scalar(Tensor(np.array([1e38])), 1e10)


def test_forward_determinism():
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    a = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


def test_record_activations_counts_elements():
    with record_activations() as log:
        F.relu(Tensor(np.zeros((2, 3, 4, 4))))
    assert log == [96]


GRAD_CASES = {
    "conv_dense": lambda r: (lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1), [(2, 3, 6, 6), (4, 3, 3, 3), (4,)]),
    "conv_dilated": lambda r: (lambda x, w: F.conv2d(x, w, padding=2, dilation=2), [(1, 2, 6, 6), (3, 2, 3, 3)]),
    "conv_depthwise": lambda r: (lambda x, w: F.conv2d(x, w, stride=2, padding=2, groups=4), [(2, 4, 7, 7), (4, 1, 5, 5)]),
    "conv_grouped": lambda r: (lambda x, w: F.conv2d(x, w, padding=1, groups=2), [(1, 4, 5, 5), (6, 2, 3, 3)]),
    "max_pool": lambda r: (lambda x: F.pool2d(x, "max", 3, 2, 1), [(2, 3, 6, 6)]),
    "avg_pool": lambda r: (lambda x: F.pool2d(x, "avg", 3, 1, 1), [(2, 3, 5, 5)]),
    "global_avg": lambda r: (lambda x: F.pool2d(x, "global_avg"), [(2, 3, 4, 4)]),
    "upsample2": lambda r: (lambda x: F.bilinear_upsample(x, 2), [(1, 2, 3, 4)]),
    "upsample4": lambda r: (lambda x: F.bilinear_upsample(x, 4), [(1, 2, 2, 3)]),
    "dense": lambda r: (lambda x, w, b: F.dense(x, w, b), [(3, 5), (4, 5), (4,)]),
    "sigmoid": lambda r: (F.sigmoid, [(2, 7)]),
    "clip": lambda r: (lambda x: F.clip(x, -0.5, 0.7), [(3, 7)]),
    "softmax": lambda r: (lambda x: F.softmax(x, axis=1), [(2, 5, 2, 2)]),
    "log_softmax": lambda r: (lambda x: F.log_softmax(x, axis=-1), [(3, 6)]),
    "group_norm": lambda r: (lambda x, g, b: F.group_norm(x, g, b, groups=2), [(2, 4, 3, 3), (4,), (4,)]),
    "instance_norm": lambda r: (lambda x, g, b: F.group_norm(x, g, b, groups=4), [(2, 4, 3, 3), (4,), (4,)]),
    "weighted_sum": lambda r: (lambda a, b, w: F.weighted_sum([a, b], w), [(2, 3), (2, 3), (2,)]),
    "channel_scale": lambda r: (F.channel_scale, [(2, 3, 4, 4), (2, 3)]),
    "concat_getitem": lambda r: (lambda a, b: F.getitem(F.concat([a, b], 1), (slice(None), slice(1, 4))), [(1, 2, 3, 3), (1, 3, 3, 3)]),
    "mul_sub": lambda r: (lambda a, b: F.sub(F.mul(a, b), F.mul_scalar(a, 0.3)), [(4, 5), (4, 5)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    with precision(np.float64):
        fn, shapes = GRAD_CASES[name](rng)
        ts = [Parameter(rng.standard_normal(s), name=f"in{i}") for i, s in enumerate(shapes)]
        out_shape = fn(*ts).shape
        proj = Tensor(random_loss_weights(out_shape))
        errs = check(lambda: F.total(F.mul(fn(*ts), proj)), ts)
    assert errs.max() < 1e-2 and np.median(errs) < 1e-3


# ---------------------------------------------------------------- Adam


def scalar_adam(g_seq, lr, b1=0.9, b2=0.999, eps=1e-8, w=0.0):
    m = v = 0.0
    out = []
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(w)
    return out


def test_adam_matches_scalar_trace():
    with precision(np.float64):
        p = Parameter(np.zeros(1), name="p")
        opt = Adam([p], lr=0.1)
        trace = []
        for g in (0.5, -1.5, 2.0):
            opt.step({"p": np.array([g])})
            trace.append(float(p.data[0]))
    np.testing.assert_allclose(trace, scalar_adam([0.5, -1.5, 2.0], 0.1), rtol=1e-12)


def test_adam_zero_grad_and_frozen():
    p = Parameter(np.ones(3), name="p")
    q = Parameter(np.ones(3), name="q", frozen=True)
    opt = Adam([p, q], lr=1.0)
    opt.step({"p": np.zeros(3), "q": np.ones(3)})
    assert np.array_equal(p.data, np.ones(3, dtype=np.float32))
    assert np.array_equal(q.data, np.ones(3, dtype=np.float32))


def test_adam_missing_grad():
    p = Parameter(np.ones(3), name="p")
    with pytest.raises(UsageError):
        Adam([p]).step({})


def test_adam_state_roundtrip():
    p = Parameter(np.ones(2), name="p")
    opt = Adam([p], lr=0.1)
    opt.step({"p": np.array([1.0, -1.0])})
    state = opt.state()
    p2 = Parameter(p.data, name="p")
    opt2 = Adam([p2], lr=0.1)
    opt2.load_state(state)
    opt.step({"p": np.array([0.3, 0.2])})
    opt2.step({"p": np.array([0.3, 0.2])})
    assert np.array_equal(p.data, p2.data)


# ---------------------------------------------------------------- kernel backends


@pytest.mark.skipif("cython" not in kernels.available_backends(), reason="compiled kernels not built")
@pytest.mark.parametrize("groups", [1, 4])
def test_backends_agree(groups):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 4, 7, 7))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    g = rng.standard_normal((2, 4, 4, 4))
    results = {}
    prev = kernels.backend()
    try:
        for name in kernels.available_backends():
            kernels.use_backend(name)
            with precision(np.float64):
                xt, wt = Parameter(x, name="x"), Parameter(w, name="w")
                out = F.conv2d(xt, wt, stride=2, padding=1, dilation=1, groups=groups)
                backward(F.total(F.mul(out, Tensor(g))))
                results[name] = (out.data.copy(), xt.grad.copy(), wt.grad.copy())
    finally:
        kernels.use_backend(prev)
    for a, b in zip(results["numpy"], results["cython"]):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")
