import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hasa.autodiff import functional as F
from hasa.autodiff.tensor import Parameter, Tensor, backward, precision
from hasa.errors import ConfigError, DimensionError
from hasa.ops import (
    CATALOG,
    SEGMENTATION_CATALOG,
    OpKind,
    SepUnit,
    forward_op,
    instantiate_op,
    param_count,
    sort_kinds,
)

from gradcheck import check, random_loss_weights


def test_catalog_members():
    assert [k.value for k in CATALOG] == [
        "none", "skip_connect", "max_pool_3x3", "sep_conv_3x3", "sep_conv_5x5",
        "dil_conv_3x3", "dil_conv_5x5", "mixconv_35", "se_block",
    ]
    assert OpKind.MAX_POOL_3X3 not in SEGMENTATION_CATALOG and OpKind.NONE in SEGMENTATION_CATALOG
    assert sort_kinds(["se_block", "none", "skip_connect"]) == [OpKind.NONE, OpKind.SKIP_CONNECT, OpKind.SE_BLOCK]


def test_none_is_zero_and_blocks_gradient():
    x = Parameter(np.random.default_rng(0).standard_normal((2, 4, 6, 6)), name="x")
    for stride in (1, 2):
        op = instantiate_op("none", 4, 4, stride)
        out = forward_op(op, x)
        assert out.shape == (2, 4, 6 // stride, 6 // stride) and not out.data.any()
    loss = F.total(F.add(forward_op(instantiate_op("none", 4, 4, 1), x), Tensor(np.ones((2, 4, 6, 6)))))
    backward(loss, [x])
    assert not x.grad.any()


def test_skip_is_identity():
    x = Tensor(np.random.default_rng(1).standard_normal((2, 4, 5, 5)))
    assert forward_op(instantiate_op(OpKind.SKIP_CONNECT, 4, 4, 1), x) is x


def test_zero_param_ops():
    assert param_count(instantiate_op("none", 8, 8, 1)) == 0
    assert param_count(instantiate_op("none", 8, 8, 2)) == 0
    assert param_count(instantiate_op("skip_connect", 8, 8, 1)) == 0
    assert param_count(instantiate_op("max_pool_3x3", 8, 8, 2)) == 0


def test_sep_unit_param_count():
    unit = SepUnit(16, 16, 3, np.random.default_rng(0))
    assert param_count(unit) == 16 * 9 + 16 * 16 == 400
    assert sum(p.data.size for p in unit.parameters()) == 400


def test_sep_conv_param_count_two_repetitions():
    c = 8
    op = instantiate_op("sep_conv_5x5", c, c, 1)
    assert param_count(op) == 2 * (c * 25 + c * c) + 2 * 2 * c


def test_mixconv_branch_isolation():
    rng = np.random.default_rng(2)
    op = instantiate_op(OpKind.MIXCONV_35, 8, 8, 1, rng)
    assert op.dw3.weight.shape == (4, 1, 3, 3) and op.dw5.weight.shape == (4, 1, 5, 5)
    x = Tensor(rng.standard_normal((1, 8, 6, 6)))
    op.dw5.weight.data[:] = 0
    y = op.depthwise(x).data
    assert np.any(y[:, :4]) and not np.any(y[:, 4:])
    op = instantiate_op(OpKind.MIXCONV_35, 8, 8, 1, rng)
    op.dw3.weight.data[:] = 0
    y = op.depthwise(x).data
    assert not np.any(y[:, :4]) and np.any(y[:, 4:])


def test_mixconv_odd_channels():
    op = instantiate_op(OpKind.MIXCONV_35, 5, 5, 1)
    assert op.dw3.weight.shape[0] == 2 and op.dw5.weight.shape[0] == 3
    assert forward_op(op, Tensor(np.ones((1, 5, 4, 4)))).shape == (1, 5, 4, 4)


def test_se_symmetric_gate():
    op = instantiate_op(OpKind.SE_BLOCK, 8, 8, 1)
    for p in op.parameters():
        p.data[:] = 0.1
    x = Tensor(np.ones((1, 8, 4, 4)) * np.arange(1, 9)[None, :, None, None])
    gate = op.gate(x).data
    assert np.allclose(gate, gate[0, 0])
    out = forward_op(op, x).data
    np.testing.assert_allclose(out / x.data, gate[0, 0], rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.01, 100.0))
def test_se_gate_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    op = instantiate_op(OpKind.SE_BLOCK, 8, 8, 1, rng)
    gate = op.gate(Tensor(rng.standard_normal((2, 8, 4, 4)) * scale)).data
    assert np.all(gate > 0) and np.all(gate < 1)


def test_sep_conv_on_small_input():
    op = instantiate_op(OpKind.SEP_CONV_5X5, 4, 4, 1)
    assert forward_op(op, Tensor(np.ones((1, 4, 4, 4)))).shape == (1, 4, 4, 4)
    op = instantiate_op(OpKind.DIL_CONV_5X5, 4, 4, 2)
    assert forward_op(op, Tensor(np.ones((1, 4, 4, 4)))).shape == (1, 4, 2, 2)


@pytest.mark.parametrize("kind", CATALOG)
@pytest.mark.parametrize("stride", [1, 2])
def test_shape_contract_and_finiteness(kind, stride):
    rng = np.random.default_rng(3)
    op = instantiate_op(kind, 6, 6, stride, rng)
    x = Tensor(rng.standard_normal((2, 6, 8, 8)) * 3)
    out = forward_op(op, x)
    assert out.shape == (2, 6, 8 // stride, 8 // stride)
    assert np.all(np.isfinite(out.data))
    assert param_count(op) == sum(p.data.size for p in op.params)


@pytest.mark.parametrize("kind", [k for k in CATALOG if k is not OpKind.NONE])
def test_channel_change(kind):
    op = instantiate_op(kind, 4, 6, 1)
    assert forward_op(op, Tensor(np.ones((1, 4, 4, 4)))).shape == (1, 6, 4, 4)


def test_instantiate_errors():
    with pytest.raises(ConfigError):
        instantiate_op("conv_7x7", 4, 4, 1)
    with pytest.raises(ConfigError):
        instantiate_op("sep_conv_3x3", 4, 4, 3)
    with pytest.raises(ConfigError):
        instantiate_op("sep_conv_3x3", 0, 4, 1)
    with pytest.raises(DimensionError):
        forward_op(instantiate_op("sep_conv_3x3", 4, 4, 1), Tensor(np.ones((1, 3, 4, 4))))


@pytest.mark.parametrize("kind", CATALOG)
@pytest.mark.parametrize("stride", [1, 2])
def test_op_gradients(kind, stride):
    rng = np.random.default_rng(catalog_seed(kind, stride))
    with precision(np.float64):
        op = instantiate_op(kind, 4, 4, stride, rng)
        x = Parameter(rng.standard_normal((1, 4, 6, 6)), name="x")
        proj = Tensor(random_loss_weights(forward_op(op, x).shape))
        tensors = [x] + op.parameters()
        errs = check(lambda: F.total(F.mul(forward_op(op, x), proj)), tensors)
    assert errs.max() < 1e-2 and np.median(errs) < 1e-3


def catalog_seed(kind, stride):
    return CATALOG.index(kind) * 10 + stride
