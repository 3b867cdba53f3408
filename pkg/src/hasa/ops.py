"""Candidate operations searched on every cell edge.

Every kind maps (C_in, H, W) to (C_out, ceil(H/s), ceil(W/s)) for stride s,
so any two kinds are interchangeable on an edge.
"""
from __future__ import annotations

import enum
from typing import Optional

import numpy as np

from .autodiff import functional as F
from .autodiff.module import Module
from .autodiff.tensor import Parameter, Tensor
from .errors import ConfigError, DimensionError

SE_REDUCTION = 4
SE_LOGIT_LIMIT = 15.0  # float32 sigmoid reaches exactly 1.0 near 17; keeps gates inside (0, 1)


class OpKind(str, enum.Enum):
    NONE = "none"
    SKIP_CONNECT = "skip_connect"
    MAX_POOL_3X3 = "max_pool_3x3"
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    DIL_CONV_3X3 = "dil_conv_3x3"
    DIL_CONV_5X5 = "dil_conv_5x5"
    MIXCONV_35 = "mixconv_35"
    SE_BLOCK = "se_block"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "OpKind":
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(f"unknown operation {name!r}") from None


CATALOG: tuple[OpKind, ...] = tuple(OpKind)
SEGMENTATION_CATALOG: tuple[OpKind, ...] = tuple(k for k in CATALOG if k is not OpKind.MAX_POOL_3X3)


def catalog_index(kind: OpKind) -> int:
    return CATALOG.index(kind)


def sort_kinds(kinds) -> list[OpKind]:
    return sorted((OpKind(k) for k in kinds), key=catalog_index)


# ---------------------------------------------------------------- layers


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, dilation=1, groups=1, bias=False):
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = Parameter(he_normal(rng, (c_out, c_in // groups, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class GroupNorm(Module):
    def __init__(self, channels, groups=1):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.groups = groups

    def forward(self, x):
        return F.group_norm(x, self.gamma, self.beta, self.groups)


class Dense(Module):
    def __init__(self, f_in, f_out, rng, bias=True):
        self.weight = Parameter(rng.standard_normal((f_out, f_in)) * np.sqrt(1.0 / f_in))
        self.bias = Parameter(np.zeros(f_out)) if bias else None

    def forward(self, x):
        return F.dense(x, self.weight, self.bias)


class ConvNorm(Module):
    """1x1 convolution followed by normalisation (input adapters)."""

    def __init__(self, c_in, c_out, rng, stride=1):
        self.conv = Conv2d(c_in, c_out, 1, rng, stride=stride)
        self.norm = GroupNorm(c_out)

    def forward(self, x):
        return self.norm(self.conv(x))


class FactorizedReduce(Module):
    """Halve resolution with two offset stride-2 1x1 convs, concatenated."""

    def __init__(self, c_in, c_out, rng):
        c1 = c_out // 2
        self.conv_a = Conv2d(c_in, c1, 1, rng, stride=2)
        self.conv_b = Conv2d(c_in, c_out - c1, 1, rng, stride=2)
        self.norm = GroupNorm(c_out)

    def forward(self, x):
        H, W = x.shape[2:]
        if H % 2 or W % 2:
            raise DimensionError(f"factorized reduce needs even spatial size, got {H}x{W}")
        shifted = F.getitem(x, (slice(None), slice(None), slice(1, None), slice(1, None)))
        return self.norm(F.concat([self.conv_a(x), self.conv_b(shifted)], axis=1))


class SepUnit(Module):
    """Depthwise k x k (optionally dilated/strided) then pointwise 1x1, no bias."""

    def __init__(self, c_in, c_out, kernel, rng, stride=1, dilation=1):
        pad = dilation * (kernel - 1) // 2
        self.depthwise = Conv2d(c_in, c_in, kernel, rng, stride=stride, padding=pad, dilation=dilation, groups=c_in)
        self.pointwise = Conv2d(c_in, c_out, 1, rng)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


# ---------------------------------------------------------------- operations


class Op(Module):
    """A parameterised candidate operation on one edge."""

    kind: OpKind

    def __init__(self, c_in: int, c_out: int, stride: int):
        self.in_channels = c_in
        self.out_channels = c_out
        self.stride = stride

    @property
    def params(self) -> list[Parameter]:
        return self.parameters()

    def out_shape(self, shape: tuple) -> tuple:
        N, _, H, W = shape
        s = self.stride
        return (N, self.out_channels, -(-H // s), -(-W // s))


class Zero(Op):
    kind = OpKind.NONE

    def forward(self, x):
        return F.zeros(self.out_shape(x.shape))


class Identity(Op):
    kind = OpKind.SKIP_CONNECT

    def __init__(self, c_in, c_out, stride, rng):
        super().__init__(c_in, c_out, stride)
        if stride == 2:
            self.reduce = FactorizedReduce(c_in, c_out, rng)
        elif c_in != c_out:
            self.reduce = ConvNorm(c_in, c_out, rng)
        else:
            self.reduce = None

    def forward(self, x):
        return x if self.reduce is None else self.reduce(x)


class MaxPool3x3(Op):
    kind = OpKind.MAX_POOL_3X3

    def __init__(self, c_in, c_out, stride, rng):
        super().__init__(c_in, c_out, stride)
        self.adapt = ConvNorm(c_in, c_out, rng) if c_in != c_out else None

    def forward(self, x):
        y = F.pool2d(x, "max", kernel=3, stride=self.stride, padding=1)
        return y if self.adapt is None else self.adapt(y)


class SepConv(Op):
    """Two repetitions of (depthwise, pointwise, norm, relu)."""

    def __init__(self, c_in, c_out, stride, rng, kernel):
        super().__init__(c_in, c_out, stride)
        self.kind = OpKind.SEP_CONV_3X3 if kernel == 3 else OpKind.SEP_CONV_5X5
        self.unit1 = SepUnit(c_in, c_in, kernel, rng, stride=stride)
        self.norm1 = GroupNorm(c_in)
        self.unit2 = SepUnit(c_in, c_out, kernel, rng)
        self.norm2 = GroupNorm(c_out)

    def forward(self, x):
        x = F.relu(self.norm1(self.unit1(x)))
        return F.relu(self.norm2(self.unit2(x)))


class DilConv(Op):
    def __init__(self, c_in, c_out, stride, rng, kernel):
        super().__init__(c_in, c_out, stride)
        self.kind = OpKind.DIL_CONV_3X3 if kernel == 3 else OpKind.DIL_CONV_5X5
        self.unit = SepUnit(c_in, c_out, kernel, rng, stride=stride, dilation=2)
        self.norm = GroupNorm(c_out)

    def forward(self, x):
        return F.relu(self.norm(self.unit(x)))


class MixConv35(Op):
    """Depthwise 3x3 on the first floor(C/2) channels, 5x5 on the rest, then pointwise."""

    kind = OpKind.MIXCONV_35

    def __init__(self, c_in, c_out, stride, rng):
        super().__init__(c_in, c_out, stride)
        self.split = c_in // 2
        c5 = c_in - self.split
        self.dw3 = Conv2d(self.split, self.split, 3, rng, stride=stride, padding=1, groups=self.split) if self.split else None
        self.dw5 = Conv2d(c5, c5, 5, rng, stride=stride, padding=2, groups=c5)
        self.pointwise = Conv2d(c_in, c_out, 1, rng)
        self.norm = GroupNorm(c_out)

    def depthwise(self, x):
        hi = self.dw5(F.getitem(x, (slice(None), slice(self.split, None))))
        if self.dw3 is None:
            return hi
        lo = self.dw3(F.getitem(x, (slice(None), slice(0, self.split))))
        return F.concat([lo, hi], axis=1)

    def forward(self, x):
        return F.relu(self.norm(self.pointwise(self.depthwise(x))))


class SEBlock(Op):
    """Squeeze-and-excitation gate applied to the (stride-adapted) edge input."""

    kind = OpKind.SE_BLOCK

    def __init__(self, c_in, c_out, stride, rng, reduction=SE_REDUCTION):
        super().__init__(c_in, c_out, stride)
        self.adapt = ConvNorm(c_in, c_out, rng, stride=stride) if (stride != 1 or c_in != c_out) else None
        hidden = max(1, c_out // reduction)
        self.fc1 = Dense(c_out, hidden, rng)
        self.fc2 = Dense(hidden, c_out, rng)

    def gate(self, x):
        s = F.flatten(F.pool2d(x, "global_avg"))
        return F.sigmoid(F.clip(self.fc2(F.relu(self.fc1(s))), -SE_LOGIT_LIMIT, SE_LOGIT_LIMIT))

    def forward(self, x):
        if self.adapt is not None:
            x = self.adapt(x)
        return F.channel_scale(x, self.gate(x))


def instantiate_op(kind, in_ch: int, out_ch: int, stride: int, rng: Optional[np.random.Generator] = None) -> Op:
    if in_ch <= 0 or out_ch <= 0:
        raise ConfigError("operation channels must be positive")
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    rng = rng if rng is not None else np.random.default_rng(0)
    kind = OpKind.parse(kind) if isinstance(kind, str) and not isinstance(kind, OpKind) else kind
    if kind is OpKind.NONE:
        op = Zero(in_ch, out_ch, stride)
    elif kind is OpKind.SKIP_CONNECT:
        op = Identity(in_ch, out_ch, stride, rng)
    elif kind is OpKind.MAX_POOL_3X3:
        op = MaxPool3x3(in_ch, out_ch, stride, rng)
    elif kind in (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5):
        op = SepConv(in_ch, out_ch, stride, rng, 3 if kind is OpKind.SEP_CONV_3X3 else 5)
    elif kind in (OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5):
        op = DilConv(in_ch, out_ch, stride, rng, 3 if kind is OpKind.DIL_CONV_3X3 else 5)
    elif kind is OpKind.MIXCONV_35:
        op = MixConv35(in_ch, out_ch, stride, rng)
    elif kind is OpKind.SE_BLOCK:
        op = SEBlock(in_ch, out_ch, stride, rng)
    else:
        raise ConfigError(f"unknown operation {kind!r}")
    return op


def forward_op(op: Op, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[1] != op.in_channels:
        raise DimensionError(f"{op.kind}: expected {op.in_channels} input channels, got shape {x.shape}")
    return op(x)


def param_count(op: Module) -> int:
    return sum(p.size for p in op.parameters())
