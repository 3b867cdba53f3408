"""Kernel backend selection.

The compiled Cython core is used when it was built; otherwise the numpy
reference kernels are used. ``use_backend`` switches at runtime (benchmarks,
equivalence tests).
"""
from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_active: ModuleType = _ckernels if _ckernels is not None else _pykernels


def available_backends() -> list[str]:
    return ["numpy"] + (["cython"] if _ckernels is not None else [])


def backend() -> str:
    return "cython" if _active is _ckernels else "numpy"


def use_backend(name: str) -> None:
    global _active
    if name == "numpy":
        _active = _pykernels
    elif name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; reinstall with Cython available")
        _active = _ckernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def im2col(xp, kh, kw, stride, dilation, Ho, Wo):
    return _active.im2col(xp, kh, kw, stride, dilation, Ho, Wo)


def col2im(cols, xp_shape, kh, kw, stride, dilation, Ho, Wo):
    return _active.col2im(cols, tuple(xp_shape), kh, kw, stride, dilation, Ho, Wo)


def depthwise_forward(xp, w, stride, dilation, Ho, Wo):
    return _active.depthwise_forward(xp, w, stride, dilation, Ho, Wo)


def depthwise_backward(xp, w, g, stride, dilation):
    return _active.depthwise_backward(xp, w, g, stride, dilation)
