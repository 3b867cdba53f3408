"""Dense tensors with a reverse-mode tape.

A :class:`Tensor` produced by a differentiable primitive carries a
:class:`Node` pointing at its inputs and a closure mapping the output
gradient onto input gradients. :func:`backward` linearises the graph reachable
from a scalar loss into a :class:`Tape` and walks it in reverse.

Graphs are built per computation, so two models never share nodes.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import NumericalError, UsageError

_DTYPE = np.float32
_CHECK_FINITE = True
_ACTIVATION_LOG: Optional[list] = None


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (gradient checks run in float64)."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def record_activations():
    """Collect the element count of every primitive output produced inside the block.

    Blocks nest: an enclosing block also sees everything recorded by inner ones.
    """
    global _ACTIVATION_LOG
    prev, _ACTIVATION_LOG = _ACTIVATION_LOG, []
    log = _ACTIVATION_LOG
    try:
        yield log
    finally:
        _ACTIVATION_LOG = prev
        if prev is not None:
            prev.extend(log)


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """An n-d float array (image tensors are (batch, channel, height, width))."""

    __slots__ = ("data", "requires_grad", "node", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, node: Optional[Node] = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.node = node
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; shapes must match exactly (no implicit broadcasting).
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, other)

    def __mul__(self, other):
        from . import functional as F

        if isinstance(other, (int, float)):
            return F.mul_scalar(self, float(other))
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F

        return F.mul_scalar(self, -1.0)


class Parameter(Tensor):
    """A named learnable tensor. Frozen parameters never receive updates."""

    __slots__ = ("name", "_frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(np.array(data, dtype=_DTYPE, copy=True), requires_grad=not frozen)
        self.name = name
        self._frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not value

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def make(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a primitive's output, recording a node only if some input needs grad."""
    if _ACTIVATION_LOG is not None:
        _ACTIVATION_LOG.append(out.size)
    if _CHECK_FINITE and not np.isfinite(out).all():
        raise NumericalError(f"non-finite values produced by {op}")
    if any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, node=Node(op, tuple(parents), backward_fn))
    return Tensor(out)


class Tape:
    """Topologically ordered view of the graph feeding one output tensor."""

    def __init__(self, order: list[Tensor]):
        self.order = order

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.order if t.node is not None]

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Returns ``{parameter name: grad}``. Parameters listed in ``params`` that
    the loss does not reach get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericalError("loss is not finite")
    params = list(params) if params is not None else []
    for p in params:
        p.grad = None

    result: dict[str, np.ndarray] = {}
    if loss.requires_grad:
        tape = Tape.from_output(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for t in reversed(tape.order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                t.grad = g
                if isinstance(t, Parameter):
                    result[t.name] = g
                continue
            pgrads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
            result[p.name] = p.grad
    return result
