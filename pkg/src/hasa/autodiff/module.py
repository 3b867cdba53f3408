"""A minimal module tree for parameter bookkeeping."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter


class Module:
    """Base class: parameters and sub-modules are discovered from attributes.

    Attributes holding a :class:`Parameter`, a :class:`Module`, or a list/dict
    of modules are walked in insertion order. Shared parameters are reported
    once, under the first path that reaches them.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Parameter, Module)):
                        yield f"{key}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, (Parameter, Module)):
                        yield f"{key}.{k}", v

    def named_parameters(self, prefix: str = "", _seen=None) -> Iterator[tuple[str, Parameter]]:
        seen = set() if _seen is None else _seen
        for key, value in self._children():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield path, value
            else:
                yield from value.named_parameters(path + ".", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = set(own) - set(state)
            extra = set(state) - set(own)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, arr in state.items():
            if name in own:
                p = own[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
                p.data = np.array(arr, dtype=p.data.dtype, copy=True)

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True
