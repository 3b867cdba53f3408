"""Seven-node cells: two input nodes, four internal nodes, concatenated output.

During search every edge is a :class:`MixedEdge` holding all active
candidate operations blended by ``softmax(alphas)``. After search the
alphas are read out into a :class:`CellGenotype` and a :class:`DiscreteCell`
keeps only two incoming edges per internal node.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.module import Module
from .autodiff.tensor import Tensor
from .errors import DimensionError, StructuralError
from .ops import (
    CATALOG,
    ConvNorm,
    FactorizedReduce,
    OpKind,
    catalog_index,
    instantiate_op,
    sort_kinds,
)

N_INPUT_NODES = 2
N_INTERNAL_NODES = 4
EDGES: tuple[tuple[int, int], ...] = tuple(
    (i, j) for j in range(N_INPUT_NODES, N_INPUT_NODES + N_INTERNAL_NODES) for i in range(j)
)
N_EDGES = len(EDGES)  # 2 + 3 + 4 + 5


@dataclass(frozen=True)
class CellSpec:
    channels: int
    reduction: bool = False
    reduction_prev: bool = False
    c_prev_prev: Optional[int] = None
    c_prev: Optional[int] = None
    n_input_nodes: int = N_INPUT_NODES
    n_internal_nodes: int = N_INTERNAL_NODES

    @property
    def out_channels(self) -> int:
        return self.n_internal_nodes * self.channels

    def inputs(self) -> tuple[int, int]:
        return (self.c_prev_prev or self.channels, self.c_prev or self.channels)


@dataclass(frozen=True)
class CellGenotype:
    """Per internal node, the two retained incoming edges as (source node, op)."""

    nodes: tuple[tuple[tuple[int, OpKind], tuple[int, OpKind]], ...]
    reduction: bool = False

    def __post_init__(self):
        if len(self.nodes) != N_INTERNAL_NODES:
            raise StructuralError(f"genotype needs {N_INTERNAL_NODES} nodes, got {len(self.nodes)}")
        for j, edges in enumerate(self.nodes):
            node_id = j + N_INPUT_NODES
            if len(edges) != 2:
                raise StructuralError(f"node {node_id} must keep exactly 2 edges")
            srcs = [s for s, _ in edges]
            if len(set(srcs)) != 2 or any(not (0 <= s < node_id) for s in srcs):
                raise StructuralError(f"node {node_id} has illegal sources {srcs}")
            if any(OpKind(k) is OpKind.NONE for _, k in edges):
                raise StructuralError(f"node {node_id} retains a 'none' edge")

    def to_dict(self) -> dict:
        return {
            "reduction": self.reduction,
            "nodes": [[[int(s), OpKind(k).value] for s, k in edges] for edges in self.nodes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellGenotype":
        nodes = tuple(tuple((int(s), OpKind.parse(k)) for s, k in edges) for edges in d["nodes"])
        return cls(nodes=nodes, reduction=bool(d["reduction"]))

    def kinds(self) -> list[OpKind]:
        return [k for edges in self.nodes for _, k in edges]


@dataclass(frozen=True)
class Genotype:
    normal: CellGenotype
    reduce: Optional[CellGenotype] = None

    def to_dict(self) -> dict:
        return {"normal": self.normal.to_dict(), "reduction": self.reduce.to_dict() if self.reduce else None}

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        red = d.get("reduction")
        return cls(CellGenotype.from_dict(d["normal"]), CellGenotype.from_dict(red) if red else None)

    def for_cell(self, reduction: bool) -> CellGenotype:
        if reduction:
            if self.reduce is None:
                raise StructuralError("genotype has no reduction cell")
            return self.reduce
        return self.normal


# ---------------------------------------------------------------- search-time


class MixedEdge(Module):
    def __init__(self, from_node: int, to_node: int, kinds: Sequence[OpKind], channels: int,
                 stride: int, rng: np.random.Generator):
        if not from_node < to_node:
            raise StructuralError(f"edge ({from_node}, {to_node}) is not forward")
        self.from_node, self.to_node = from_node, to_node
        self.stride = stride
        self.kinds = sort_kinds(kinds)
        self.ops = {k.value: instantiate_op(k, channels, channels, stride, rng) for k in self.kinds}

    def drop(self, kind: OpKind) -> int:
        idx = self.kinds.index(kind)
        del self.kinds[idx]
        del self.ops[kind.value]
        return idx

    def forward(self, x: Tensor, weights: Tensor) -> Tensor:
        """``sum_o weights[o] * op_o(x)``; the zero op contributes nothing and is skipped."""
        if weights.shape != (len(self.kinds),):
            raise StructuralError(f"edge has {len(self.kinds)} ops but {weights.shape} weights")
        if list(self.ops) != [k.value for k in self.kinds]:
            raise StructuralError("edge op map is out of sync with its active kinds")
        live = [i for i, k in enumerate(self.kinds) if k is not OpKind.NONE]
        if not live:
            return self.ops[OpKind.NONE.value](x)
        outs = [self.ops[self.kinds[i].value](x) for i in live]
        w = weights if len(live) == len(self.kinds) else F.getitem(weights, (np.array(live),))
        return F.weighted_sum(outs, w)


def mixed_edge_forward(edge: MixedEdge, x: Tensor, alphas: Tensor) -> Tensor:
    return edge(x, F.softmax(alphas, axis=-1))


def _preprocessors(spec: CellSpec, rng):
    c_pp, c_p = spec.inputs()
    pre0 = FactorizedReduce(c_pp, spec.channels, rng) if spec.reduction_prev else ConvNorm(c_pp, spec.channels, rng)
    pre1 = ConvNorm(c_p, spec.channels, rng)
    return pre0, pre1


def _check_inputs(s0: Tensor, s1: Tensor) -> None:
    if s0.shape[2:] != s1.shape[2:] or s0.shape[0] != s1.shape[0]:
        raise DimensionError(f"cell inputs disagree after preprocessing: {s0.shape} vs {s1.shape}")


class SearchCell(Module):
    def __init__(self, spec: CellSpec, kinds: Sequence[OpKind], rng: np.random.Generator):
        self.spec = spec
        self.reduction = spec.reduction
        self.preprocess0, self.preprocess1 = _preprocessors(spec, rng)
        self.edges = [
            MixedEdge(i, j, kinds, spec.channels, 2 if (spec.reduction and i < N_INPUT_NODES) else 1, rng)
            for i, j in EDGES
        ]

    @property
    def kinds(self) -> list[OpKind]:
        return list(self.edges[0].kinds)

    def drop(self, kind: OpKind) -> int:
        idx = [e.drop(kind) for e in self.edges]
        return idx[0]

    def forward(self, s0: Tensor, s1: Tensor, weights: Tensor) -> Tensor:
        s0, s1 = self.preprocess0(s0), self.preprocess1(s1)
        _check_inputs(s0, s1)
        states = [s0, s1]
        e = 0
        for j in range(N_INTERNAL_NODES):
            terms = []
            for i in range(len(states)):
                terms.append(self.edges[e](states[i], F.getitem(weights, (e,))))
                e += 1
            states.append(F.add(*terms))
        return F.concat(states[N_INPUT_NODES:], axis=1)


def cell_forward(cell: SearchCell, input0: Tensor, input1: Tensor, alphas: Tensor) -> Tensor:
    return cell(input0, input1, F.softmax(alphas, axis=-1))


# ---------------------------------------------------------------- derivation


def _softmax_rows(alphas: np.ndarray) -> np.ndarray:
    a = np.asarray(alphas, dtype=np.float64)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def derive_genotype(alphas: np.ndarray, kinds: Sequence[OpKind], reduction: bool = False) -> CellGenotype:
    """Per edge the best non-'none' op; per node the two strongest incoming edges.

    Ties go to the lower source node, then to the earlier catalog op.
    """
    kinds = [OpKind(k) for k in kinds]
    if [catalog_index(k) for k in kinds] != sorted(catalog_index(k) for k in kinds):
        raise StructuralError("op kinds must be in catalog order")
    alphas = np.asarray(alphas)
    if alphas.shape != (N_EDGES, len(kinds)):
        raise StructuralError(f"alphas shape {alphas.shape} != ({N_EDGES}, {len(kinds)})")
    probs = _softmax_rows(alphas)
    candidates = [i for i, k in enumerate(kinds) if k is not OpKind.NONE]
    if not candidates:
        raise StructuralError("no non-'none' operation to derive")

    best = []
    for e in range(N_EDGES):
        bi = candidates[0]
        for i in candidates[1:]:
            if probs[e, i] > probs[e, bi]:
                bi = i
        best.append((probs[e, bi], kinds[bi]))

    nodes = []
    e = 0
    for j in range(N_INTERNAL_NODES):
        n_in = N_INPUT_NODES + j
        incoming = [(best[e + i][0], i, best[e + i][1]) for i in range(n_in)]
        e += n_in
        if len(incoming) < 2:
            raise StructuralError(f"node {n_in} has fewer than 2 incoming edges")
        incoming.sort(key=lambda t: (-t[0], t[1]))
        keep = sorted(incoming[:2], key=lambda t: t[1])
        nodes.append(tuple((src, kind) for _, src, kind in keep))
    return CellGenotype(nodes=tuple(nodes), reduction=reduction)


# ---------------------------------------------------------------- evaluation-time


class DiscreteCell(Module):
    def __init__(self, spec: CellSpec, genotype: CellGenotype, rng: np.random.Generator):
        self.spec = spec
        self.reduction = spec.reduction
        self.genotype = genotype
        self.preprocess0, self.preprocess1 = _preprocessors(spec, rng)
        self.ops = []
        for j, edges in enumerate(genotype.nodes):
            for src, kind in edges:
                stride = 2 if (spec.reduction and src < N_INPUT_NODES) else 1
                self.ops.append(instantiate_op(kind, spec.channels, spec.channels, stride, rng))

    def forward(self, s0: Tensor, s1: Tensor, weights=None) -> Tensor:
        s0, s1 = self.preprocess0(s0), self.preprocess1(s1)
        _check_inputs(s0, s1)
        states = [s0, s1]
        for j, edges in enumerate(self.genotype.nodes):
            (sa, _), (sb, _) = edges
            states.append(F.add(self.ops[2 * j](states[sa]), self.ops[2 * j + 1](states[sb])))
        return F.concat(states[N_INPUT_NODES:], axis=1)


def genotype_forward(cell: DiscreteCell, input0: Tensor, input1: Tensor) -> Tensor:
    return cell(input0, input1)


def discretize(cell: SearchCell, genotype: CellGenotype) -> DiscreteCell:
    """A discrete cell that reuses the search cell's weights for the retained edges."""
    import copy

    out = DiscreteCell.__new__(DiscreteCell)
    out.spec = cell.spec
    out.reduction = cell.reduction
    out.genotype = genotype
    out.preprocess0 = copy.deepcopy(cell.preprocess0)
    out.preprocess1 = copy.deepcopy(cell.preprocess1)
    out.ops = []
    for j, edges in enumerate(genotype.nodes):
        for src, kind in edges:
            e = EDGES.index((src, j + N_INPUT_NODES))
            out.ops.append(copy.deepcopy(cell.edges[e].ops[OpKind(kind).value]))
    return out


def uniform_kinds(catalog: Sequence[OpKind] = CATALOG) -> list[OpKind]:
    return sort_kinds(catalog)
