"""Post-search rewrites of the cell chain: dense connections or an ASPP head.

Rewrites never touch a cell's internals. They return a new model and leave the
input model as it was; :func:`verify_rewrite` checks that promise.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.module import Module
from .autodiff.tensor import Tensor
from .errors import ConfigError, IntegrityError, RewriteError
from .model import CellStack, HybridModel
from .ops import GroupNorm, Conv2d, SepUnit

DEFAULT_ASPP_RATES = (1, 2, 4, 8)
BLOCK_INPUT = "B"


@dataclass
class AggregationPlan:
    mode: str = "sequential"  # sequential | dense | aspp
    projections: list[dict] = field(default_factory=list)
    aspp_rates: Optional[tuple[int, ...]] = None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "projections": self.projections,
                "aspp_rates": list(self.aspp_rates) if self.aspp_rates else None}

    @classmethod
    def from_dict(cls, d: dict) -> "AggregationPlan":
        rates = tuple(d["aspp_rates"]) if d.get("aspp_rates") else None
        return cls(d["mode"], list(d.get("projections", [])), rates)


# ---------------------------------------------------------------- dense


def _out_channels(cell) -> int:
    return cell.spec.out_channels


def identity_projection(c_in: int, c_out: int, rng) -> Conv2d:
    """1x1 conv that passes the last ``c_out`` input channels through unchanged."""
    conv = Conv2d(c_in, c_out, 1, rng)
    w = np.zeros((c_out, c_in, 1, 1))
    w[np.arange(c_out), c_in - c_out + np.arange(c_out), 0, 0] = 1.0
    conv.weight.data = w.astype(conv.weight.data.dtype)
    return conv


def group_connections(stack: CellStack, group: Sequence[int]) -> list[tuple[object, int]]:
    """Edges (source, target position) inside one resolution group, read off the stack.

    Sources are group positions or ``"B"`` for the group input.
    """
    edges = []
    for c, i in enumerate(group):
        if c == 0:
            srcs = [BLOCK_INPUT]
        elif str(i) in stack.dense_proj:
            srcs = [BLOCK_INPUT] + list(range(c))
        else:
            srcs = [BLOCK_INPUT if c == 1 else c - 2, c - 1]
        edges.extend((s, c) for s in srcs)
    return edges


def extra_connections(stack: CellStack) -> list[int]:
    """Per group, connections beyond the plain chain."""
    out = []
    for g in stack.groups():
        n = len(g)
        chain = 1 + 2 * (n - 1) if n else 0
        out.append(len(group_connections(stack, g)) - chain)
    return out


def reaggregate_dense(model: HybridModel, seed: int = 0) -> HybridModel:
    """Every normal cell at group position c >= 2 gets its first input from a 1x1
    projection over the group input and all outputs before its predecessor.

    Projections start as the identity on the slot the chain used, so the rewritten
    model computes exactly what the chain computed.
    """
    if model.aggregation != "sequential":
        raise RewriteError(f"model is already re-aggregated ({model.aggregation})")
    new = copy.deepcopy(model)
    rng = np.random.default_rng([seed, 41])
    plan = AggregationPlan("dense")
    for s_idx, stack in enumerate(new.stacks()):
        for g in stack.groups():
            res = _group_stride(stack, g)
            if res is not None:
                raise RewriteError(f"stack {s_idx}: cell {res} changes resolution inside a group")
            for c, i in enumerate(g[2:], start=2):
                cell = stack.cells[i]
                first = stack.cells[g[0]]
                c_block = first.spec.inputs()[1]
                widths = [c_block] + [_out_channels(stack.cells[g[p]]) for p in range(c - 1)]
                c_out = cell.spec.inputs()[0]
                if widths[-1] != c_out:
                    raise RewriteError(f"cell {i}: chain input width {widths[-1]} != expected {c_out}")
                proj = identity_projection(sum(widths), c_out, rng)
                stack.dense_proj[str(i)] = proj
                plan.projections.append({"stack": s_idx, "cell": i, "group_position": c,
                                         "sources": [BLOCK_INPUT] + list(range(c - 1)),
                                         "in_channels": sum(widths), "out_channels": c_out,
                                         "params": proj.param_count()})
        stack.mode = "dense"
    new.aggregation = "dense"
    new.plan = plan
    new.assign_names()
    return new


def _group_stride(stack: CellStack, group) -> Optional[int]:
    """First cell inside a group that would change resolution, if any."""
    for i in group:
        if stack.cells[i].reduction:
            return i
    return None


# ---------------------------------------------------------------- ASPP


class AsppBranch(Module):
    def __init__(self, c_in, c_out, rate, rng):
        self.rate = rate
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=rate, dilation=rate)
        self.norm = GroupNorm(c_out)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class AsppCell(Module):
    """Fuse a low-res and a high-res tap, then run parallel dilated branches plus
    a pooled branch from the low-res input; concatenate and project to ``out_channels``."""

    def __init__(self, c_low, c_high, out_channels, rates, rng, branch_channels: Optional[int] = None):
        bc = branch_channels or max(out_channels // 2, 1)
        self.rates = tuple(rates)
        self.branches = [AsppBranch(c_low + c_high, bc, r, rng) for r in self.rates]
        self.pool_conv = Conv2d(c_low, bc, 1, rng)
        self.pool_norm = GroupNorm(bc)
        self.project = Conv2d(bc * (len(self.rates) + 1), out_channels, 1, rng)
        self.project_norm = GroupNorm(out_channels)
        self.out_channels = out_channels

    def fuse_inputs(self, low: Tensor, high: Tensor) -> Tensor:
        if high.shape[2] != 2 * low.shape[2] or high.shape[3] != 2 * low.shape[3]:
            raise RewriteError(f"high-res tap {high.shape[2:]} is not twice low-res tap {low.shape[2:]}")
        return F.concat([F.bilinear_upsample(low, 2), high], axis=1)

    def branch_outputs(self, low: Tensor, high: Tensor) -> list[Tensor]:
        x = self.fuse_inputs(low, high)
        outs = [b(x) for b in self.branches]
        pooled = F.pool2d(low, "avg", kernel=3, stride=1, padding=1)
        outs.append(F.bilinear_upsample(F.relu(self.pool_norm(self.pool_conv(pooled))), 2))
        return outs

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        return F.relu(self.project_norm(self.project(F.concat(self.branch_outputs(low, high), axis=1))))


class SepBlock(Module):
    def __init__(self, channels, rng):
        self.unit = SepUnit(channels, channels, 3, rng)
        self.norm = GroupNorm(channels)

    def forward(self, x):
        return F.relu(self.norm(self.unit(x)))


def validate_rates(rates: Sequence[int]) -> tuple[int, ...]:
    rates = tuple(int(r) for r in rates)
    if not rates or any(r < 1 for r in rates):
        raise ConfigError(f"aggregation.aspp_rates: need positive rates, got {rates}")
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ConfigError(f"aggregation.aspp_rates: must be strictly increasing, got {rates}")
    return rates


def tap_shapes(model: HybridModel) -> tuple[tuple, tuple]:
    size = model.backbone.spec.image_size
    probe = Tensor(np.zeros((1, model.backbone.spec.in_channels, size, size)))
    t4, t8 = model.features(probe)
    return t8.shape[1:], t4.shape[1:]


def reaggregate_aspp(model: HybridModel, rates: Sequence[int] = DEFAULT_ASPP_RATES,
                     low_res_tap: Optional[tuple] = None, high_res_tap: Optional[tuple] = None,
                     seed: int = 0) -> HybridModel:
    """Head the decoder with an ASPP cell; the first block then runs at the high-res
    tap size and a separable conv produces its output."""
    rates = validate_rates(rates)
    if model.task != "segmentation":
        raise RewriteError("the ASPP rewrite applies to segmentation decoders")
    if model.aggregation != "sequential":
        raise RewriteError(f"model is already re-aggregated ({model.aggregation})")
    if low_res_tap is None or high_res_tap is None:
        low_res_tap, high_res_tap = tap_shapes(model)
    if tuple(high_res_tap[1:]) != tuple(2 * d for d in low_res_tap[1:]):
        raise RewriteError(f"tap ratio must be 2: high {tuple(high_res_tap)} vs low {tuple(low_res_tap)}")
    new = copy.deepcopy(model)
    rng = np.random.default_rng([seed, 43])
    c_low, c_high = low_res_tap[0], high_res_tap[0]
    first = new.blocks[0].cells[0]
    c_in = first.spec.inputs()[1]
    new.aspp = AsppCell(c_low, c_high, c_in, rates, rng)
    o1 = new.blocks[0].cells[-1].spec.out_channels
    new.aspp_sep = SepBlock(o1, rng)
    new.aggregation = "aspp"
    new.plan = AggregationPlan("aspp", [], rates)
    new.assign_names()
    return new


def reaggregate(model: HybridModel, mode: str, **kwargs) -> HybridModel:
    if mode == "sequential":
        return copy.deepcopy(model)
    if mode == "dense":
        return reaggregate_dense(model, **kwargs)
    if mode == "aspp":
        return reaggregate_aspp(model, **kwargs)
    raise ConfigError(f"aggregation.mode: unknown mode {mode!r}")


# ---------------------------------------------------------------- verification


REWRITE_PREFIXES = ("stack.dense_proj.", "blocks.0.dense_proj.", "blocks.1.dense_proj.", "aspp.", "aspp_sep.")


@dataclass
class RewriteReport:
    genotypes_equal: bool
    cell_params_equal: bool
    additions_confined: bool
    added_params: int
    expected_added_params: int
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"genotypes_equal": self.genotypes_equal, "cell_params_equal": self.cell_params_equal,
                "additions_confined": self.additions_confined, "added_params": self.added_params,
                "expected_added_params": self.expected_added_params, "failures": self.failures, "ok": self.ok}


def _cell_signature(cell):
    if hasattr(cell, "genotype"):
        return cell.genotype
    return tuple(k.value for k in cell.kinds)


def verify_rewrite(original: HybridModel, rewritten: HybridModel, strict: bool = True) -> RewriteReport:
    """Check (a) per-cell genotypes, (b) per-cell parameters, (c) that new parameters
    live only in projection / ASPP layers and match the plan's size."""
    failures = []
    a_cells, b_cells = original.all_cells(), rewritten.all_cells()
    genotypes_equal = len(a_cells) == len(b_cells) and all(
        _cell_signature(x) == _cell_signature(y) for x, y in zip(a_cells, b_cells))
    if not genotypes_equal:
        failures.append("(a) per-cell genotypes differ")
    if original.derive() != rewritten.derive():
        genotypes_equal = False
        failures.append("(a) derived genotypes differ")

    params_equal = genotypes_equal
    if genotypes_equal:
        for k, (x, y) in enumerate(zip(a_cells, b_cells)):
            sa, sb = x.state_dict(), y.state_dict()
            if sa.keys() != sb.keys() or any(not np.array_equal(sa[n], sb[n]) for n in sa):
                params_equal = False
                failures.append(f"(b) parameters of cell {k} differ")
                break
    orig = original.state_dict()
    new = rewritten.state_dict()
    for name, v in orig.items():
        if name not in new:
            failures.append(f"(c) parameter {name} was removed")
        elif not np.array_equal(v, new[name]) and not name.startswith(("stack.cells", "blocks.")):
            failures.append(f"(c) parameter {name} outside the cells changed")
    added = [n for n in new if n not in orig]
    confined = all(n.startswith(REWRITE_PREFIXES) for n in added)
    if not confined:
        failures.append(f"(c) parameters added outside rewrite layers: {[n for n in added if not n.startswith(REWRITE_PREFIXES)]}")
    n_added = int(sum(new[n].size for n in added))
    plan = getattr(rewritten, "plan", None)
    if plan is not None and plan.mode == "dense":
        expected = int(sum(p["params"] for p in plan.projections))
    elif plan is not None and plan.mode == "aspp":
        expected = int(rewritten.aspp.param_count() + rewritten.aspp_sep.param_count())
    else:
        expected = 0
    if n_added != expected:
        failures.append(f"(c) added {n_added} parameters, plan accounts for {expected}")
    report = RewriteReport(genotypes_equal, params_equal, confined, n_added, expected, failures)
    if strict and failures:
        err = IntegrityError("; ".join(failures))
        err.report = report
        raise err
    return report
