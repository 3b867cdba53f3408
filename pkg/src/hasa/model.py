"""Hybrid models: a frozen pretext-trained stem, stacked cells, a task head."""
from __future__ import annotations

import copy
import functools
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.module import Module
from .autodiff.optim import Adam
from .autodiff.tensor import Parameter, Tensor, backward, record_activations
from .cell import (
    N_EDGES,
    CellSpec,
    DiscreteCell,
    Genotype,
    SearchCell,
    _preprocessors,
    derive_genotype,
)
from .errors import AssemblyError, ConfigError
from .ops import GroupNorm, Conv2d, Dense, OpKind, sort_kinds

SEG_CLASSES = 3  # background, ovary, follicle


# ---------------------------------------------------------------- backbone


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    downsample: int = 2
    res_blocks: int = 1


@dataclass(frozen=True)
class BackboneSpec:
    stages: tuple[StageSpec, ...] = (
        StageSpec(8), StageSpec(16), StageSpec(32), StageSpec(64), StageSpec(96),
    )
    frozen_through: int = 3
    pretext_seed: int = 0
    in_channels: int = 1
    pretext: bool = True
    pretext_steps: int = 60
    pretext_corpus: str = "classification"
    image_size: int = 64

    def __post_init__(self):
        for s in self.stages:
            if s.downsample not in (1, 2):
                raise ConfigError("stage downsample must be 1 or 2")
        if not 1 <= self.frozen_through <= len(self.stages):
            raise ConfigError(f"frozen_through must lie in 1..{len(self.stages)}")

    def cumulative_downsample(self, through: Optional[int] = None) -> int:
        n = len(self.stages) if through is None else through
        return int(np.prod([s.downsample for s in self.stages[:n]]))

    def channels_at(self, stage: int) -> int:
        return self.stages[stage - 1].out_channels


class ResidualBlock(Module):
    def __init__(self, channels, rng):
        self.squeeze = Conv2d(channels, channels // 2, 1, rng)
        self.norm1 = GroupNorm(channels // 2)
        self.expand = Conv2d(channels // 2, channels, 3, rng, padding=1)
        self.norm2 = GroupNorm(channels)

    def forward(self, x):
        y = F.relu(self.norm1(self.squeeze(x)))
        return F.add(x, F.relu(self.norm2(self.expand(y))))


class Stage(Module):
    def __init__(self, c_in, spec: StageSpec, rng):
        self.conv = Conv2d(c_in, spec.out_channels, 3, rng, stride=spec.downsample, padding=1)
        self.norm = GroupNorm(spec.out_channels)
        self.blocks = [ResidualBlock(spec.out_channels, rng) for _ in range(spec.res_blocks)]

    def forward(self, x):
        x = F.relu(self.norm(self.conv(x)))
        for b in self.blocks:
            x = b(x)
        return x


class Backbone(Module):
    """Staged residual feature extractor (small stand-in for DarkNet53 / MixNet)."""

    def __init__(self, spec: BackboneSpec, rng, n_stages: Optional[int] = None):
        self.spec = spec
        n = len(spec.stages) if n_stages is None else n_stages
        c = spec.in_channels
        self.stages = []
        for s in spec.stages[:n]:
            self.stages.append(Stage(c, s, rng))
            c = s.out_channels
        self.out_channels = c

    def forward(self, x, taps: Sequence[int] = ()):
        """Return the last stage output, or the outputs of the 1-based stages in ``taps``."""
        feats = []
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i in taps:
                feats.append(x)
        return feats if taps else x


def _pretext_images(spec: BackboneSpec) -> np.ndarray:
    from . import data

    size = spec.image_size
    if spec.pretext_corpus == "segmentation":
        ds = data.gen_segmentation_set(64, size, spec.pretext_seed + 7919)
    else:
        ds = data.gen_classification_set(8, size, spec.pretext_seed + 7919)
    imgs = ds.images
    if spec.in_channels != imgs.shape[1]:
        imgs = np.repeat(imgs, spec.in_channels, axis=1)
    return imgs


@functools.lru_cache(maxsize=8)
def _pretext_state(spec: BackboneSpec) -> dict:
    """Train the full stem briefly on 4-way rotation prediction; cached per spec."""
    from .losses import cross_entropy_loss

    rng = np.random.default_rng(spec.pretext_seed)
    net = Backbone(spec, rng)
    head = Dense(net.out_channels, 4, rng)
    net.assign_names()
    params = net.parameters() + head.parameters()
    for i, p in enumerate(head.parameters()):
        p.name = f"_pretext_head.{i}"
    opt = Adam(params, lr=3e-3)
    imgs = _pretext_images(spec)
    batch = 32
    for step in range(spec.pretext_steps):
        idx = rng.choice(len(imgs), size=batch, replace=False)
        rot = rng.integers(0, 4, size=batch)
        x = np.stack([np.rot90(imgs[i], k=int(k), axes=(1, 2)) for i, k in zip(idx, rot)])
        logits = head(F.pool2d(net(Tensor(x)), "global_avg"))
        loss = cross_entropy_loss(logits, rot)
        backward(loss, params)
        opt.step()
    return net.state_dict()


def build_backbone(spec: BackboneSpec, stem_state: Optional[dict] = None, n_stages: Optional[int] = None) -> Backbone:
    """Backbone with weights from the rotation pretext (or ``stem_state``), stages up to frozen_through frozen."""
    if stem_state is None:
        if not spec.pretext:
            raise ConfigError("pretext disabled and no stem checkpoint given")
        stem_state = _pretext_state(spec)
    net = Backbone(spec, np.random.default_rng(spec.pretext_seed), n_stages=n_stages)
    net.assign_names()
    net.load_state_dict(stem_state, strict=False)
    for i, stage in enumerate(net.stages, start=1):
        if i <= spec.frozen_through:
            stage.freeze()
    return net


# ---------------------------------------------------------------- cell stacks


class CellStack(Module):
    """A chain of cells. In 'dense' mode each normal cell at position c >= 2 of a
    resolution group takes a 1x1 projection of everything before its predecessor."""

    def __init__(self, cells: list, mode: str = "sequential"):
        self.cells = cells
        self.mode = mode
        self.dense_proj: dict = {}

    def groups(self) -> list[list[int]]:
        """Maximal runs of consecutive normal cells."""
        out, cur = [], []
        for i, c in enumerate(self.cells):
            if c.reduction:
                if cur:
                    out.append(cur)
                cur = []
            else:
                cur.append(i)
        if cur:
            out.append(cur)
        return out

    def forward(self, s0: Tensor, s1: Tensor, weights_for=None) -> Tensor:
        history: list[Tensor] = []  # outputs preceding the current group position
        group_start = True
        for i, cell in enumerate(self.cells):
            w = weights_for(i) if weights_for is not None else None
            if cell.reduction:
                group_start = True
            elif group_start:
                history = [s1]
                group_start = False
            proj = self.dense_proj.get(str(i))
            if proj is not None:
                s0 = proj(F.concat(history[:-1], axis=1))
            out = cell(s0, s1, w) if w is not None else cell(s0, s1)
            if not cell.reduction:
                history.append(out)
            s0, s1 = s1, out
        return s1


# ---------------------------------------------------------------- hybrid model


@dataclass
class ModelSpec:
    task: str  # classification | segmentation
    backbone: BackboneSpec
    channels: int = 8
    n_classes: int = 9
    n_cells: int = 5  # classification: chain length; segmentation: cells per decoder block
    n_blocks: int = 2
    reductions: Optional[tuple[int, ...]] = None  # explicit reduction positions (classification)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        b = dict(d["backbone"])
        b["stages"] = tuple(StageSpec(**s) for s in b["stages"])
        d = dict(d)
        d["backbone"] = BackboneSpec(**b)
        if d.get("reductions") is not None:
            d["reductions"] = tuple(d["reductions"])
        return cls(**d)


def default_reductions(n_cells: int, n_replaced: int) -> tuple[int, ...]:
    """One reduction cell at the start of each replaced stage."""
    return tuple(sorted({(k * n_cells) // n_replaced for k in range(n_replaced)}))


class HybridModel(Module):
    def __init__(self, spec: ModelSpec, backbone: Backbone, genotype: Optional[Genotype] = None,
                 search_kinds: Optional[Sequence[OpKind]] = None, seed: int = 0,
                 alpha_sharing: str = "shared"):
        if (genotype is None) == (search_kinds is None):
            raise AssemblyError("give exactly one of genotype / search_kinds")
        self.spec = spec
        self.task = spec.task
        self.aggregation = "sequential"
        self.plan = None
        self.genotype = genotype
        self.search = search_kinds is not None
        self.alpha_sharing = alpha_sharing
        self.backbone = backbone
        self._rng = np.random.default_rng(seed)
        rng = self._rng
        if self.search:
            self.kinds = sort_kinds(search_kinds)

        if spec.task == "classification":
            n_rep = len(spec.backbone.stages) - spec.backbone.frozen_through
            if spec.n_cells < max(2, n_rep):
                raise AssemblyError(f"n_cells must be >= {max(2, n_rep)}")
            reds = spec.reductions if spec.reductions is not None else default_reductions(spec.n_cells, max(n_rep, 1))
            if any(not 0 <= r < spec.n_cells for r in reds):
                raise AssemblyError(f"reduction positions {reds} outside 0..{spec.n_cells - 1}")
            self.spec = spec = replace(spec, reductions=tuple(sorted(reds)))
            c_in = backbone.out_channels
            cells, c_out = self._chain(c_in, c_in, spec.channels, [i in reds for i in range(spec.n_cells)], rng)
            self.stack = CellStack(cells)
            self.head = Dense(c_out, spec.n_classes, rng)
        elif spec.task == "segmentation":
            if len(backbone.stages) < 3 or backbone.spec.cumulative_downsample(3) != 8 or backbone.spec.cumulative_downsample(2) != 4:
                raise AssemblyError("segmentation needs backbone taps at 4x (stage 2) and 8x (stage 3)")
            if spec.n_blocks != 2:
                raise AssemblyError("the decoder has exactly two blocks")
            c4 = backbone.spec.channels_at(2)
            c8 = backbone.spec.channels_at(3)
            cells1, o1 = self._chain(c8, c8, spec.channels, [False] * spec.n_cells, rng)
            cells2, o2 = self._chain(c4, o1, spec.channels, [False] * spec.n_cells, rng)
            self.blocks = [CellStack(cells1), CellStack(cells2)]
            self.classifier = Conv2d(o2, spec.n_classes, 1, rng, bias=True)
            self.aspp = None
            self.aspp_sep = None
        else:
            raise AssemblyError(f"unknown task {spec.task!r}")

        if self.search:
            self._init_alphas(rng)
        self.assign_names()

    # -- construction helpers

    def _make_cell(self, cspec: CellSpec, rng):
        if self.search:
            return SearchCell(cspec, self.kinds, rng)
        return DiscreteCell(cspec, self.genotype.for_cell(cspec.reduction), rng)

    def _chain(self, c_pp, c_p, channels, reductions, rng):
        cells = []
        C = channels
        red_prev = False
        for red in reductions:
            if red:
                C *= 2
            cspec = CellSpec(C, red, red_prev, c_pp, c_p)
            cells.append(self._make_cell(cspec, rng))
            c_pp, c_p = c_p, cspec.out_channels
            red_prev = red
        return cells, c_p

    def _alpha(self, rng) -> Parameter:
        return Parameter(rng.uniform(-1e-3, 1e-3, size=(N_EDGES, len(self.kinds))))

    def _init_alphas(self, rng):
        if self.alpha_sharing == "shared":
            self.alphas = {"normal": self._alpha(rng)}
            if any(c.reduction for c in self.all_cells()):
                self.alphas["reduce"] = self._alpha(rng)
        elif self.alpha_sharing == "per_cell":
            self.alphas = {str(i): self._alpha(rng) for i, _ in enumerate(self.all_cells())}
        else:
            raise ConfigError(f"unknown alpha sharing {self.alpha_sharing!r}")

    # -- growth

    def append_cell(self, stack_index: int = -1) -> None:
        """Stack a normal cell behind the last cell of a stack, copying its parameters (and alphas).

        A preprocessor whose input width or kind no longer fits the new position is
        re-initialised; everything else is an exact copy. A reduction cell cannot be
        copied into a normal one, so a fresh normal cell is built in that case.
        """
        stack = self.stacks()[stack_index]
        src = stack.cells[-1]
        prev = src.spec
        cspec = CellSpec(prev.channels, False, prev.reduction, prev.c_prev, prev.out_channels)
        if src.reduction:
            new = self._make_cell(cspec, self._rng)
        else:
            new = copy.deepcopy(src)
            new.spec = cspec
            pre0, pre1 = _preprocessors(cspec, self._rng)
            if (prev.reduction_prev, prev.inputs()[0]) != (cspec.reduction_prev, cspec.inputs()[0]):
                new.preprocess0 = pre0
            if prev.inputs()[1] != cspec.inputs()[1]:
                new.preprocess1 = pre1
        flat_src = self.all_cells().index(src)
        stack.cells.append(new)
        if self.search and self.alpha_sharing == "per_cell":
            ordered = [self.alphas[str(i)] for i in range(len(self.alphas))]
            ordered.insert(self.all_cells().index(new), Parameter(ordered[flat_src].data.copy()))
            self.alphas = {str(i): a for i, a in enumerate(ordered)}
        if self.task == "classification":
            self.spec = replace(self.spec, n_cells=len(self.stack.cells))
        else:
            self.spec = replace(self.spec, n_cells=max(len(b.cells) for b in self.blocks))
        self.assign_names()

    def drop_op(self, kind: OpKind) -> None:
        """Remove one candidate op from every mixed edge and its alpha column."""
        if not self.search:
            raise AssemblyError("only a supernet has candidate ops to drop")
        idx = self.kinds.index(kind)
        for c in self.all_cells():
            c.drop(kind)
        del self.kinds[idx]
        for key, a in list(self.alphas.items()):
            self.alphas[key] = Parameter(np.delete(a.data, idx, axis=1))
        self.assign_names()

    # -- structure queries

    def stacks(self) -> list[CellStack]:
        return [self.stack] if self.task == "classification" else list(self.blocks)

    def all_cells(self) -> list:
        return [c for s in self.stacks() for c in s.cells]

    def alpha_for(self, flat_index: int) -> Parameter:
        if self.alpha_sharing == "per_cell":
            return self.alphas[str(flat_index)]
        cell = self.all_cells()[flat_index]
        return self.alphas["reduce" if cell.reduction else "normal"]

    def arch_parameters(self) -> list[Parameter]:
        return list(self.alphas.values()) if self.search else []

    def weight_parameters(self) -> list[Parameter]:
        arch = {id(p) for p in self.arch_parameters()}
        return [p for p in self.parameters() if id(p) not in arch and not p.frozen]

    def frozen_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.frozen]

    @property
    def cell_count(self) -> int:
        return len(self.all_cells())

    # -- forward

    def _weights_fn(self, offset: int):
        if not self.search:
            return None
        cache: dict = {}

        def weights_for(i):
            p = self.alpha_for(offset + i)
            if id(p) not in cache:
                cache[id(p)] = F.softmax(p, axis=-1)
            return cache[id(p)]

        return weights_for

    def features(self, x: Tensor):
        """Backbone output(s); frozen, so no graph is recorded."""
        if self.task == "classification":
            return self.backbone(x)
        return tuple(self.backbone(x, taps=(2, 3)))

    def forward(self, x: Tensor, features=None) -> Tensor:
        feats = self.features(x) if features is None else features
        if self.task == "classification":
            out = self.stack(feats, feats, self._weights_fn(0))
            return self.head(F.pool2d(out, "global_avg"))
        t4, t8 = feats
        n1 = len(self.blocks[0].cells)
        if self.aspp is not None:
            fused = self.aspp(t8, t4)
            o1 = self.aspp_sep(self.blocks[0](fused, fused, self._weights_fn(0)))
        else:
            o1 = F.bilinear_upsample(self.blocks[0](t8, t8, self._weights_fn(0)), 2)
        o2 = self.blocks[1](t4, o1, self._weights_fn(n1))
        return F.bilinear_upsample(self.classifier(o2), 4)

    # -- search-time derivation

    def derive(self) -> Genotype:
        if not self.search:
            return self.genotype
        cells = self.all_cells()

        def mean_alpha(reduction):
            if self.alpha_sharing == "shared":
                return self.alphas["reduce" if reduction else "normal"].data
            rows = [self.alpha_for(i).data for i, c in enumerate(cells) if c.reduction == reduction]
            return np.mean(rows, axis=0)

        normal = derive_genotype(mean_alpha(False), self.kinds, reduction=False)
        reduce = derive_genotype(mean_alpha(True), self.kinds, reduction=True) if any(c.reduction for c in cells) else None
        return Genotype(normal, reduce)


def build_classifier(backbone: Backbone, genotype: Optional[Genotype], n_cells: int, channels: int,
                     n_classes: int, seed: int = 0, search_kinds=None, reductions=None,
                     alpha_sharing: str = "shared") -> HybridModel:
    spec = ModelSpec("classification", backbone.spec, channels, n_classes, n_cells, reductions=reductions)
    kept = Backbone.__new__(Backbone)
    kept.spec = backbone.spec
    kept.stages = backbone.stages[: backbone.spec.frozen_through]
    kept.out_channels = backbone.spec.channels_at(backbone.spec.frozen_through)
    return HybridModel(spec, kept, genotype, search_kinds, seed, alpha_sharing)


def build_segmenter(backbone: Backbone, genotype: Optional[Genotype], n_blocks: int, channels: int,
                    n_classes: int = SEG_CLASSES, seed: int = 0, cells_per_block: int = 1,
                    search_kinds=None, alpha_sharing: str = "shared") -> HybridModel:
    spec = ModelSpec("segmentation", backbone.spec, channels, n_classes, cells_per_block, n_blocks)
    kept = Backbone.__new__(Backbone)
    kept.spec = backbone.spec
    kept.stages = backbone.stages[:3]
    kept.out_channels = backbone.spec.channels_at(3)
    return HybridModel(spec, kept, genotype, search_kinds, seed, alpha_sharing)


class BackboneClassifier(Module):
    """The un-replaced reference: full backbone + global pooling + dense head."""

    def __init__(self, backbone: Backbone, n_classes: int, seed: int = 0):
        self.backbone = backbone
        self.head = Dense(backbone.out_channels, n_classes, np.random.default_rng(seed))
        self.assign_names()

    def forward(self, x):
        return self.head(F.pool2d(self.backbone(x), "global_avg"))


# ---------------------------------------------------------------- profiling


@dataclass
class StageProfile:
    rows: list[dict] = field(default_factory=list)  # name, params, activation_bytes

    @property
    def total_params(self) -> int:
        return sum(r["params"] for r in self.rows)

    @property
    def total_activation_bytes(self) -> int:
        return sum(r["activation_bytes"] for r in self.rows)

    def to_dict(self) -> dict:
        return {"rows": self.rows, "total_params": self.total_params,
                "total_activation_bytes": self.total_activation_bytes}


def _count(mods) -> int:
    return sum(p.size for m in mods for p in m.parameters())


def _activation_bytes(fn, *args) -> tuple[object, int]:
    """Run ``fn``; bytes = 4 x element count of every tensor it produces."""
    with record_activations() as log:
        result = fn(*args)
    return result, 4 * sum(log)


def profile_stages(model: Module, reference_input: np.ndarray) -> StageProfile:
    """Exact per-stage/block parameter counts and activation memory at ``reference_input``."""
    prof = StageProfile()
    x = Tensor(reference_input)
    if isinstance(model, BackboneClassifier):
        for i, stage in enumerate(model.backbone.stages, start=1):
            x, nbytes = _activation_bytes(stage, x)
            prof.rows.append({"name": f"stage{i}", "params": stage.param_count(), "activation_bytes": nbytes})
        _, nbytes = _activation_bytes(lambda t: model.head(F.pool2d(t, "global_avg")), x)
        prof.rows.append({"name": "head", "params": model.head.param_count(), "activation_bytes": nbytes})
        return prof
    if not isinstance(model, HybridModel):
        raise TypeError(f"cannot profile {type(model).__name__}")

    for i, stage in enumerate(model.backbone.stages, start=1):
        x, nbytes = _activation_bytes(stage, x)
        prof.rows.append({"name": f"stage{i}", "params": stage.param_count(), "activation_bytes": nbytes})

    # Per-cell activations: shadow each cell's forward while the full model runs once.
    cells = model.all_cells()
    cell_bytes = [0] * len(cells)

    def wrap(i, cell):
        orig = type(cell).forward

        def fwd(*args, **kwargs):
            with record_activations() as log:
                out = orig(cell, *args, **kwargs)
            cell_bytes[i] += 4 * sum(log)
            return out

        return fwd

    for i, cell in enumerate(cells):
        cell.forward = wrap(i, cell)
    try:
        feats = model.features(Tensor(reference_input))
        _, total_bytes = _activation_bytes(model.forward, Tensor(reference_input), feats)
    finally:
        for cell in cells:
            del cell.forward
    for i, cell in enumerate(cells):
        prof.rows.append({"name": f"cell{i}", "params": cell.param_count(), "activation_bytes": cell_bytes[i]})

    if model.task == "classification":
        extra = [("head", [model.head]), ("dense_proj", list(model.stack.dense_proj.values()))]
    else:
        extra = [
            ("head", [model.classifier]),
            ("dense_proj", [p for b in model.blocks for p in b.dense_proj.values()]),
            ("aspp", [m for m in (model.aspp, model.aspp_sep) if m is not None]),
        ]
    rest = total_bytes - sum(cell_bytes)
    for name, mods in extra:
        if mods or name == "head":
            prof.rows.append({"name": name, "params": _count(mods),
                              "activation_bytes": rest if name == "head" else 0})
    if model.search:
        prof.rows.append({"name": "alphas", "params": sum(p.size for p in model.arch_parameters()),
                          "activation_bytes": 0})
    return prof


def clone(model: Module) -> Module:
    return copy.deepcopy(model)
