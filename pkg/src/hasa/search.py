"""Progressive growing search.

Each stage trains the supernet with alternating weight / architecture updates.
Between stages the weakest candidate operation is dropped from every edge and
new cells, copied from the cell they are stacked behind, are appended.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import io
from .autodiff.optim import SGD, Adam
from .autodiff.tensor import Tensor, backward
from .cell import N_EDGES, Genotype
from .data import ClassificationSet
from .errors import ConfigError, NumericalError
from .model import BackboneSpec, HybridModel, build_backbone, build_classifier, build_segmenter
from .ops import CATALOG, SEGMENTATION_CATALOG, OpKind, catalog_index, sort_kinds
from .train import FeatureCache, cosine_lr, targets_of, task_loss

PARAMETRIC = {OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5, OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5,
              OpKind.MIXCONV_35, OpKind.SE_BLOCK}
N_DECODER_BLOCKS = 2


@dataclass(frozen=True)
class SearchConfig:
    K: int = 2
    initial_cells: int = 3
    cells_added_per_stage: int = 2
    epochs_per_stage: int = 5
    arch_split_fraction: float = 0.3
    weight_lr: float = 0.025
    weight_lr_min: float = 0.01
    arch_lr: float = 3e-4
    weight_optimizer: str = "sgd"  # sgd (momentum 0.9) | adam
    warmup_epochs: int = 0  # leading epochs of the first stage that train weights only, capped so one arch epoch remains
    batch_size: int = 16
    task: str = "classification"
    seed: int = 0
    channels: int = 8
    n_classes: int = 9
    catalog: tuple[str, ...] = tuple(k.value for k in CATALOG)
    alpha_sharing: str = "shared"
    scorer: str = "alpha"  # alpha | isolation
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    @property
    def weight_fraction(self) -> float:
        return 1.0 - self.arch_split_fraction

    @property
    def final_cells(self) -> int:
        return self.initial_cells + self.K * self.cells_added_per_stage

    def kinds(self) -> list[OpKind]:
        return sort_kinds(OpKind.parse(k) for k in self.catalog)

    def validate(self) -> "SearchConfig":
        def bad(path, msg):
            raise ConfigError(f"search.{path}: {msg}")

        if self.task not in ("classification", "segmentation"):
            bad("task", f"unknown task {self.task!r}")
        if self.K < 0:
            bad("K", "must be >= 0")
        if self.initial_cells < 1:
            bad("initial_cells", "must be >= 1")
        if self.cells_added_per_stage < 0:
            bad("cells_added_per_stage", "must be >= 0")
        if self.epochs_per_stage < 1:
            bad("epochs_per_stage", "must be >= 1")
        if not 0.0 < self.arch_split_fraction < 1.0:
            bad("arch_split_fraction", "must lie in (0, 1)")
        if self.weight_lr < 0 or self.arch_lr < 0 or self.weight_lr_min < 0:
            bad("weight_lr", "learning rates must be non-negative")
        if self.warmup_epochs < 0:
            bad("warmup_epochs", "must be >= 0")
        if self.weight_optimizer not in ("sgd", "adam"):
            bad("weight_optimizer", "must be 'sgd' or 'adam'")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.channels < 2 or self.channels % 2:
            bad("channels", "must be an even number >= 2")
        if self.alpha_sharing not in ("shared", "per_cell"):
            bad("alpha_sharing", "must be 'shared' or 'per_cell'")
        if self.scorer not in ("alpha", "isolation"):
            bad("scorer", "must be 'alpha' or 'isolation'")
        kinds = [OpKind.parse(k) for k in self.catalog]
        if len(set(kinds)) != len(kinds):
            bad("catalog", "duplicate op names")
        if OpKind.NONE not in kinds:
            bad("catalog", "must contain 'none'")
        non_none = [k for k in kinds if k is not OpKind.NONE]
        if len(non_none) - self.K < 2:
            bad("K", f"{self.K} drops would leave fewer than 2 non-'none' ops")
        if len([k for k in kinds if k in PARAMETRIC]) - self.K < 1:
            bad("K", "a parametric op might not survive the schedule")
        if self.task == "segmentation":
            if OpKind.MAX_POOL_3X3 in kinds:
                bad("catalog", "segmentation candidates exclude pooling")
            if self.initial_cells % N_DECODER_BLOCKS or self.cells_added_per_stage % N_DECODER_BLOCKS:
                bad("initial_cells", f"segmentation cell counts must split evenly over {N_DECODER_BLOCKS} blocks")
        else:
            n_rep = len(self.backbone.stages) - self.backbone.frozen_through
            if self.initial_cells < max(2, n_rep):
                bad("initial_cells", f"must be >= {max(2, n_rep)} to hold the reduction cells")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        if "backbone" in d and isinstance(d["backbone"], dict):
            from .model import StageSpec

            b = dict(d["backbone"])
            if "stages" in b:
                b["stages"] = tuple(StageSpec(**s) if isinstance(s, dict) else s for s in b["stages"])
            d["backbone"] = BackboneSpec(**b)
        if "catalog" in d:
            d["catalog"] = tuple(d["catalog"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"search.{sorted(unknown)[0]}: unknown field")
        return cls(**d)


_SEG_CATALOG = tuple(k.value for k in SEGMENTATION_CATALOG)
_SEG_BACKBONE = BackboneSpec(pretext_corpus="segmentation")

PRESETS = {
    "desk-class": SearchConfig(epochs_per_stage=10, warmup_epochs=4, weight_optimizer="adam", weight_lr=3e-3,
                               weight_lr_min=3e-4, arch_lr=3e-3),
    "desk-seg": SearchConfig(task="segmentation", initial_cells=2, cells_added_per_stage=2, batch_size=8,
                             weight_lr=3e-3, weight_lr_min=1e-3, weight_optimizer="adam", n_classes=3, catalog=_SEG_CATALOG,
                             backbone=_SEG_BACKBONE),
    "paper-class": SearchConfig(K=3, initial_cells=5, cells_added_per_stage=2, epochs_per_stage=25,
                                batch_size=36, weight_lr=0.025, weight_lr_min=0.025),
    "paper-seg": SearchConfig(task="segmentation", K=2, initial_cells=2, cells_added_per_stage=2,
                              epochs_per_stage=25, batch_size=8, weight_lr=1e-4, weight_lr_min=1e-4, weight_optimizer="adam",
                              n_classes=3, catalog=_SEG_CATALOG, backbone=_SEG_BACKBONE),
}


def preset(name: str, **overrides) -> SearchConfig:
    if name not in PRESETS:
        raise ConfigError(f"search.preset: unknown preset {name!r} (choose from {sorted(PRESETS)})")
    return replace(PRESETS[name], **overrides).validate()


# ---------------------------------------------------------------- state


@dataclass
class StageState:
    stage_index: int
    active_ops: list[OpKind]
    cell_count: int
    supernet: HybridModel
    history: list[dict] = field(default_factory=list)  # per epoch: train_loss, val_loss


@dataclass
class SearchReport:
    seed: int
    config_hash: str
    stages: list[dict] = field(default_factory=list)
    dropped_ops: list[str] = field(default_factory=list)
    genotype: Optional[dict] = None
    wall_time: float = 0.0
    interrupted: bool = False

    @property
    def cell_counts(self) -> list[int]:
        return [s["cell_count"] for s in self.stages]

    @property
    def op_set_sizes(self) -> list[int]:
        return [len(s["active_ops"]) for s in self.stages]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- data split


def split_search_data(dataset, fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(arch indices, weight indices). Classification sets are split per class,
    with the rounding remainder assigned by largest fractional part."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction {fraction} must lie in (0, 1)")
    n = len(dataset)
    rng = np.random.default_rng([seed, 21])
    target = int(np.floor(fraction * n + 0.5))
    if isinstance(dataset, ClassificationSet):
        classes = np.unique(dataset.labels)
        members = [np.flatnonzero(dataset.labels == c) for c in classes]
        exact = np.array([fraction * len(m) for m in members])
        quota = np.floor(exact).astype(int)
        order = sorted(range(len(classes)), key=lambda i: (-(exact[i] - quota[i]), i))
        for i in order[: target - quota.sum()]:
            quota[i] += 1
        arch = np.concatenate([rng.permutation(m)[:q] for m, q in zip(members, quota)])
    else:
        arch = rng.permutation(n)[:target]
    arch = np.sort(arch)
    weight = np.setdiff1d(np.arange(n), arch)
    if len(arch) == 0 or len(weight) == 0:
        raise ConfigError(f"split of {n} samples at fraction {fraction} leaves an empty partition")
    return arch, weight


# ---------------------------------------------------------------- one step


@contextlib.contextmanager
def _no_grad(params):
    """Treat ``params`` as constants for the duration (skips their gradient work)."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def make_optimizers(supernet: HybridModel, config: SearchConfig) -> dict:
    return {
        "weight": (SGD(supernet.weight_parameters(), lr=config.weight_lr) if config.weight_optimizer == "sgd"
                   else Adam(supernet.weight_parameters(), lr=config.weight_lr)),
        "arch": Adam(supernet.arch_parameters(), lr=config.arch_lr, beta1=0.5, beta2=0.999),
    }


def bilevel_step(supernet: HybridModel, arch_batch, weight_batch, optimizers: dict,
                 update_arch: bool = True) -> tuple[float, float]:
    """One weight update on ``weight_batch`` (alphas held fixed), then one
    architecture update on ``arch_batch`` (weights held fixed). With
    ``update_arch=False`` the second half only measures the validation loss.

    Batches are ``(inputs, targets)``; inputs are images or cached backbone features.
    """
    w_params = supernet.weight_parameters()
    a_params = supernet.arch_parameters()

    def loss_on(batch):
        x, y = batch
        logits = supernet(None, features=x) if not isinstance(x, np.ndarray) else supernet(Tensor(x))
        return task_loss(supernet.task, logits, y)

    with _no_grad(a_params):
        l_train = loss_on(weight_batch)
        backward(l_train, w_params)
    optimizers["weight"].step()

    with _no_grad(w_params):
        l_val = loss_on(arch_batch)
        if update_arch:
            backward(l_val, a_params)
    if update_arch:
        optimizers["arch"].step()
    return float(l_train.data), float(l_val.data)


# ---------------------------------------------------------------- scoring


def score_operations(supernet: HybridModel) -> dict[OpKind, float]:
    """Mean softmax architecture weight of each op over every mixed edge of every cell."""
    kinds = supernet.kinds
    total = np.zeros(len(kinds))
    count = 0
    for i, _ in enumerate(supernet.all_cells()):
        a = supernet.alpha_for(i).data.astype(np.float64)
        e = np.exp(a - a.max(axis=1, keepdims=True))
        total += (e / e.sum(axis=1, keepdims=True)).sum(axis=0)
        count += N_EDGES
    mean = total / count
    return {k: float(mean[j]) for j, k in enumerate(kinds) if k is not OpKind.NONE}


def score_operations_isolation(supernet: HybridModel, val_batch) -> dict[OpKind, float]:
    """Score each op by minus the validation loss of the supernet restricted to that op alone."""
    x, y = val_batch
    saved = {k: a.data for k, a in supernet.alphas.items()}
    scores = {}
    try:
        for j, kind in enumerate(supernet.kinds):
            if kind is OpKind.NONE:
                continue
            for k, a in supernet.alphas.items():
                one_hot = np.full_like(saved[k], -1e4)
                one_hot[:, j] = 0.0
                a.data = one_hot
            logits = supernet(None, features=x)
            scores[kind] = -float(task_loss(supernet.task, logits, y).data)
    finally:
        for k, a in supernet.alphas.items():
            a.data = saved[k]
    return scores


def weakest_op(scores: dict[OpKind, float]) -> OpKind:
    """Lowest score; ties resolved toward the earlier catalog op."""
    return min(scores, key=lambda k: (scores[k], catalog_index(k)))


# ---------------------------------------------------------------- growth


def grow_stage(state: StageState, config: SearchConfig, scores: Optional[dict] = None) -> tuple[StageState, OpKind]:
    """Drop the weakest op everywhere, then append copied cells. Returns the new state and the dropped op."""
    if state.stage_index >= config.K:
        raise ConfigError(f"stage {state.stage_index} is already the last of K={config.K}")
    net = state.supernet
    scores = score_operations(net) if scores is None else scores
    non_none = [k for k in net.kinds if k is not OpKind.NONE]
    if len(non_none) - 1 < 2:
        raise ConfigError("dropping another op would leave fewer than 2 non-'none' ops (K too large)")
    dropped = weakest_op(scores)
    before = len(net.kinds)
    net.drop_op(dropped)
    if len(net.kinds) != before - 1:
        raise AssertionError("op set did not shrink by exactly one")
    if config.task == "segmentation":
        per_block = config.cells_added_per_stage // N_DECODER_BLOCKS
        for b in range(N_DECODER_BLOCKS):
            for _ in range(per_block):
                net.append_cell(b)
    else:
        for _ in range(config.cells_added_per_stage):
            net.append_cell()
    return StageState(state.stage_index + 1, list(net.kinds), net.cell_count, net), dropped


# ---------------------------------------------------------------- full search


def build_supernet(config: SearchConfig, backbone=None) -> HybridModel:
    backbone = backbone if backbone is not None else build_backbone(config.backbone)
    kinds = config.kinds()
    if config.task == "classification":
        return build_classifier(backbone, None, config.initial_cells, config.channels, config.n_classes,
                                seed=config.seed, search_kinds=kinds, alpha_sharing=config.alpha_sharing)
    return build_segmenter(backbone, None, N_DECODER_BLOCKS, config.channels, config.n_classes, seed=config.seed,
                           cells_per_block=config.initial_cells // N_DECODER_BLOCKS, search_kinds=kinds,
                           alpha_sharing=config.alpha_sharing)


def _checkpoint_path(directory, stage: int) -> Path:
    return Path(directory) / f"search_stage{stage}.ckpt"


FINAL_CHECKPOINT = "search_final.ckpt"


def _save_stage(directory, state: StageState, report: SearchReport, config: SearchConfig,
                path: Optional[Path] = None) -> None:
    net = state.supernet
    meta = {
        "kind": "search",
        "stage_index": state.stage_index,
        "active_ops": [k.value for k in state.active_ops],
        "cell_count": state.cell_count,
        "dropped_ops": list(report.dropped_ops),
        "stages": report.stages,
        "seed": config.seed,
        "config_hash": report.config_hash,
        "rng": "batch order derived from (seed, stage, epoch)",
    }
    tensors = {f"param.{k}": v for k, v in net.state_dict().items()}
    io.save_checkpoint(path or _checkpoint_path(directory, state.stage_index), tensors, meta)


def latest_stage_checkpoint(directory) -> Optional[Path]:
    found = sorted(Path(directory).glob("search_stage*.ckpt"), key=lambda p: int(p.stem[len("search_stage"):]))
    return found[-1] if found else None


def derivable_checkpoint(directory) -> Optional[Path]:
    """The end-of-search checkpoint if the run finished, else the latest stage start."""
    final = Path(directory) / FINAL_CHECKPOINT
    return final if final.exists() else latest_stage_checkpoint(directory)


def _restore(config: SearchConfig, path, backbone) -> tuple[StageState, SearchReport]:
    tensors, meta = io.load_checkpoint(path)
    if meta.get("kind") != "search" or meta.get("seed") != config.seed:
        raise ConfigError(f"{path} is not a search checkpoint for seed {config.seed}")
    net = build_supernet(config, backbone)
    state = StageState(0, list(net.kinds), net.cell_count, net)
    for name in meta["dropped_ops"]:
        kind = OpKind.parse(name)
        state, _ = grow_stage(state, config, scores={k: (0.0 if k is kind else 1.0) for k in net.kinds
                                                      if k is not OpKind.NONE})
    if state.stage_index != meta["stage_index"]:
        raise ConfigError(f"{path}: replayed stage {state.stage_index} != stored {meta['stage_index']}")
    net.load_state_dict({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    report = SearchReport(config.seed, meta["config_hash"], list(meta["stages"]), list(meta["dropped_ops"]))
    return state, report


def run_search(config: SearchConfig, dataset, backbone=None, checkpoint_dir=None, resume: bool = False,
               stop_after_stage: Optional[int] = None,
               log: Optional[Callable[[str], None]] = None) -> tuple[Genotype, SearchReport]:
    """Initial stage plus K grown stages of ``epochs_per_stage`` epochs each.

    With ``checkpoint_dir`` a checkpoint is written at the start of every stage
    and once more when the search ends;
    ``resume`` continues from the latest one. ``stop_after_stage`` ends the run
    once the following stage's checkpoint is on disk (a simulated interruption).
    """
    config.validate()
    t0 = time.perf_counter()
    chash = io.config_hash(config.to_dict())
    if backbone is None:
        backbone = build_backbone(config.backbone)
    ckpt = latest_stage_checkpoint(checkpoint_dir) if (resume and checkpoint_dir) else None
    if ckpt is not None:
        state, report = _restore(config, ckpt, backbone)
    else:
        net = build_supernet(config, backbone)
        state = StageState(0, list(net.kinds), net.cell_count, net)
        report = SearchReport(config.seed, chash)
    net = state.supernet

    arch_idx, weight_idx = split_search_data(dataset, config.arch_split_fraction, config.seed)
    cache = FeatureCache(net, dataset.images)
    targets = targets_of(dataset)
    bs = config.batch_size

    while True:
        k = state.stage_index
        if checkpoint_dir is not None:
            _save_stage(checkpoint_dir, state, report, config)
        if stop_after_stage is not None and k > stop_after_stage:
            report.interrupted = True
            break
        opts = make_optimizers(net, config)
        history = []
        for epoch in range(config.epochs_per_stage):
            opts["weight"].lr = cosine_lr(config.weight_lr, config.weight_lr_min, epoch, config.epochs_per_stage)
            warming = k == 0 and epoch < min(config.warmup_epochs, config.epochs_per_stage - 1)
            rng = np.random.default_rng([config.seed, 31, k, epoch])
            w_order = rng.permutation(weight_idx)
            a_order = rng.permutation(arch_idx)
            lt, lv = [], []
            for s in range(int(np.ceil(len(w_order) / bs))):
                wi = w_order[s * bs:(s + 1) * bs]
                ai = np.take(a_order, np.arange(s * bs, s * bs + min(bs, len(a_order))), mode="wrap")
                try:
                    l_train, l_val = bilevel_step(net, (cache.get(ai), targets[ai]),
                                                  (cache.get(wi), targets[wi]), opts,
                                                  update_arch=not warming)
                except NumericalError as exc:
                    raise NumericalError(f"stage {k} epoch {epoch} step {s}: {exc}") from exc
                lt.append(l_train)
                lv.append(l_val)
            history.append({"epoch": epoch, "train_loss": float(np.mean(lt)), "val_loss": float(np.mean(lv))})
            if log:
                log(f"stage {k} epoch {epoch}: train {history[-1]['train_loss']:.4f} "
                    f"val {history[-1]['val_loss']:.4f}")
        state.history = history
        entry = {"stage": k, "cell_count": state.cell_count, "active_ops": [o.value for o in state.active_ops],
                 "history": history}
        report.stages.append(entry)
        if k == config.K:
            break
        if config.scorer == "isolation":
            vi = arch_idx[:bs]
            scores = score_operations_isolation(net, (cache.get(vi), targets[vi]))
        else:
            scores = score_operations(net)
        entry["scores"] = {o.value: v for o, v in scores.items()}
        state, dropped = grow_stage(state, config, scores)
        report.dropped_ops.append(dropped.value)

    genotype = net.derive()
    if checkpoint_dir is not None and not report.interrupted:
        _save_stage(checkpoint_dir, state, report, config, Path(checkpoint_dir) / FINAL_CHECKPOINT)
    report.genotype = genotype.to_dict()
    report.wall_time = time.perf_counter() - t0
    return genotype, report
