"""search -> derive -> reaggregate -> train -> eval, as plain functions over a RunConfig."""
from __future__ import annotations

import copy
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .cell import N_INPUT_NODES, N_INTERNAL_NODES, CellGenotype, Genotype
from .config import RunConfig
from .data import AugmentConfig, gen_classification_set, gen_segmentation_set
from .errors import ConfigError
from .metrics import classification_metrics, confusion_matrix, segmentation_metrics
from .model import BackboneSpec, HybridModel, ModelSpec, build_backbone, build_classifier, build_segmenter
from .ops import CATALOG, OpKind
from .reaggregate import AggregationPlan, reaggregate
from .search import run_search
from .train import FeatureCache, TrainConfig, predict, train_model

METRICS_HEADER = "model,seed,metric,class,value\n"


def make_datasets(cfg: RunConfig):
    d = cfg.data
    if cfg.task == "classification":
        train = gen_classification_set(d.n_per_class, d.size, d.seed)
        test = gen_classification_set(d.n_test_per_class, d.size, d.seed + 1_000_003)
    else:
        train = gen_segmentation_set(d.n_train, d.size, d.seed)
        test = gen_segmentation_set(d.n_test, d.size, d.seed + 1_000_003)
    return train, test


def backbone_spec(cfg: RunConfig) -> BackboneSpec:
    return replace(cfg.search.backbone, image_size=cfg.data.size)


def search(cfg: RunConfig, train, checkpoint_dir=None, resume=False, stop_after_stage=None, backbone=None, log=None):
    scfg = replace(cfg.search, backbone=backbone_spec(cfg))
    return run_search(scfg, train, backbone=backbone, checkpoint_dir=checkpoint_dir, resume=resume,
                      stop_after_stage=stop_after_stage, log=log)


def genotype_provenance(cfg: RunConfig, report) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.fingerprint(), "dropped_ops": list(report.dropped_ops)}


def random_genotype(rng: np.random.Generator, kinds=CATALOG, with_reduction: bool = True) -> Genotype:
    """Uniform random legal genotype: two distinct sources per node, non-'none' ops."""
    ops = [k for k in kinds if k is not OpKind.NONE]

    def cell(reduction):
        nodes = []
        for j in range(N_INTERNAL_NODES):
            srcs = sorted(rng.choice(N_INPUT_NODES + j, size=2, replace=False).tolist())
            nodes.append(tuple((int(s), ops[int(rng.integers(len(ops)))]) for s in srcs))
        return CellGenotype(tuple(nodes), reduction)

    return Genotype(cell(False), cell(True) if with_reduction else None)


def build_model(cfg: RunConfig, genotype: Genotype, backbone=None, seed: Optional[int] = None) -> HybridModel:
    seed = cfg.seed if seed is None else seed
    backbone = backbone if backbone is not None else build_backbone(backbone_spec(cfg))
    t = cfg.train
    if cfg.task == "classification":
        return build_classifier(backbone, genotype, t.cells, t.channels, cfg.search.n_classes, seed=seed)
    return build_segmenter(backbone, genotype, 2, t.channels, cfg.search.n_classes, seed=seed, cells_per_block=t.cells)


def _train_cfg(cfg: RunConfig, epochs: int, lr_scale: float = 1.0) -> TrainConfig:
    t = cfg.train
    aug = AugmentConfig(t.rotation_degrees, t.hflip_prob) if t.augment else None
    return TrainConfig(epochs=epochs, batch_size=t.batch_size, lr=t.lr * lr_scale, lr_min=t.lr_min * lr_scale,
                       augment=aug, seed=cfg.seed)


def train_pipeline(cfg: RunConfig, genotype: Genotype, train, backbone=None, mode: Optional[str] = None,
                   seed: Optional[int] = None) -> tuple[HybridModel, dict]:
    """Train the sequential model, then (for dense / aspp) rewrite it and fine-tune at a reduced lr."""
    mode = cfg.aggregation.mode if mode is None else mode
    model = build_model(cfg, genotype, backbone, seed)
    cache = None if cfg.train.augment else FeatureCache(model, train.images)
    curves = {"train": train_model(model, train, _train_cfg(cfg, cfg.train.epochs), cache=cache).to_dict()}
    if mode != "sequential":
        kwargs = {"rates": cfg.aggregation.aspp_rates} if mode == "aspp" else {}
        model = reaggregate(model, mode, seed=cfg.seed, **kwargs)
    if cfg.train.finetune_epochs:
        tc = _train_cfg(cfg, cfg.train.finetune_epochs, cfg.train.finetune_lr_scale)
        curves["finetune"] = train_model(model, train, tc, cache=cache).to_dict()
    return model, curves


def evaluate(cfg: RunConfig, model: HybridModel, test) -> dict:
    probs = predict(model, test)
    if cfg.task == "classification":
        preds = probs.argmax(axis=1)
        cm = confusion_matrix(preds, test.labels, probs.shape[1])
        m = classification_metrics(cm, cfg.eval.average)
        return {"metrics": m, "confusion": cm, "true_class_prob": probs[np.arange(len(preds)), test.labels]}
    pred = probs.argmax(axis=1)
    seg = segmentation_metrics(pred, test.masks)
    true_prob = np.take_along_axis(probs, test.masks[:, None], axis=1)[:, 0].mean(axis=(1, 2))
    return {"metrics": seg, "confusion": None, "true_class_prob": true_prob}


def metrics_rows(model_name: str, seed: int, result: dict) -> list[tuple]:
    m = result["metrics"]
    rows = []
    for key in sorted(m):
        value = m[key]
        if isinstance(value, dict):
            rows.extend((model_name, seed, metric, key, value[metric]) for metric in sorted(value))
        else:
            rows.append((model_name, seed, key, "all", value))
    return rows


def metrics_csv(rows) -> str:
    return METRICS_HEADER + "".join(f"{m},{s},{k},{c},{v!r}\n" for m, s, k, c, v in rows)


# ---------------------------------------------------------------- model checkpoints


def save_model(path, model: HybridModel, cfg: RunConfig, extra: Optional[dict] = None) -> Path:
    meta = {
        "kind": "model",
        "task": model.task,
        "model_spec": model.spec.to_dict(),
        "genotype": model.genotype.to_dict(),
        "aggregation": (model.plan.to_dict() if model.plan is not None else AggregationPlan().to_dict()),
        "seed": cfg.seed,
        "config_hash": cfg.fingerprint(),
    }
    meta.update(extra or {})
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    return io.save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[HybridModel, dict]:
    tensors, meta = io.load_checkpoint(path)
    if meta.get("kind") != "model":
        raise ConfigError(f"{path} is not a model checkpoint")
    spec = ModelSpec.from_dict(meta["model_spec"])
    genotype = Genotype.from_dict(meta["genotype"])
    params = {k[len("param."):]: v for k, v in tensors.items()}
    stem = {k[len("backbone."):]: v for k, v in params.items() if k.startswith("backbone.")}
    n_kept = 1 + max(int(k.split(".")[1]) for k in stem)
    backbone = build_backbone(spec.backbone, stem_state=stem, n_stages=n_kept)
    model = HybridModel(spec, backbone, genotype, seed=meta.get("seed", 0))
    plan = AggregationPlan.from_dict(meta["aggregation"])
    if plan.mode == "dense":
        model = reaggregate(model, "dense")
    elif plan.mode == "aspp":
        model = reaggregate(model, "aspp", rates=plan.aspp_rates)
    model.load_state_dict(params)
    return model, meta


def clone_model(model):
    return copy.deepcopy(model)
