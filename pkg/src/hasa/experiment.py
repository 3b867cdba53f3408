"""Relative-ordering experiments: a searched architecture against random ones
trained and evaluated by the same pipeline."""
from __future__ import annotations

import time
from dataclasses import replace
from typing import Callable, Optional

import numpy as np

from . import pipeline
from .config import RunConfig, default_config
from .model import BackboneClassifier, build_backbone, profile_stages
from .ops import SEGMENTATION_CATALOG

Log = Optional[Callable[[str], None]]


def parameter_economy(cfg: RunConfig, model) -> dict:
    """Parameters of ``model`` against the same backbone with its deep stages kept."""
    spec = pipeline.backbone_spec(cfg)
    full = BackboneClassifier(build_backbone(replace(spec, frozen_through=len(spec.stages))), cfg.search.n_classes)
    x = np.zeros((1, spec.in_channels, spec.image_size, spec.image_size), dtype=np.float32)
    hybrid, reference = profile_stages(model, x).total_params, profile_stages(full, x).total_params
    return {"hybrid_params": hybrid, "reference_params": reference, "saving": 1.0 - hybrid / reference}


def classification_ordering(seed: int, n_random: int = 5, cfg: Optional[RunConfig] = None, log: Log = None) -> dict:
    """Search + dense re-aggregation against ``n_random`` random genotypes, all trained alike."""
    cfg = cfg or default_config("classification", seed=seed)
    cfg = replace(cfg, seed=seed, search=replace(cfg.search, seed=seed))
    t0 = time.perf_counter()
    train, test = pipeline.make_datasets(cfg)
    backbone = build_backbone(pipeline.backbone_spec(cfg))
    genotype, report = pipeline.search(cfg, train, backbone=backbone)
    model, _ = pipeline.train_pipeline(cfg, genotype, train, backbone=backbone)
    searched = pipeline.evaluate(cfg, model, test)["metrics"]["accuracy"]
    if log:
        log(f"seed {seed}: searched {searched:.4f} ({time.perf_counter() - t0:.0f}s)")
    rng = np.random.default_rng([seed, 404])
    randoms = []
    for i in range(n_random):
        g = pipeline.random_genotype(rng)
        m, _ = pipeline.train_pipeline(cfg, g, train, backbone=backbone)
        randoms.append(pipeline.evaluate(cfg, m, test)["metrics"]["accuracy"])
        if log:
            log(f"seed {seed}: random {i} {randoms[-1]:.4f}")
    return {
        "seed": seed,
        "genotype": genotype.to_dict(),
        "dropped_ops": report.dropped_ops,
        "searched_accuracy": searched,
        "random_accuracies": randoms,
        "margin": searched - float(np.mean(randoms)),
        "economy": parameter_economy(cfg, model),
        "seconds": time.perf_counter() - t0,
    }


def segmentation_ordering(seed: int, cfg: Optional[RunConfig] = None, log: Log = None) -> dict:
    """Searched cells with the ASPP cell against the same cells aggregated sequentially."""
    cfg = cfg or default_config("segmentation", seed=seed)
    cfg = replace(cfg, seed=seed, search=replace(cfg.search, seed=seed))
    t0 = time.perf_counter()
    train, test = pipeline.make_datasets(cfg)
    backbone = build_backbone(pipeline.backbone_spec(cfg))
    genotype, report = pipeline.search(cfg, train, backbone=backbone)
    out = {"seed": seed, "genotype": genotype.to_dict(), "dropped_ops": report.dropped_ops}
    for mode in ("aspp", "sequential"):
        model, _ = pipeline.train_pipeline(cfg, genotype, train, backbone=backbone, mode=mode)
        out[mode] = pipeline.evaluate(cfg, model, test)["metrics"]
        if log:
            log(f"seed {seed}: {mode} follicle DSC {out[mode]['follicle']['dsc']:.4f}")
    rng = np.random.default_rng([seed, 405])
    g = pipeline.random_genotype(rng, SEGMENTATION_CATALOG, with_reduction=False)
    model, _ = pipeline.train_pipeline(cfg, g, train, backbone=backbone, mode="aspp")
    out["random_aspp"] = pipeline.evaluate(cfg, model, test)["metrics"]
    out["seconds"] = time.perf_counter() - t0
    return out
