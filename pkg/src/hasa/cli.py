"""Command-line driver.

Exit codes: 0 ok, 2 configuration error (or any other invalid request), 3 numerical
failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import io, pipeline
from .config import RunConfig, load_config
from .data import load_dataset, save_dataset
from .errors import ArtifactError, ConfigError, HasaError, NumericalError
from .metrics import paired_t_test
from .model import profile_stages
from .ops import OpKind

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


def _datasets(cfg: RunConfig):
    """Materialised datasets under the output dir if present, otherwise generated in memory."""
    d = _out(cfg) / "data"
    if (d / "train.json").exists() and (d / "test.json").exists():
        return load_dataset(d / "train.json"), load_dataset(d / "test.json")
    return pipeline.make_datasets(cfg)


def _write_json(path: Path, obj) -> None:
    io.atomic_write(path, io.canonical_json(obj).encode())


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    train, test = pipeline.make_datasets(cfg)
    d = _out(cfg) / "data"
    save_dataset(train, d, "train")
    save_dataset(test, d, "test")
    print(d)
    return EXIT_OK


def cmd_search(cfg: RunConfig, args) -> int:
    train, _ = _datasets(cfg)
    out = _out(cfg) / "search"
    genotype, report = pipeline.search(cfg, train, checkpoint_dir=out, resume=args.resume,
                                       stop_after_stage=args.stop_after_stage, log=_log)
    _write_json(out / "search_report.json", report.to_dict())
    if report.interrupted:
        _log(f"search stopped after stage {args.stop_after_stage}; resume with --resume")
        return EXIT_OK
    active = [OpKind.parse(k) for k in report.stages[-1]["active_ops"]]
    path = io.save_genotype(_out(cfg) / "genotype.json", genotype, cfg.task, active,
                            pipeline.genotype_provenance(cfg, report))
    print(path)
    return EXIT_OK


def cmd_derive(cfg: RunConfig, args) -> int:
    """Re-derive the genotype from the latest search-stage checkpoint."""
    from .search import _restore, derivable_checkpoint
    from dataclasses import replace

    ckdir = Path(args.checkpoint) if args.checkpoint else _out(cfg) / "search"
    ckpt = derivable_checkpoint(ckdir) if ckdir.is_dir() else ckdir
    if ckpt is None or not Path(ckpt).exists():
        raise ArtifactError(f"no search checkpoint under {ckdir}")
    scfg = replace(cfg.search, backbone=pipeline.backbone_spec(cfg))
    state, report = _restore(scfg, ckpt, None)
    genotype = state.supernet.derive()
    path = io.save_genotype(_out(cfg) / "genotype.json", genotype, cfg.task, state.active_ops,
                            pipeline.genotype_provenance(cfg, report))
    print(path)
    return EXIT_OK


def _genotype(cfg: RunConfig, args):
    path = Path(args.genotype) if args.genotype else _out(cfg) / "genotype.json"
    genotype, doc = io.load_genotype(path)
    if doc["task"] != cfg.task:
        raise ConfigError(f"genotype task {doc['task']!r} != config task {cfg.task!r}")
    return genotype


def cmd_train(cfg: RunConfig, args) -> int:
    from dataclasses import replace

    if args.cells is not None:
        cfg = replace(cfg, train=replace(cfg.train, cells=args.cells))
    if args.mode is not None:
        cfg = replace(cfg, aggregation=replace(cfg.aggregation, mode=args.mode))
    cfg = cfg.validate()
    genotype = _genotype(cfg, args)
    train, _ = _datasets(cfg)
    model, curves = pipeline.train_pipeline(cfg, genotype, train)
    name = args.name or f"model_{cfg.aggregation.mode}"
    path = pipeline.save_model(_out(cfg) / f"{name}.ckpt", model, cfg, {"name": name})
    _write_json(_out(cfg) / f"{name}_curves.json", curves)
    print(path)
    return EXIT_OK


def cmd_reaggregate(cfg: RunConfig, args) -> int:
    from .reaggregate import reaggregate, verify_rewrite

    model, meta = pipeline.load_model(args.checkpoint)
    mode = args.mode or cfg.aggregation.mode
    kwargs = {"rates": cfg.aggregation.aspp_rates} if mode == "aspp" else {}
    new = reaggregate(model, mode, seed=cfg.seed, **kwargs)
    report = verify_rewrite(model, new) if mode != "sequential" else None
    name = f"{meta.get('name', 'model')}_{mode}"
    path = pipeline.save_model(_out(cfg) / f"{name}.ckpt", new, cfg, {"name": name})
    if report is not None:
        _write_json(_out(cfg) / f"{name}_rewrite.json", report.to_dict())
    print(path)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    _, test = _datasets(cfg)
    model, meta = pipeline.load_model(args.checkpoint)
    name = meta.get("name", Path(args.checkpoint).stem)
    result = pipeline.evaluate(cfg, model, test)
    out = _out(cfg)
    rows = pipeline.metrics_rows(name, cfg.seed, result)
    io.atomic_write(out / f"metrics_{name}.csv", pipeline.metrics_csv(rows).encode())
    doc = {"model": name, "seed": cfg.seed, "metrics": result["metrics"],
           "config_hash": cfg.fingerprint()}
    if result["confusion"] is not None:
        io.atomic_write(out / f"confusion_{name}.csv", result["confusion"].to_csv().encode())
    if args.compare:
        other, other_meta = pipeline.load_model(args.compare)
        other_result = pipeline.evaluate(cfg, other, test)
        doc["paired_t_test"] = {"against": other_meta.get("name", Path(args.compare).stem),
                                **paired_t_test(result["true_class_prob"], other_result["true_class_prob"]).to_dict()}
    _write_json(out / f"metrics_{name}.json", doc)
    if model.task == "classification":
        from .experiment import parameter_economy

        prof = profile_stages(model, test.images[:1])
        _write_json(out / f"profile_{name}.json", {**prof.to_dict(), "economy": parameter_economy(cfg, model)})
    print(out / f"metrics_{name}.csv")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    """Concatenate every metrics CSV under the output dir into one table."""
    out = _out(cfg)
    files = sorted(out.glob("metrics_*.csv"))
    if not files:
        raise ArtifactError(f"no metrics files under {out}")
    lines = [pipeline.METRICS_HEADER.strip()]
    for f in files:
        lines.extend(f.read_text().splitlines()[1:])
    io.atomic_write(out / "report.csv", ("\n".join(lines) + "\n").encode())
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "search": cmd_search,
    "derive": cmd_derive,
    "reaggregate": cmd_reaggregate,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _global_flags(parser, default) -> None:
    parser.add_argument("--config", default=default, help="YAML or JSON run configuration")
    parser.add_argument("--seed", type=int, default=default, help="override the configured seed")
    parser.add_argument("--out", default=default,
                        help="output directory (else $HASA_OUT, else the config's output_dir)")


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="hasa", description="Hybrid architecture search on synthetic ultrasound tasks.")
    _global_flags(p, None)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="materialise train/test datasets")
    s = sub.add_parser("search", parents=[common], help="progressive growing search")
    s.add_argument("--resume", action="store_true", help="continue from the latest stage checkpoint")
    s.add_argument("--stop-after-stage", type=int, help="stop once the next stage's checkpoint is written")
    d = sub.add_parser("derive", parents=[common], help="genotype from a search checkpoint")
    d.add_argument("--checkpoint", help="checkpoint file or directory (default: <out>/search)")
    t = sub.add_parser("train", parents=[common], help="train the evaluation model")
    t.add_argument("--genotype", help="genotype file (default: <out>/genotype.json)")
    t.add_argument("--cells", type=int, help="evaluation-stage cell count override")
    t.add_argument("--name", help="model name used in artifact file names")
    t.add_argument("--mode", choices=["sequential", "dense", "aspp"], help="override the aggregation mode")
    r = sub.add_parser("reaggregate", parents=[common], help="rewrite a trained model")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--mode", choices=["sequential", "dense", "aspp"])
    e = sub.add_parser("eval", parents=[common], help="metrics on the test set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--compare", help="second checkpoint for a paired t-test")
    sub.add_parser("report", parents=[common], help="collect metrics CSVs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        _log(f"configuration error: {exc}")
        return EXIT_CONFIG
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    except (ArtifactError, OSError) as exc:
        _log(f"I/O error: {exc}")
        return EXIT_IO
    except HasaError as exc:
        # structural / rewrite / usage problems all stem from the request itself
        _log(f"invalid request: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
