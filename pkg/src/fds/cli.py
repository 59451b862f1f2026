"""Command-line entry points.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 integrity failure.
The run directory defaults to $FDS_RUN_DIR.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config, parse_config
from .errors import ConfigError, FdsError, IntegrityError, StageError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_INTEGRITY = 4


def _env_run_dir():
    return os.environ.get("FDS_RUN_DIR") or None


def _add_common(p, config_required=True):
    p.add_argument("--config", type=Path, required=config_required,
                   help="path to the run configuration JSON")
    p.add_argument("--run-dir", type=Path, default=_env_run_dir(),
                   help="run directory (default: $FDS_RUN_DIR)")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--force", action="store_true",
                   help="rebuild stages even when the manifest says done")
    p.add_argument("--oracle", action="store_true",
                   help="use target-domain validation splits (oracle mode)")


def _load(args, need_run_dir=True) -> RunConfig:
    if need_run_dir and args.run_dir is None:
        raise ConfigError("no run directory: pass --run-dir or set FDS_RUN_DIR")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, raw=None)
    if getattr(args, "oracle", False):
        cfg = replace(cfg, oracle=True, raw=None)
    return cfg


def _warm_targets(cfg, args, stages):
    """Run a subset of artifact stages for every (requested) target."""
    from . import experiment as exp
    from .pipeline import StageCache, build_dataset, _resolve_targets
    from .rundir import RunDirectory

    rd = RunDirectory(args.run_dir)
    cache = StageCache(rd, cfg, force=args.force)
    dataset = exp._cached(cache, ("dataset",), lambda: build_dataset(cfg.dataset))
    if stages == ("dataset",):
        return cache, dataset
    targets = _resolve_targets(cfg, dataset)
    if getattr(args, "target", None):
        targets = [dataset.domain_index(args.target)]
    mcfg = cfg.method_config("erm")
    tiers = {exp.parse_method(m)[1] for m in cfg.methods}
    for t in targets:
        if "diffusion" in stages:
            exp.get_diffusion(dataset, t, mcfg, cache)
        if "pool" in stages:
            if tiers & {"fds", "interpolation", None}:
                exp.get_pool(dataset, t, "mixed", mcfg, cache)
            if "basic" in tiers:
                exp.get_pool(dataset, t, "pure", mcfg, cache)
        if "filter" in stages:
            exp.get_feedback(dataset, t, mcfg, cache)
            for tier in sorted(tiers - {None}, key=str):
                exp.get_verdict(dataset, t, tier, mcfg, cache)
                exp.get_augmented(dataset, t, tier, mcfg, cache)
    return cache, dataset


def cmd_gen_data(args):
    _warm_targets(_load(args), args, ("dataset",))
    print(f"dataset ready under {args.run_dir}/dataset")


def cmd_ingest(args):
    from .data import ingest_image_folder
    ds = ingest_image_folder(args.root, args.image_size)
    out = args.run_dir / "dataset"
    ds.save(out)
    print(f"ingested {len(ds)} samples ({ds.n_domains} domains x "
          f"{ds.n_classes} classes) into {out}")


def cmd_train_diffusion(args):
    cfg = _load(args)
    _warm_targets(cfg, args, ("dataset", "diffusion"))
    print("diffusion models ready")


def cmd_generate_pool(args):
    cfg = _load(args)
    _warm_targets(cfg, args, ("dataset", "diffusion", "pool"))
    print("sample pools ready")


def cmd_filter(args):
    cfg = _load(args)
    _warm_targets(cfg, args, ("dataset", "diffusion", "pool", "filter"))
    print("verdicts and augmented sets ready")


def cmd_train_classifier(args):
    cfg = _load(args)
    result = _run_pipeline(cfg, args)
    print(f"trained classifiers; {len(result.report.rows)} report rows")


def cmd_evaluate(args):
    from .data import MultiDomainDataset, SplitPlan
    from .training import Classifier, evaluate
    clf = Classifier.load(args.checkpoint)
    dataset = MultiDomainDataset.load(args.run_dir / "dataset")
    split = SplitPlan.load(args.split)
    ids = {"train": split.train_ids, "val": split.val_ids,
           "test": split.test_ids}[args.on]
    acc = evaluate(clf, dataset, ids)
    print(f"accuracy[{args.on}] = {acc:.6f}")


def _run_pipeline(cfg, args):
    from .pipeline import run_pipeline
    return run_pipeline(cfg, args.run_dir, force=args.force)


def cmd_run(args):
    cfg = _load(args)
    result = _run_pipeline(cfg, args)
    _finish(result)


def cmd_ablate(args):
    from .pipeline import ablation_suite
    cfg = _load(args)
    result = ablation_suite(cfg, args.run_dir, force=args.force)
    _finish(result)


def cmd_sweep_nl(args):
    from .pipeline import sweep_nl
    cfg = _load(args)
    scales = [float(s) for s in args.scales.split(",")]
    result = sweep_nl(cfg, scales, args.run_dir, force=args.force)
    _finish(result)


def cmd_report(args):
    from .rundir import RunDirectory
    from .util import load_json
    rd = RunDirectory(args.run_dir, create=False)
    rd.verify_all()
    cells_dir = rd.path / "reports" / "cells"
    from .training import RunReport
    report = RunReport()
    for f in sorted(cells_dir.glob("*.json")) if cells_dir.exists() else []:
        for r in load_json(f):
            report.add_row(r["method"], r["target_domain"], r["seed"],
                           r["split_mode"], r["accuracy"])
    report.save(rd.path / "reports")
    print(report.csv_text(), end="")


def cmd_plot(args):
    cfg = _load(args)
    cfg = replace(cfg, output=replace(cfg.output, tsne=True), raw=None)
    from . import experiment as exp
    from .pipeline import StageCache, _resolve_targets, _tsne_stage, build_dataset
    from .rundir import RunDirectory
    rd = RunDirectory(args.run_dir)
    cache = StageCache(rd, cfg, force=False)
    dataset = exp._cached(cache, ("dataset",), lambda: build_dataset(cfg.dataset))
    _tsne_stage(cache, dataset, _resolve_targets(cfg, dataset), cfg, rd)
    print(f"plots written under {rd.path / 'plots'}")


def _finish(result):
    print(f"executed {len(result.executed)} stages, resumed {len(result.resumed)}")
    print(f"report: {result.run_dir / 'reports' / 'report.csv'}")
    if result.report.failures:
        for f in result.report.failures:
            print(f"FAILED cell {f['method']}/{f['target_domain']}/s{f['seed']}: "
                  f"{f['error']}", file=sys.stderr)
        raise StageError(f"{len(result.report.failures)} cells failed")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fds",
        description="pseudo-domain synthesis and leave-one-out evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    specs = [
        ("gen-data", cmd_gen_data, "build the configured benchmark dataset"),
        ("train-diffusion", cmd_train_diffusion, "train diffusion models per target"),
        ("generate-pool", cmd_generate_pool, "generate synthetic sample pools"),
        ("filter", cmd_filter, "score pools and assemble augmented sets"),
        ("train-classifier", cmd_train_classifier, "train and evaluate classifiers"),
        ("run", cmd_run, "run the full pipeline"),
        ("ablate", cmd_ablate, "run the component-tier ablation grid"),
        ("report", None, "re-emit report tables from persisted artifacts"),
        ("plot", cmd_plot, "emit feature-projection plots"),
    ]
    for name, fn, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        if name == "report":
            p.add_argument("--run-dir", type=Path,
                           default=_env_run_dir())
            p.set_defaults(fn=cmd_report)
            continue
        _add_common(p)
        if name in ("train-diffusion", "generate-pool", "filter"):
            p.add_argument("--target", type=str, default=None,
                           help="restrict to one target domain (by name)")
        p.set_defaults(fn=fn)

    p = sub.add_parser("ingest", help="ingest a root/domain/class image tree")
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--image-size", type=int, default=24)
    p.add_argument("--run-dir", type=Path, default=_env_run_dir())
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("sweep-nl", help="accuracy vs N_L scale over a cached pool")
    _add_common(p)
    p.add_argument("--scales", type=str, default="0.5,1,2",
                   help="comma-separated positive scales")
    p.set_defaults(fn=cmd_sweep_nl)

    p = sub.add_parser("evaluate", help="evaluate a classifier checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True,
                   help="path to a persisted split plan JSON")
    p.add_argument("--on", choices=("train", "val", "test"), default="test")
    p.add_argument("--run-dir", type=Path, default=_env_run_dir())
    p.set_defaults(fn=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.run_dir is None and args.command != "report":
            raise ConfigError("no run directory: pass --run-dir or set FDS_RUN_DIR")
        args.fn(args)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (StageError, FdsError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
