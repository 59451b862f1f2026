"""Persisted, resumable orchestration over the experiment builders.

The in-memory experiment cache is replaced here by a manifest-backed mapping:
artifact keys load from the run directory when their stage signature matches
(after hash verification) and persist on first build. Stage signatures chain
config subsets with the artifact hashes of their inputs, so a change anywhere
upstream rebuilds exactly the affected stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import experiment as exp
from .config import RunConfig
from .data import DomainGeometry, MultiDomainDataset, SplitPlan, ingest_image_folder, \
    make_gaussian_domains, make_styled_shapes
from .diffusion import DiffusionModel
from .errors import ConfigError, FdsError, StageError
from .filtering import FilterVerdict
from .metrics import DiversityConfig, diversity_shift, features_for_metric, \
    project_embeddings
from .mixing import SamplePool
from .training import Classifier, RunReport, evaluate, swad_average
from .util import atomic_write_json, canonical_json, derive_seed, load_json

PERSISTED_KINDS = ("dataset", "split", "diffusion", "pool", "feedback",
                   "verdict", "augmented", "cellresult")


def build_dataset(spec) -> MultiDomainDataset:
    if spec.generator == "gaussian":
        geometry = DomainGeometry(**{**spec.geometry,
                                     "shift": tuple(spec.geometry.get("shift", (3.0, 0.0)))})
        return make_gaussian_domains(spec.n_domains, spec.n_classes,
                                     spec.per_cell_count, geometry, spec.seed)
    if spec.generator == "shapes":
        return make_styled_shapes(spec.n_classes, spec.styles,
                                  spec.per_cell_count, spec.image_size, spec.seed)
    if spec.generator == "ingest":
        return ingest_image_folder(spec.root, spec.image_size)
    raise ConfigError(f"unknown generator {spec.generator!r}")


class StageCache(dict):
    """Mapping used by the experiment builders, backed by the run directory."""

    def __init__(self, rundir, config: RunConfig, force=False):
        super().__init__()
        self.rundir = rundir
        self.config = config
        self.force = force
        self.executed = []
        self.resumed = []

    # -- key layout -----------------------------------------------------------

    @staticmethod
    def stage_key(key) -> str:
        return "/".join(str(part) for part in key)

    def _paths(self, key):
        root = self.rundir.path
        kind = key[0]
        tail = "_".join(str(p) for p in key[1:])
        if kind == "dataset":
            return [root / "dataset"]
        if kind == "split":
            return [root / "splits" / f"{tail}.json"]
        if kind == "diffusion":
            return [root / "diffusion" / f"model_{tail}.ckpt"]
        if kind == "pool":
            return [root / "pools" / tail]
        if kind == "feedback":
            return [root / "classifiers" / f"feedback_{tail}.ckpt"]
        if kind == "verdict":
            return [root / "verdicts" / f"{tail}.json"]
        if kind == "augmented":
            return [root / "augmented" / tail]
        if kind == "cellresult":
            return [root / "reports" / "cells" / f"{tail}.json",
                    root / "classifiers" / f"final_{tail}"]
        return None  # memory-only kinds: run, swad

    def _save(self, key, value, paths):
        kind = key[0]
        if kind in ("dataset", "augmented"):
            value.save(paths[0])
        elif kind == "split":
            value.save(paths[0])
        elif kind == "diffusion":
            value.save(paths[0])
        elif kind == "pool":
            value.save(paths[0])
        elif kind == "feedback":
            value.save(paths[0])
        elif kind == "verdict":
            value.save(paths[0])
        elif kind == "cellresult":
            rows, classifiers = value
            atomic_write_json(paths[0], rows)
            paths[1].mkdir(parents=True, exist_ok=True)
            for name, clf in classifiers.items():
                clf.save(paths[1] / f"{name}.ckpt")

    def _load(self, key, paths):
        kind = key[0]
        if kind in ("dataset", "augmented"):
            return MultiDomainDataset.load(paths[0])
        if kind == "split":
            return SplitPlan.load(paths[0])
        if kind == "diffusion":
            return DiffusionModel.load(paths[0])
        if kind == "pool":
            return SamplePool.load(paths[0])
        if kind == "feedback":
            clf = Classifier.load(paths[0])
            clf.freeze()
            return clf
        if kind == "verdict":
            return FilterVerdict.load(paths[0])
        if kind == "cellresult":
            classifiers = {p.stem: Classifier.load(p)
                           for p in sorted(paths[1].glob("*.ckpt"))}
            return (load_json(paths[0]), classifiers)
        raise FdsError(f"cannot load kind {kind!r}")

    def _signature(self, key) -> str:
        """Config subset + input-stage artifact hashes for this stage."""
        cfg = self.config
        kind = key[0]
        inputs = {}

        def dep(*dep_key):
            inputs[self.stage_key(dep_key)] = \
                self.rundir.stage_artifact_hashes(self.stage_key(dep_key))

        if kind == "dataset":
            part = cfg.signature_part("dataset")
        elif kind == "split":
            part = cfg.signature_part("val_fraction", "oracle", "seed")
            dep("dataset")
        elif kind == "diffusion":
            part = cfg.signature_part("diffusion", "seed", "val_fraction")
            dep("dataset")
        elif kind == "pool":
            _, pool_kind, target = key
            part = canonical_json({
                "mix": cfg.signature_part("mix"),
                "per_cell": self._resolved_per_cell(int(target), pool_kind),
                "seed": cfg.seed})
            dep("diffusion", target)
        elif kind == "feedback":
            part = cfg.signature_part("trainer", "seed", "val_fraction")
            dep("dataset")
        elif kind == "verdict":
            _, split_kind, target, tier, n_l = key
            part = canonical_json({"filter_mode": cfg.filter.mode, "n_l": n_l,
                                   "tier": tier, "seed": cfg.seed})
            dep("pool", "pure" if tier == "basic" else "mixed", target)
            dep("feedback", split_kind, target)
        elif kind == "augmented":
            _, split_kind, target, tier, n_l, subset = key
            part = canonical_json({"subset": list(subset)})
            dep("verdict", split_kind, target, tier, n_l)
            dep("pool", "pure" if tier == "basic" else "mixed", target)
            dep("dataset")
        elif kind == "cellresult":
            _, split_kind, trial_seed, target, tier, n_l, subset = key
            part = canonical_json({
                "trainer": cfg.signature_part("trainer", "swad"),
                "methods": sorted(self._tier_methods(tier)),
                "track_test": cfg.output.track_test})
            if tier != "None":
                dep("augmented", split_kind, target, tier, n_l, subset)
            dep("split", self._split_mode(split_kind), target, trial_seed)
            dep("dataset")
        else:
            raise FdsError(f"no signature rule for kind {kind!r}")
        return canonical_json({"part": part, "inputs": inputs})

    def _split_mode(self, split_kind):
        return "oracle" if (self.config.oracle and split_kind == "standard") \
            else split_kind

    def _resolved_per_cell(self, target, kind="mixed"):
        ds = self[("dataset",)]  # dataset stage always resolves first
        return self.config.method_config("erm").resolve_pool_per_cell(ds, target, kind)

    def _tier_methods(self, tier):
        tier_val = None if tier in (None, "None") else tier
        return [m for m in self.config.methods
                if exp.parse_method(m)[1] == tier_val]

    # -- mapping protocol ------------------------------------------------------

    def __contains__(self, key):
        if super().__contains__(key):
            return True
        paths = self._paths(key)
        if paths is None or self.force:
            return False
        stage_key = self.stage_key(key)
        if not self.rundir.stage_is_done(stage_key, self._signature(key)):
            return False
        self.rundir.verify_stage(stage_key)  # corruption surfaces here
        return True

    def __getitem__(self, key):
        if not super().__contains__(key):
            value = self._load(key, self._paths(key))
            super().__setitem__(key, value)
            self.resumed.append(self.stage_key(key))
        return super().__getitem__(key)

    def __setitem__(self, key, value):
        super().__setitem__(key, value)
        paths = self._paths(key)
        if paths is not None:
            self._save(key, value, paths)
            self.rundir.record_stage(self.stage_key(key), self._signature(key),
                                     paths)
            self.executed.append(self.stage_key(key))


@dataclass
class RunResult:
    run_dir: Path
    report: RunReport
    executed: list = field(default_factory=list)
    resumed: list = field(default_factory=list)


def _resolve_targets(config: RunConfig, dataset) -> list:
    if config.output.targets is None:
        return list(range(dataset.n_domains))
    out = []
    for t in config.output.targets:
        out.append(dataset.domain_index(t) if isinstance(t, str) else int(t))
    return out


def _cell_result(cache: StageCache, dataset, target, trial_seed, tier,
                 methods, cfg, split_kind="standard"):
    """Train one base run; evaluate every requested method variant of it."""
    n_l = cfg.resolve_n_l(dataset, target) if tier else 0
    subset = tuple(cfg.pseudo_domain_subset or ())
    key = ("cellresult", split_kind, trial_seed, target, str(tier), n_l, subset)
    if key in cache:
        return cache[key][0]

    split = exp.get_split(dataset, target, trial_seed, cfg, cache, split_kind)
    split_mode = "oracle" if cfg.oracle and split_kind == "standard" else split_kind
    clf, run = exp.get_train_run(dataset, target, trial_seed, tier, cfg, cache,
                                 split_kind)
    rows = []
    classifiers = {}
    for method in methods:
        base, _ = exp.parse_method(method)
        m_clf = clf
        if base == "swad":
            m_clf = swad_average(run, cfg.swad)
        acc = evaluate(m_clf, dataset, split.test_ids)
        rows.append({"method": method, "target_domain": dataset.domain_names[target],
                     "seed": trial_seed, "split_mode": split_mode,
                     "accuracy": acc})
        classifiers[base] = m_clf
    if cfg.track_test:
        trace = run.test_trace()
        for row in rows:
            row["test_trace"] = trace
    cache[key] = (rows, classifiers)
    return rows


def run_pipeline(config: RunConfig, run_dir, force=False,
                 split_kind="standard") -> RunResult:
    """dataset -> feedback -> diffusion -> pools -> filter -> training -> report."""
    from .rundir import RunDirectory
    rd = RunDirectory(run_dir)
    if not force:
        rd.verify_all()  # resume refuses to trust corrupted artifacts
    atomic_write_json(rd.path / "config.json",
                      config.raw if config.raw is not None else config.resolved())
    cache = StageCache(rd, config, force=force)

    try:
        dataset = exp._cached(cache, ("dataset",), lambda: build_dataset(config.dataset))
    except Exception as exc:
        rd.record_failure("dataset", str(exc))
        raise StageError(f"dataset stage failed: {exc}") from exc

    targets = _resolve_targets(config, dataset)
    tiers = sorted({exp.parse_method(m)[1] for m in config.methods},
                   key=lambda t: (t is not None, str(t)))
    report = RunReport()
    report.context["methods"] = config.methods
    report.context["seeds"] = config.seeds

    for target in targets:
        cfg = config.method_config("erm")
        name = dataset.domain_names[target]
        for tier in tiers:
            methods = [m for m in config.methods if exp.parse_method(m)[1] == tier]
            if not methods:
                continue
            # warm shared artifacts in dependency order so signatures chain
            try:
                if tier is not None:
                    exp.get_diffusion(dataset, target, cfg, cache)
                    pool_kind = "pure" if tier == "basic" else "mixed"
                    exp.get_pool(dataset, target, pool_kind, cfg, cache)
                    exp.get_feedback(dataset, target, cfg, cache, split_kind)
                    exp.get_verdict(dataset, target, tier, cfg, cache, split_kind)
                    exp.get_augmented(dataset, target, tier, cfg, cache, split_kind)
            except Exception as exc:
                rd.record_failure(f"artifacts/t{target}/{tier}", str(exc))
                for m in methods:
                    for s in config.seeds:
                        report.add_failure(m, name, s, split_kind, exc)
                continue
            for seed in config.seeds:
                try:
                    rows = _cell_result(cache, dataset, target, seed, tier,
                                        methods, cfg, split_kind)
                    for r in rows:
                        report.add_row(r["method"], r["target_domain"], r["seed"],
                                       r["split_mode"], r["accuracy"])
                except Exception as exc:
                    key = f"cell/t{target}/s{seed}/{tier}"
                    rd.record_failure(key, str(exc))
                    for m in methods:
                        report.add_failure(m, name, seed, split_kind, exc)

    if config.output.diversity:
        _diversity_stage(cache, dataset, targets, config, report)
    if config.output.tsne:
        _tsne_stage(cache, dataset, targets, config, rd)

    report.context["dataset_hash"] = rd.stage_artifact_hashes("dataset")
    report.save(rd.path / "reports")
    return RunResult(rd.path, report, cache.executed, cache.resumed)


def _diversity_stage(cache, dataset, targets, config, report):
    """Discriminator distance between (original | augmented) sources and target."""
    cfg = config.method_config("erm")
    scores = {}
    for target in targets:
        try:
            h = exp.get_feedback(dataset, target, cfg, cache)
            src_ids = np.concatenate([dataset.ids_of_domain(d)
                                      for d in exp._source_domains(dataset, target)])
            tgt_ids = dataset.ids_of_domain(target)
            f_src = features_for_metric(h, dataset.payload_batch(src_ids))
            f_tgt = features_for_metric(h, dataset.payload_batch(tgt_ids))
            dcfg = DiversityConfig(seed=config.seed)
            ext = h.weights_hash()
            entry = {"original": diversity_shift(f_src, f_tgt, dcfg, ext).value}
            for tier in ("basic", "fds"):
                if any(exp.parse_method(m)[1] == tier for m in config.methods):
                    aug = exp.get_augmented(dataset, target, tier, cfg, cache)
                    f_aug = features_for_metric(h, aug.payloads)
                    entry[tier] = diversity_shift(f_aug, f_tgt, dcfg, ext).value
            entry["estimator"] = "crossfit-logreg-approximation"
            scores[dataset.domain_names[target]] = entry
        except Exception as exc:
            scores[dataset.domain_names[target]] = {"error": str(exc)}
    report.context["diversity"] = scores


def _tsne_stage(cache, dataset, targets, config, rd):
    cfg = config.method_config("erm")
    for target in targets:
        h = exp.get_feedback(dataset, target, cfg, cache)
        parts = [dataset.payloads]
        labels = [dataset.domain_ids.copy()]
        names = list(dataset.domain_names)
        fds_methods = [m for m in config.methods if exp.parse_method(m)[1] == "fds"]
        if fds_methods:
            aug = exp.get_augmented(dataset, target, "fds", cfg, cache)
            synth = aug.domain_ids >= dataset.n_domains
            parts.append(aug.payloads[synth])
            labels.append(aug.domain_ids[synth])
            names = list(aug.domain_names)
        feats = features_for_metric(h, np.concatenate(parts))
        labs = np.concatenate(labels)
        stem = rd.path / "plots" / f"tsne_t{target}"
        project_embeddings(feats, labs, out_png=f"{stem}.png",
                           out_csv=f"{stem}.csv",
                           seed=derive_seed(config.seed, "tsne", target),
                           label_names=names)


def ablation_suite(config: RunConfig, run_dir, force=False) -> RunResult:
    """Tier grid per base method, sharing cached artifacts."""
    bases = sorted({exp.parse_method(m)[0] for m in config.methods})
    grid = []
    for base in bases:
        grid += [base, f"{base}+basic", f"{base}+interpolation", f"{base}+fds"]
    expanded = replace(config, methods=grid)
    expanded.raw = None
    return run_pipeline(expanded, run_dir, force=force)


def sweep_nl(config: RunConfig, scales, run_dir, force=False) -> RunResult:
    """Re-run only filtering + final training per N_L scale, over one pool."""
    from .rundir import RunDirectory
    rd = RunDirectory(run_dir)
    cache = StageCache(rd, config, force=False)
    if ("dataset",) not in cache:
        raise StageError("missing dataset cache; run the pipeline first")
    dataset = cache[("dataset",)]
    targets = _resolve_targets(config, dataset)
    for target in targets:
        if ("pool", "mixed", target) not in cache:
            raise StageError(f"missing pool cache for target {target}; "
                             "run the pipeline first")

    fds_methods = [m for m in config.methods if exp.parse_method(m)[1] == "fds"]
    if not fds_methods:
        raise ConfigError("sweep needs at least one '+fds' method")

    # pin the pool size so every scale reuses the same cached pool
    base_cfg = config.method_config("erm")
    pinned = max(base_cfg.resolve_pool_per_cell(dataset, t) for t in targets)

    report = RunReport()
    curves = {}
    for scale in scales:
        if scale <= 0:
            raise ConfigError("scales must be positive")
        scaled = replace(config,
                         filter=replace(config.filter,
                                        n_l_scale=config.filter.n_l_scale * scale,
                                        n_l_absolute=None),
                         pool_per_cell=pinned, methods=fds_methods)
        scaled.raw = None
        sub_cache = StageCache(rd, scaled, force=False)
        sub_cache.update({("dataset",): dataset})
        cfg = scaled.method_config("erm")
        for target in targets:
            for seed in config.seeds:
                rows = _cell_result(sub_cache, dataset, target, seed, "fds",
                                    fds_methods, cfg)
                for r in rows:
                    method = f"{r['method']}@x{scale:g}"
                    report.add_row(method, r["target_domain"], r["seed"],
                                   r["split_mode"], r["accuracy"])
                    curves.setdefault(r["method"], {}).setdefault(scale, []).append(
                        r["accuracy"])

    avg_per_class = _n_source_avg_per_class(dataset, targets)
    report.context["nl_sweep"] = {
        "scales": list(scales),
        "avg_per_class_source_count": avg_per_class,
        "curve": {m: {str(s): float(np.mean(v)) for s, v in sorted(pts.items())}
                  for m, pts in curves.items()},
    }
    report.save(rd.path / "reports" / "sweep_nl")
    if config.output.plots:
        _plot_sweep(curves, rd.path / "plots" / "sweep_nl.png")
    return RunResult(rd.path, report, cache.executed, cache.resumed)


def _n_source_avg_per_class(dataset, targets):
    vals = [exp._n_source_samples(dataset, t) / dataset.n_classes for t in targets]
    return float(np.mean(vals))


def _plot_sweep(curves, out_png):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 4))
    for method, pts in sorted(curves.items()):
        xs = sorted(pts)
        ys = [float(np.mean(pts[x])) for x in xs]
        ax.plot(xs, ys, marker="o", label=method)
    ax.set_xlabel("N_L scale (x average per-class source count)")
    ax.set_ylabel("mean target accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
