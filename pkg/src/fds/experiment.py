"""Leave-one-out and in-domain experiment loops.

Expensive artifacts (diffusion model, pools, feedback classifier, verdicts,
augmented sets) depend only on the target domain and the artifact seed, so
they are shared across trial seeds and methods through a cache dict. The
persisted pipeline wraps the same builders with an on-disk manifest.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import MultiDomainDataset, in_domain_split, leave_one_out_split, oracle_split
from .diffusion import DiffusionConfig, train_diffusion
from .errors import ConfigError
from .filtering import (assemble_augmented, augmented_split, filter_ablation_mode,
                        score_pool, select, train_feedback_classifier)
from .mixing import MixPolicy, generate_pool, generate_pure_pool
from .training import (RunReport, SwadPolicy, TrainerConfig, evaluate,
                       swad_average, train_erm)
from .util import derive_seed

BASE_METHODS = ("erm", "swad")
TIERS = (None, "basic", "interpolation", "fds")


def parse_method(method: str):
    """'erm' | 'swad' optionally suffixed with '+basic' | '+interpolation' | '+fds'."""
    base, _, tier = method.partition("+")
    if base not in BASE_METHODS:
        raise ConfigError(f"unknown base method {base!r}")
    if tier == "":
        return base, None
    if tier not in ("basic", "interpolation", "fds"):
        raise ConfigError(f"unknown augmentation tier {tier!r} in {method!r}")
    return base, tier


@dataclass
class FilterSettings:
    n_l_scale: float = 1.0      # relative to the average per-class source count
    n_l_absolute: int = None    # overrides the scale when set
    mode: str = "entropy_plus_reject"
    pool_per_cell_factor: float = 3.0  # pool size as a multiple of N_L

    def resolve_n_l(self, n_source_samples: int, n_classes: int) -> int:
        if self.n_l_absolute is not None:
            return max(1, int(self.n_l_absolute))
        avg_per_class = n_source_samples / n_classes
        return max(1, int(round(self.n_l_scale * avg_per_class)))


@dataclass
class MethodConfig:
    method: str = "erm"
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    mix: MixPolicy = field(default_factory=MixPolicy)
    filter: FilterSettings = field(default_factory=FilterSettings)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    feedback_trainer: TrainerConfig = None   # defaults to `trainer`
    swad: SwadPolicy = field(default_factory=SwadPolicy)
    val_fraction: float = 0.2
    in_domain_test_fraction: float = 0.2
    artifact_seed: int = 0      # governs diffusion/pool/feedback artifacts
    pool_per_cell: int = None   # fixed pool size; None = derived from N_L once
    pseudo_domain_subset: list = None  # indexes into the sorted pair list
    track_test: bool = False
    oracle: bool = False

    def feedback_config(self):
        return self.feedback_trainer or self.trainer

    def resolve_n_l(self, dataset, target) -> int:
        return self.filter.resolve_n_l(_n_source_samples(dataset, target),
                                       dataset.n_classes)

    def resolve_pool_per_cell(self, dataset, target, kind="mixed") -> int:
        if self.pool_per_cell is not None:
            return int(self.pool_per_cell)
        n_l = self.resolve_n_l(dataset, target)
        if kind == "pure":  # random selection only; no entropy headroom needed
            return max(1, int(round(n_l * 1.5)))
        return max(1, int(round(n_l * self.filter.pool_per_cell_factor)))


# ---------------------------------------------------------------------------
# Cached artifact builders.
# ---------------------------------------------------------------------------

def _cached(cache, key, builder):
    if cache is None:
        return builder()
    if key not in cache:
        cache[key] = builder()
    return cache[key]


def get_split(dataset, target, trial_seed, cfg: MethodConfig, cache=None,
              kind="standard"):
    def build():
        seed = derive_seed("split", kind, target, trial_seed)
        if kind == "standard":
            if cfg.oracle:
                return oracle_split(dataset, target, cfg.val_fraction, seed)
            return leave_one_out_split(dataset, target, cfg.val_fraction, seed)
        if kind == "in_domain":
            return in_domain_split(dataset, target, cfg.in_domain_test_fraction,
                                   cfg.val_fraction, seed)
        raise ConfigError(f"unknown split kind {kind!r}")
    mode = "oracle" if (cfg.oracle and kind == "standard") else kind
    return _cached(cache, ("split", mode, target, trial_seed), build)


def get_diffusion(dataset, target, cfg: MethodConfig, cache=None, on_step=None):
    def build():
        dcfg = replace(cfg.diffusion,
                       seed=derive_seed(cfg.artifact_seed, "diffusion", target))
        split = get_split(dataset, target, cfg.artifact_seed, cfg, cache)
        return train_diffusion(dataset, split, dcfg, on_step=on_step)
    return _cached(cache, ("diffusion", target), build)


def _source_domains(dataset, target):
    return [d for d in range(dataset.n_domains) if d != target]

def _n_source_samples(dataset, target):
    return int(np.sum(dataset.domain_ids != target))


def get_pool(dataset, target, kind, cfg: MethodConfig, cache=None):
    """kind: 'mixed' (pair cells) or 'pure' (per-domain cells, basic tier)."""
    def build():
        model = get_diffusion(dataset, target, cfg, cache)
        sources = _source_domains(dataset, target)
        classes = list(range(dataset.n_classes))
        per_cell = cfg.resolve_pool_per_cell(dataset, target, kind)
        seed = derive_seed(cfg.artifact_seed, "pool", kind, target)
        if kind == "mixed":
            return generate_pool(model, sources, classes, per_cell, cfg.mix, seed)
        if kind == "pure":
            return generate_pure_pool(model, sources, classes, per_cell,
                                      cfg.mix, seed)
        raise ConfigError(f"unknown pool kind {kind!r}")
    return _cached(cache, ("pool", kind, target), build)


def get_feedback(dataset, target, cfg: MethodConfig, cache=None, split_kind="standard"):
    def build():
        split = get_split(dataset, target, cfg.artifact_seed, cfg, cache, split_kind)
        seed = derive_seed(cfg.artifact_seed, "feedback", target, split_kind)
        return train_feedback_classifier(dataset, split, cfg.feedback_config(), seed)
    return _cached(cache, ("feedback", split_kind, target), build)


def get_verdict(dataset, target, tier, cfg: MethodConfig, cache=None,
                split_kind="standard"):
    """Selection verdict for one augmentation tier.

    basic: pure pool, random selection. interpolation: mixed pool, random
    selection (count-matched to the filtered tier). fds: mixed pool with the
    configured filter mode.
    """
    n_l = cfg.resolve_n_l(dataset, target)

    def build():
        pool_kind = "pure" if tier == "basic" else "mixed"
        pool = get_pool(dataset, target, pool_kind, cfg, cache)
        h = get_feedback(dataset, target, cfg, cache, split_kind)
        records = score_pool(pool, h)
        seed = derive_seed(cfg.artifact_seed, "verdict", target, tier, split_kind)
        if tier in ("basic", "interpolation"):
            verdict = filter_ablation_mode(records, pool, n_l, "random", seed)
        elif tier == "fds":
            if cfg.filter.mode == "entropy_plus_reject":
                verdict = select(records, pool, n_l)
            else:
                verdict = filter_ablation_mode(records, pool, n_l,
                                               cfg.filter.mode, seed)
        else:
            raise ConfigError(f"unknown tier {tier!r}")
        verdict.classifier_hash = h.weights_hash()
        return verdict
    return _cached(cache, ("verdict", split_kind, target, tier, n_l), build)


def _restrict_pairs(verdict, subset):
    """Keep only the pseudo-domain pairs selected by their sorted index."""
    pairs = sorted({cell[:2] for cell in verdict.cells})
    chosen = {pairs[i] for i in subset}
    cells = {cell: lists for cell, lists in verdict.cells.items()
             if cell[:2] in chosen}
    from .filtering import FilterVerdict
    return FilterVerdict(cells, verdict.n_l, verdict.mode, verdict.classifier_hash)


def get_augmented(dataset, target, tier, cfg: MethodConfig, cache=None,
                  split_kind="standard"):
    n_l = cfg.resolve_n_l(dataset, target)

    def build():
        pool_kind = "pure" if tier == "basic" else "mixed"
        pool = get_pool(dataset, target, pool_kind, cfg, cache)
        verdict = get_verdict(dataset, target, tier, cfg, cache, split_kind)
        if cfg.pseudo_domain_subset is not None and tier != "basic":
            verdict = _restrict_pairs(verdict, cfg.pseudo_domain_subset)
        return assemble_augmented(dataset, verdict, pool, exclude_domain=target)
    return _cached(cache, ("augmented", split_kind, target, tier, n_l,
                           tuple(cfg.pseudo_domain_subset or ())), build)


def _cell_key(dataset, target, tier, cfg):
    n_l = cfg.resolve_n_l(dataset, target) if tier else 0
    return (target, tier, n_l, tuple(cfg.pseudo_domain_subset or ()))


def get_train_run(dataset, target, trial_seed, tier, cfg: MethodConfig,
                  cache=None, split_kind="standard"):
    """Train one classifier run (shared by the erm and swad variants)."""
    def build():
        split = get_split(dataset, target, trial_seed, cfg, cache, split_kind)
        seed = derive_seed("train", split_kind, target, trial_seed, tier or "none")
        if tier is None:
            train_ds, train_split = dataset, split
        else:
            train_ds = get_augmented(dataset, target, tier, cfg, cache, split_kind)
            train_split = augmented_split(split, train_ds)
        return train_erm(train_ds, train_split, cfg.trainer, seed,
                         test_dataset=dataset, track_test=cfg.track_test)
    return _cached(cache, ("run", split_kind, trial_seed)
                   + _cell_key(dataset, target, tier, cfg), build)


def run_cell(dataset, target, trial_seed, method, cfg: MethodConfig,
             cache=None, split_kind="standard") -> float:
    """Train/evaluate one (method, target, seed) cell; returns test accuracy."""
    base, tier = parse_method(method)
    clf, run = get_train_run(dataset, target, trial_seed, tier, cfg, cache, split_kind)
    if base == "swad":
        clf = _cached(cache, ("swad", split_kind, trial_seed)
                      + _cell_key(dataset, target, tier, cfg),
                      lambda: swad_average(run, cfg.swad))
    split = get_split(dataset, target, trial_seed, cfg, cache, split_kind)
    return evaluate(clf, dataset, split.test_ids)


# ---------------------------------------------------------------------------
# Experiment drivers.
# ---------------------------------------------------------------------------

def leave_one_out_experiment(dataset: MultiDomainDataset, method_config: MethodConfig,
                             seeds, cache=None, targets=None) -> RunReport:
    """Each domain in turn is the unseen test set; replicated over seeds."""
    if dataset.n_domains < 2:
        raise ConfigError("need >= 2 domains")
    if not seeds:
        raise ConfigError("need >= 1 seed")
    report = RunReport()
    split_mode = "oracle" if method_config.oracle else "standard"
    for target in (targets if targets is not None else range(dataset.n_domains)):
        name = dataset.domain_names[target]
        for seed in seeds:
            try:
                acc = run_cell(dataset, target, seed, method_config.method,
                               method_config, cache)
                report.add_row(method_config.method, name, seed, split_mode, acc)
            except Exception as exc:  # cell failure is recorded, not fatal
                report.add_failure(method_config.method, name, seed, split_mode, exc)
    return report


def in_domain_experiment(dataset: MultiDomainDataset, method_config: MethodConfig,
                         seeds, cache=None, targets=None) -> RunReport:
    """Same pipeline, but evaluation on a held-out split of the sources."""
    if dataset.n_domains < 2:
        raise ConfigError("need >= 2 domains")
    report = RunReport()
    for target in (targets if targets is not None else range(dataset.n_domains)):
        name = dataset.domain_names[target]
        sources = _source_domains(dataset, target)
        label = ",".join(dataset.domain_names[d][:1].upper() for d in sources)
        report.context.setdefault("source_sets", {})[name] = label
        for seed in seeds:
            try:
                acc = run_cell(dataset, target, seed, method_config.method,
                               method_config, cache, split_kind="in_domain")
                report.add_row(method_config.method, name, seed, "in_domain", acc)
            except Exception as exc:
                report.add_failure(method_config.method, name, seed, "in_domain", exc)
    return report
