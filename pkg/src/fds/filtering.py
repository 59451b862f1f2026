"""Feedback filtering: score synthetic samples with a classifier trained on
the original data, reject the misclassified ones, and keep the top-N_L by
predictive entropy per (domain pair, class) cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import SYNTHETIC_ID_OFFSET, MultiDomainDataset, SplitPlan
from .errors import ConfigError, FdsError, LeakageError
from .mixing import SamplePool
from .util import atomic_write_json, derive_seed, load_json

FILTER_MODES = ("entropy_plus_reject", "entropy_only", "random")

_P_FLOOR = 1e-12  # probability clamp before the log, guards saturated classifiers


def entropy(probabilities) -> float:
    """Natural-log entropy of a discrete distribution; 0*log(0) counts as 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any(p < 0):
        raise ConfigError("probabilities must be non-negative")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ConfigError(f"probabilities sum to {p.sum():.8f}, not 1")
    terms = np.where(p > 0, p * np.log(np.maximum(p, _P_FLOOR)), 0.0)
    return float(-terms.sum())


@dataclass
class PredictionRecord:
    generation_id: int
    probabilities: np.ndarray
    predicted_class: int
    entropy: float
    correct: bool


@dataclass
class FilterVerdict:
    """Per-cell id lists; selected + rejected_semantic + rejected_low_entropy
    partition each cell and correct = selected U rejected_low_entropy."""
    cells: dict          # (i, j, k) -> {"correct": [...], "selected": [...], ...}
    n_l: int
    mode: str
    classifier_hash: str = None

    def selected_ids(self):
        out = []
        for cell in sorted(self.cells):
            out.extend(self.cells[cell]["selected"])
        return out

    def shortfalls(self):
        """Cells whose correct set was smaller than N_L."""
        return {cell: len(lists["selected"]) for cell, lists in self.cells.items()
                if len(lists["selected"]) < self.n_l}

    def validate(self, pool: SamplePool):
        grouped = {cell: sorted(e.generation_id for e in entries)
                   for cell, entries in pool.cells().items()}
        for cell, lists in self.cells.items():
            sel = set(lists["selected"])
            cor = set(lists["correct"])
            sem = set(lists["rejected_semantic"])
            low = set(lists["rejected_low_entropy"])
            if self.mode == "entropy_plus_reject" and not sel <= cor:
                raise FdsError("selected must be a subset of correct")
            union = sel | sem | low
            if union != set(grouped[cell]) or len(sel) + len(sem) + len(low) != len(union):
                raise FdsError(f"cell {cell}: categories do not partition the cell")

    def save(self, path):
        atomic_write_json(path, {
            "n_l": self.n_l, "mode": self.mode,
            "classifier_hash": self.classifier_hash,
            "cells": {"{},{},{}".format(*cell): lists
                      for cell, lists in sorted(self.cells.items())},
        })

    @classmethod
    def load(cls, path):
        raw = load_json(path)
        cells = {tuple(int(x) for x in key.split(",")): lists
                 for key, lists in raw["cells"].items()}
        return cls(cells, raw["n_l"], raw["mode"], raw.get("classifier_hash"))


def train_feedback_classifier(original_dataset: MultiDomainDataset,
                              split: SplitPlan, config, seed: int = 0):
    """ERM classifier on the original (non-augmented) train ids, frozen."""
    from .training import train_erm
    if original_dataset.n_classes < 2:
        raise ConfigError("feedback classifier needs >= 2 classes")
    classifier, _ = train_erm(original_dataset, split, config, seed=seed)
    classifier.freeze()
    return classifier


def score_pool(pool: SamplePool, classifier, batch_size: int = 256):
    """One PredictionRecord per pool entry; batched, deterministic."""
    if len(pool) == 0:
        return []
    shape = tuple(pool.entries[0].payload.shape)
    if shape != tuple(classifier.payload_shape):
        raise FdsError(f"pool payload shape {shape} does not match "
                       f"classifier input {tuple(classifier.payload_shape)}")
    records = []
    for start in range(0, len(pool), batch_size):
        chunk = pool.entries[start:start + batch_size]
        probs = classifier.predict_proba(np.stack([e.payload for e in chunk]))
        for e, p in zip(chunk, probs):
            pred = int(np.argmax(p))
            records.append(PredictionRecord(e.generation_id, p, pred,
                                            entropy(p), pred == e.class_id))
    return records


def _group_records(records, pool):
    grouped = {}
    for rec in records:
        grouped.setdefault(pool.by_id(rec.generation_id).cell, []).append(rec)
    return grouped


def select(records, pool: SamplePool, n_l: int) -> FilterVerdict:
    """Drop misclassified entries, keep the N_L highest-entropy per cell.

    Ties broken by ascending generation_id for reproducibility.
    """
    if n_l < 1:
        raise ConfigError("N_L must be >= 1")
    cells = {}
    for cell, recs in sorted(_group_records(records, pool).items()):
        correct = sorted((r for r in recs if r.correct),
                         key=lambda r: (-r.entropy, r.generation_id))
        chosen = correct[:n_l]
        cells[cell] = {
            "correct": sorted(r.generation_id for r in correct),
            "selected": sorted(r.generation_id for r in chosen),
            "rejected_semantic": sorted(r.generation_id for r in recs if not r.correct),
            "rejected_low_entropy": sorted(r.generation_id for r in correct[n_l:]),
        }
    verdict = FilterVerdict(cells, n_l, "entropy_plus_reject")
    verdict.validate(pool)
    return verdict


def filter_ablation_mode(records, pool: SamplePool, n_l: int, mode: str,
                         seed: int = 0) -> FilterVerdict:
    """Alternative selection rules used by the ablation grid."""
    if mode not in FILTER_MODES:
        raise ConfigError(f"unknown filter mode {mode!r}")
    if mode == "entropy_plus_reject":
        return select(records, pool, n_l)
    if n_l < 1:
        raise ConfigError("N_L must be >= 1")
    cells = {}
    for cell, recs in sorted(_group_records(records, pool).items()):
        correct_ids = sorted(r.generation_id for r in recs if r.correct)
        if mode == "entropy_only":
            ranked = sorted(recs, key=lambda r: (-r.entropy, r.generation_id))
            chosen = {r.generation_id for r in ranked[:n_l]}
        else:  # random, reproducible under the run seed
            rng = np.random.default_rng(derive_seed(seed, "random-filter", *cell))
            gids = sorted(r.generation_id for r in recs)
            take = min(n_l, len(gids))
            chosen = set(int(g) for g in rng.choice(gids, size=take, replace=False))
        cells[cell] = {
            "correct": correct_ids,
            "selected": sorted(chosen),
            "rejected_semantic": [],
            "rejected_low_entropy": sorted(r.generation_id for r in recs
                                           if r.generation_id not in chosen),
        }
    verdict = FilterVerdict(cells, n_l, mode)
    verdict.validate(pool)
    return verdict


def assemble_augmented(original_dataset: MultiDomainDataset,
                       verdict: FilterVerdict, pool: SamplePool,
                       exclude_domain: int = None) -> MultiDomainDataset:
    """Original samples plus the selected synthetic ones.

    Mixed-pair entries get a fresh pseudo-domain id per unordered pair,
    appended after the original domains ("mix_<name_i>_<name_j>"); pure
    entries keep their source domain id. With `exclude_domain` set, samples
    of that (target) domain must not appear and are dropped with a check.
    """
    selected = verdict.selected_ids()
    entries = [pool.by_id(g) for g in selected]
    gids = [e.generation_id for e in entries]
    if len(set(gids)) != len(gids):
        raise FdsError("duplicate generation_ids in the selected set")

    keep = np.ones(len(original_dataset), dtype=bool)
    if exclude_domain is not None:
        keep = original_dataset.domain_ids != exclude_domain
    payloads = [original_dataset.payloads[keep]]
    class_ids = list(original_dataset.class_ids[keep])
    domain_ids = list(original_dataset.domain_ids[keep])
    sample_ids = list(original_dataset.sample_ids[keep])

    mixed_pairs = sorted({e.cell[:2] for e in entries if e.domain_i != e.domain_j})
    pair_domain = {pair: original_dataset.n_domains + n
                   for n, pair in enumerate(mixed_pairs)}
    domain_names = list(original_dataset.domain_names) + [
        f"mix_{original_dataset.domain_names[i]}_{original_dataset.domain_names[j]}"
        for (i, j) in mixed_pairs]

    for e in sorted(entries, key=lambda e: e.generation_id):
        if exclude_domain is not None and exclude_domain in (e.domain_i, e.domain_j):
            raise LeakageError("selected synthetic entry references the target domain")
        payloads.append(e.payload[None])
        class_ids.append(e.class_id)
        if e.domain_i == e.domain_j:
            domain_ids.append(e.domain_i)
        else:
            domain_ids.append(pair_domain[(e.domain_i, e.domain_j)])
        sample_ids.append(SYNTHETIC_ID_OFFSET + e.generation_id)

    return MultiDomainDataset(
        np.concatenate(payloads), class_ids, domain_ids, sample_ids,
        original_dataset.n_domains + len(mixed_pairs), original_dataset.n_classes,
        domain_names, original_dataset.class_names, original_dataset.mode)


def augmented_split(split: SplitPlan, augmented: MultiDomainDataset) -> SplitPlan:
    """Extend the train set with every synthetic sample in the augmented set."""
    synth = [int(s) for s in augmented.sample_ids if s >= SYNTHETIC_ID_OFFSET]
    return SplitPlan(split.target_domain, split.train_ids + synth,
                     split.val_ids, split.test_ids, split.val_fraction,
                     split.seed, split.split_mode)
