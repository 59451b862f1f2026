import math

import numpy as np
import pytest

from fds.data import SYNTHETIC_ID_OFFSET, make_gaussian_domains, leave_one_out_split
from fds.errors import ConfigError, FdsError, LeakageError
from fds.filtering import (FilterVerdict, PredictionRecord, assemble_augmented,
                           augmented_split, entropy, filter_ablation_mode,
                           score_pool, select, train_feedback_classifier)
from fds.mixing import MixPolicy, SamplePool, SyntheticSample
from fds.training import TrainerConfig

from oracles import brute_force_entropy_only, brute_force_select, entropy_by_hand


def test_entropy_exact_values():
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert entropy(np.ones(7) / 7) == pytest.approx(math.log(7), abs=1e-9)
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-9)


def test_entropy_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = rng.integers(2, 9)
        p = rng.dirichlet(np.ones(m))
        h = entropy(p)
        assert h == pytest.approx(entropy_by_hand(p), abs=1e-9)
        assert h == pytest.approx(entropy(rng.permutation(p)), abs=1e-9)
        assert h <= math.log(m) + 1e-9  # uniform maximizes


def test_entropy_errors():
    with pytest.raises(ConfigError):
        entropy([0.5, -0.1, 0.6])
    with pytest.raises(ConfigError):
        entropy([0.5, 0.6])


def _pool_from(cells):
    """cells: {(i, j, k): [(gid, payload_value), ...]}"""
    entries = []
    for (i, j, k), members in sorted(cells.items()):
        for gid, val in members:
            entries.append(SyntheticSample(
                np.array([val], dtype=np.float32), k, i, j, 0.5,
                "condition_level", None, gid * 1000 + 7, 2.0, gid))
    return SamplePool(entries, max(len(m) for m in cells.values()),
                      MixPolicy(t_mix_range=(1, 1), ddim_steps=8), 0)


class _StubClassifier:
    def __init__(self, prob_fn, n_classes, payload_shape=(1,)):
        self.prob_fn = prob_fn
        self.n_classes = n_classes
        self.payload_shape = payload_shape

    def predict_proba(self, payloads, batch_size=None):
        return np.stack([self.prob_fn(p) for p in payloads])


def test_score_pool_uniform_stub():
    pool = _pool_from({(0, 1, 0): [(0, 0.1), (1, 0.2)], (0, 1, 1): [(2, 0.3)]})
    h = _StubClassifier(lambda p: np.ones(3) / 3, 3)
    records = score_pool(pool, h)
    assert len(records) == len(pool)
    for r in records:
        assert r.entropy == pytest.approx(math.log(3), abs=1e-9)
        assert r.predicted_class == 0  # argmax tie-break: lowest index
    assert records[0].correct and records[1].correct  # class 0 entries
    assert not records[2].correct                     # class 1 entry


def test_score_pool_onehot_stub():
    pool = _pool_from({(0, 1, 1): [(0, 0.1), (1, 0.2)]})
    one_hot = np.zeros(2)
    one_hot[1] = 1.0
    h = _StubClassifier(lambda p: one_hot, 2)
    records = score_pool(pool, h)
    assert all(r.correct for r in records)
    assert all(r.entropy == 0.0 for r in records)


def test_score_pool_shape_mismatch():
    pool = _pool_from({(0, 1, 0): [(0, 0.0)]})
    h = _StubClassifier(lambda p: np.ones(2) / 2, 2, payload_shape=(3, 4, 4))
    with pytest.raises(FdsError, match="shape"):
        score_pool(pool, h)


def _records(spec):
    """spec: [(gid, entropy, correct)] -> PredictionRecords (probs unused)."""
    return [PredictionRecord(g, np.array([1.0, 0.0]), 0 if ok else 1, e, ok)
            for g, e, ok in spec]


def test_select_four_element_example():
    pool = _pool_from({(0, 1, 0): [(0, 0.0), (1, 0.0), (2, 0.0), (3, 0.0)]})
    spec = [(0, 0.9, True), (1, 0.8, False), (2, 0.7, True), (3, 0.1, True)]
    verdict = select(_records(spec), pool, 2)
    cell = verdict.cells[(0, 1, 0)]
    exp_sel, exp_sem, exp_low = brute_force_select(spec, 2)
    assert cell["selected"] == exp_sel == [0, 2]
    assert cell["rejected_semantic"] == exp_sem == [1]
    assert cell["rejected_low_entropy"] == exp_low == [3]


def test_select_nl_exceeds_correct():
    pool = _pool_from({(0, 1, 0): [(0, 0.0), (1, 0.0), (2, 0.0)]})
    spec = [(0, 0.5, True), (1, 0.4, True), (2, 0.3, False)]
    verdict = select(_records(spec), pool, 10)
    cell = verdict.cells[(0, 1, 0)]
    assert cell["selected"] == [0, 1] == cell["correct"]
    assert verdict.shortfalls() == {(0, 1, 0): 2}


def test_select_all_incorrect():
    pool = _pool_from({(0, 1, 0): [(0, 0.0), (1, 0.0)]})
    spec = [(0, 0.5, False), (1, 0.4, False)]
    verdict = select(_records(spec), pool, 2)
    cell = verdict.cells[(0, 1, 0)]
    assert cell["selected"] == []
    assert cell["rejected_semantic"] == [0, 1]


def test_select_monotonicity_invariant():
    rng = np.random.default_rng(3)
    spec = [(g, float(rng.random()), bool(rng.random() < 0.7)) for g in range(20)]
    pool = _pool_from({(0, 1, 0): [(g, 0.0) for g, _, _ in spec]})
    verdict = select(_records(spec), pool, 6)
    cell = verdict.cells[(0, 1, 0)]
    ent = {g: e for g, e, _ in spec}
    if cell["selected"] and cell["rejected_low_entropy"]:
        assert min(ent[g] for g in cell["selected"]) >= \
            max(ent[g] for g in cell["rejected_low_entropy"])


def test_select_oracle_equivalence_randomized():
    rng = np.random.default_rng(11)
    for trial in range(500):
        size = int(rng.integers(1, 21))
        spec = [(g, float(np.round(rng.random(), 3)), bool(rng.random() < 0.6))
                for g in range(size)]
        pool = _pool_from({(0, 1, 0): [(g, 0.0) for g, _, _ in spec]})
        n_l = int(rng.integers(1, 8))
        verdict = select(_records(spec), pool, n_l)
        cell = verdict.cells[(0, 1, 0)]
        exp_sel, exp_sem, exp_low = brute_force_select(spec, n_l)
        assert cell["selected"] == exp_sel
        assert cell["rejected_semantic"] == exp_sem
        assert cell["rejected_low_entropy"] == exp_low

        v2 = filter_ablation_mode(_records(spec), pool, n_l, "entropy_only")
        exp_sel2, exp_rest2 = brute_force_entropy_only(spec, n_l)
        assert v2.cells[(0, 1, 0)]["selected"] == exp_sel2


def test_filter_ablation_entropy_only_example():
    pool = _pool_from({(0, 1, 0): [(0, 0.0), (1, 0.0), (2, 0.0), (3, 0.0)]})
    spec = [(0, 0.9, True), (1, 0.8, False), (2, 0.7, True), (3, 0.1, True)]
    verdict = filter_ablation_mode(_records(spec), pool, 2, "entropy_only")
    assert verdict.cells[(0, 1, 0)]["selected"] == [0, 1]  # includes the wrong one
    assert verdict.cells[(0, 1, 0)]["rejected_semantic"] == []


def test_filter_ablation_random_reproducible():
    pool = _pool_from({(0, 1, 0): [(g, 0.0) for g in range(12)]})
    spec = [(g, 0.5, True) for g in range(12)]
    a = filter_ablation_mode(_records(spec), pool, 4, "random", seed=5)
    b = filter_ablation_mode(_records(spec), pool, 4, "random", seed=5)
    c = filter_ablation_mode(_records(spec), pool, 4, "random", seed=6)
    assert a.cells == b.cells
    assert a.cells != c.cells


def test_filter_ablation_entropy_plus_reject_is_select():
    rng = np.random.default_rng(2)
    spec = [(g, float(rng.random()), bool(rng.random() < 0.5)) for g in range(15)]
    pool = _pool_from({(0, 1, 0): [(g, 0.0) for g, _, _ in spec]})
    assert filter_ablation_mode(_records(spec), pool, 5,
                                "entropy_plus_reject").cells == \
        select(_records(spec), pool, 5).cells
    with pytest.raises(ConfigError):
        filter_ablation_mode(_records(spec), pool, 5, "bogus")


def test_verdict_roundtrip(tmp_path):
    pool = _pool_from({(0, 1, 0): [(0, 0.0), (1, 0.0)], (0, 2, 1): [(2, 0.0)]})
    spec = [(0, 0.9, True), (1, 0.2, False), (2, 0.5, True)]
    verdict = select(_records(spec), pool, 1)
    verdict.save(tmp_path / "verdict.json")
    back = FilterVerdict.load(tmp_path / "verdict.json")
    assert back.cells == verdict.cells
    assert back.n_l == 1 and back.mode == "entropy_plus_reject"
    back.validate(pool)


def _onehot(k, m=4):
    p = np.zeros(m)
    p[k] = 1.0
    return p


def test_assemble_empty_verdict_is_identity():
    ds = make_gaussian_domains(3, 2, 10, seed=1)
    pool = _pool_from({(0, 1, 0): [(0, 0.0)]})
    verdict = select(_records([(0, 0.5, False)]), pool, 1)  # nothing selected
    A = assemble_augmented(ds, verdict, pool)
    assert len(A) == len(ds)
    assert np.array_equal(A.payloads, ds.payloads)
    assert np.array_equal(A.sample_ids, ds.sample_ids)
    assert A.n_domains == ds.n_domains


def test_assemble_counting_and_pseudo_domains():
    ds = make_gaussian_domains(3, 2, 10, seed=1)
    # payload shape of pool entries must match the dataset payload shape
    cells = {}
    gid = 0
    for i in range(3):
        for j in range(i + 1, 3):
            for k in range(2):
                cells[(i, j, k)] = [(gid + n, float(n)) for n in range(5)]
                gid += 5
    entries = []
    for (i, j, k), members in sorted(cells.items()):
        for g, val in members:
            entries.append(SyntheticSample(np.full(2, val, np.float32), k, i, j,
                                           0.5, "condition_level", None,
                                           g * 31 + 5, 2.0, g))
    pool = SamplePool(entries, 5, MixPolicy(t_mix_range=(1, 1), ddim_steps=8), 0)
    records = [PredictionRecord(e.generation_id, _onehot(e.class_id, 2),
                                e.class_id, 0.5, True) for e in pool.entries]
    verdict = select(records, pool, 5)
    A = assemble_augmented(ds, verdict, pool)
    assert len(A) == len(ds) + 3 * 2 * 5
    assert A.n_domains == ds.n_domains + 3
    assert A.domain_names[3:] == ["mix_domain0_domain1", "mix_domain0_domain2",
                                  "mix_domain1_domain2"]
    synth_ids = [s for s in A.sample_ids if s >= SYNTHETIC_ID_OFFSET]
    assert len(synth_ids) == 30
    # original payloads unchanged (hash equality)
    orig = A.payload_batch(ds.sample_ids)
    assert np.array_equal(orig, ds.payloads)
    # a verdict listing one generation id in two cells is rejected
    first = sorted(verdict.cells)
    corrupt = {cell: dict(lists) for cell, lists in verdict.cells.items()}
    corrupt[first[1]] = dict(corrupt[first[1]],
                             selected=corrupt[first[0]]["selected"][:1])
    bad = FilterVerdict(corrupt, verdict.n_l, verdict.mode)
    with pytest.raises(FdsError, match="duplicate"):
        assemble_augmented(ds, bad, pool)


def test_assemble_excludes_target_domain():
    ds = make_gaussian_domains(3, 2, 10, seed=1)
    pool = _pool_from({(0, 1, 0): [(0, 0.0)]})
    records = [PredictionRecord(0, _onehot(0, 2), 0, 0.5, True)]
    entries = [SyntheticSample(np.zeros(2, np.float32), 0, 0, 1, 0.5,
                               "condition_level", None, 3, 2.0, 0)]
    pool = SamplePool(entries, 1, MixPolicy(t_mix_range=(1, 1), ddim_steps=8), 0)
    verdict = select(records, pool, 1)
    A = assemble_augmented(ds, verdict, pool, exclude_domain=2)
    target_ids = set(ds.ids_of_domain(2).tolist())
    assert not set(int(s) for s in A.sample_ids) & target_ids
    assert len(A) == len(ds) - 20 + 1
    # a selected entry touching the excluded domain is a leak
    with pytest.raises(LeakageError):
        assemble_augmented(ds, verdict, pool, exclude_domain=1)


def test_augmented_split_extends_train():
    ds = make_gaussian_domains(3, 2, 10, seed=1)
    split = leave_one_out_split(ds, 2, 0.2, seed=0)
    entries = [SyntheticSample(np.zeros(2, np.float32), 0, 0, 1, 0.5,
                               "condition_level", None, 3, 2.0, 0)]
    pool = SamplePool(entries, 1, MixPolicy(t_mix_range=(1, 1), ddim_steps=8), 0)
    verdict = select([PredictionRecord(0, _onehot(0, 2), 0, 0.5, True)], pool, 1)
    A = assemble_augmented(ds, verdict, pool, exclude_domain=2)
    plan = augmented_split(split, A)
    assert set(plan.train_ids) == set(split.train_ids) | {SYNTHETIC_ID_OFFSET}
    assert plan.val_ids == split.val_ids
    assert plan.test_ids == split.test_ids


def test_train_feedback_classifier():
    ds = make_gaussian_domains(3, 2, 60, seed=3)
    split = leave_one_out_split(ds, 2, 0.2, seed=0)
    cfg = TrainerConfig(steps=150, batch_per_domain=16, eval_every=25, hidden=32)
    h = train_feedback_classifier(ds, split, cfg, seed=1)
    assert h.frozen
    from fds.training import evaluate
    assert evaluate(h, ds, split.val_ids) >= 0.9
    h2 = train_feedback_classifier(ds, split, cfg, seed=1)
    assert h.weights_hash() == h2.weights_hash()


def test_train_feedback_classifier_one_class_rejected():
    ds = make_gaussian_domains(2, 1, 10, seed=0)
    from fds.data import holdout_split
    split = holdout_split(ds, 0.2, seed=0)
    with pytest.raises(ConfigError):
        train_feedback_classifier(ds, split, TrainerConfig(steps=1), seed=0)
