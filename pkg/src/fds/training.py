"""ERM classifier training with domain-balanced batches, dense checkpointing
for weight averaging, argmax evaluation, and run reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .data import MultiDomainDataset, SplitPlan
from .errors import ConfigError, FdsError, LeakageError
from .nets import ConvClassifier, PointClassifier
from .serialize import load_checkpoint, save_checkpoint
from .util import atomic_write_json, atomic_write_text, canonical_json, derive_seed, sha256_bytes


@dataclass
class TrainerConfig:
    steps: int = 400
    batch_per_domain: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    eval_every: int = 25          # also the checkpoint-ring cadence
    max_checkpoints: int = 200    # ring bound
    hidden: int = 64              # point mode
    widths: tuple = (16, 32, 64)  # image mode
    feature_dim: int = 64

    def validate(self):
        if self.steps < 0 or self.batch_per_domain < 1 or self.eval_every < 1:
            raise ConfigError("invalid trainer configuration")


class Classifier:
    """Probabilistic classifier wrapper around a small torch net."""

    def __init__(self, net, mode, payload_shape, n_classes, arch, config: TrainerConfig):
        self.net = net
        self.mode = mode
        self.payload_shape = tuple(payload_shape)
        self.n_classes = n_classes
        self.arch = arch
        self.config = config
        self.frozen = False

    @property
    def feature_dim(self):
        return self.net.feature_dim

    def freeze(self):
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        self.frozen = True

    def logits(self, payloads: torch.Tensor) -> torch.Tensor:
        return self.net(payloads)

    def log_probs(self, payloads: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.logits(payloads), dim=-1)

    def _batched(self, payloads, fn, batch_size=256):
        payloads = np.asarray(payloads, dtype=np.float32)
        outs = []
        with torch.no_grad():
            for start in range(0, len(payloads), batch_size):
                x = torch.from_numpy(payloads[start:start + batch_size])
                outs.append(fn(x).numpy())
        return np.concatenate(outs) if outs else np.empty((0,))

    def predict_proba(self, payloads, batch_size=256) -> np.ndarray:
        return self._batched(payloads, lambda x: torch.softmax(self.logits(x), -1),
                             batch_size)

    def features(self, payloads, batch_size=256) -> np.ndarray:
        return self._batched(payloads, self.net.features, batch_size)

    def state_arrays(self) -> dict:
        return {k: v.detach().numpy().copy() for k, v in self.net.state_dict().items()}

    def load_state_arrays(self, arrays: dict):
        self.net.load_state_dict({k: torch.from_numpy(np.asarray(v).copy())
                                  for k, v in arrays.items()})

    def weights_hash(self) -> str:
        parts = [f"{k}:{v.astype('<f4').tobytes().hex()}"
                 for k, v in sorted(self.state_arrays().items())]
        return sha256_bytes("|".join(parts).encode())

    def save(self, path):
        meta = {"kind": "classifier", "arch": self.arch, "mode": self.mode,
                "payload_shape": list(self.payload_shape),
                "n_classes": self.n_classes, "config": _trainer_config_dict(self.config)}
        save_checkpoint(path, meta, {f"net.{k}": v for k, v in self.state_arrays().items()})

    @classmethod
    def load(cls, path) -> "Classifier":
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "classifier":
            raise FdsError(f"{path} is not a classifier checkpoint")
        cfg = TrainerConfig(**{**meta["config"], "widths": tuple(meta["config"]["widths"])})
        clf = build_classifier(meta["mode"], tuple(meta["payload_shape"]),
                               meta["n_classes"], cfg, seed=0)
        clf.load_state_arrays({k[len("net."):]: v for k, v in tensors.items()})
        return clf


def _trainer_config_dict(config) -> dict:
    d = asdict(config)
    d["widths"] = list(d["widths"])
    return d


def build_classifier(mode, payload_shape, n_classes, config: TrainerConfig,
                     seed: int) -> Classifier:
    torch.manual_seed(derive_seed(seed, "classifier-init"))
    if mode == "point":
        net = PointClassifier(d_in=payload_shape[0], hidden=config.hidden,
                              n_classes=n_classes)
        arch = "point-mlp"
    elif mode == "image":
        net = ConvClassifier(channels=payload_shape[0], widths=tuple(config.widths),
                             feature_dim=config.feature_dim, n_classes=n_classes)
        arch = "image-conv"
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return Classifier(net, mode, payload_shape, n_classes, arch, config)


def cross_entropy_loss(classifier: Classifier, batch) -> torch.Tensor:
    """Mean negative log-likelihood of the true classes."""
    payloads, labels = batch
    labels = torch.as_tensor(labels, dtype=torch.long)
    if torch.any(labels < 0) or torch.any(labels >= classifier.n_classes):
        raise ConfigError("label out of range")
    logp = classifier.log_probs(payloads)
    return -logp[torch.arange(len(labels)), labels].mean()


@dataclass
class TrainRun:
    entries: list               # {"step", "train_loss", "val_acc", ["test_acc"]}
    ring: list                  # (step, {param_name: np.ndarray}) dense checkpoints
    best_step: int
    best_val_acc: float
    best_state: dict
    mode: str
    payload_shape: tuple
    n_classes: int
    config: TrainerConfig
    seed: int

    def val_trace(self):
        return [(e["step"], e["val_acc"]) for e in self.entries if "val_acc" in e]

    def test_trace(self):
        return [(e["step"], e["test_acc"]) for e in self.entries if "test_acc" in e]


def _leakage_check(dataset, split):
    # oracle mode deliberately validates on the target domain; the train
    # stream must stay clean in every mode
    if split.split_mode == "oracle":
        ids = np.asarray(sorted(split.train_ids), dtype=np.int64)
    else:
        ids = np.asarray(sorted(split.train_ids + split.val_ids), dtype=np.int64)
    _, domains = dataset.labels_for(ids)
    if np.any(domains == split.target_domain):
        raise LeakageError(
            f"target domain {split.target_domain} present in train/val ids")
    return ids


def train_erm(dataset: MultiDomainDataset, split: SplitPlan, config: TrainerConfig,
              seed: int = 0, test_dataset: MultiDomainDataset = None,
              track_test: bool = False) -> tuple:
    """Minibatch ERM with per-domain-balanced batches.

    Batches draw `batch_per_domain` samples from every domain present in the
    train set (pseudo-domains included). The checkpoint with peak validation
    accuracy becomes the returned classifier; a dense checkpoint ring at the
    eval cadence is kept for weight averaging. Test-accuracy traces are
    recorded only when `track_test` is set and never influence selection.
    """
    config.validate()
    _leakage_check(dataset, split)
    if dataset.n_classes < 2:
        raise ConfigError("training requires >= 2 classes")
    clf = build_classifier(dataset.mode, dataset.payload_shape,
                           dataset.n_classes, config, seed)

    train_ids = np.asarray(split.train_ids, dtype=np.int64)
    train_classes, train_domains = dataset.labels_for(train_ids)
    domains = np.unique(train_domains)
    per_domain_ids = {int(d): train_ids[train_domains == d] for d in domains}
    val_ids = np.asarray(split.val_ids, dtype=np.int64)
    test_eval = test_dataset if test_dataset is not None else dataset

    rng = np.random.default_rng(derive_seed(seed, "erm-batches"))
    opt = torch.optim.Adam(clf.net.parameters(), lr=config.lr,
                           weight_decay=config.weight_decay)

    entries = []
    ring = []
    best = {"step": 0, "acc": -1.0, "state": None}

    def record(step, train_loss):
        val_acc = evaluate(clf, dataset, val_ids)
        entry = {"step": step, "train_loss": train_loss, "val_acc": val_acc}
        if track_test and len(split.test_ids):
            entry["test_acc"] = evaluate(clf, test_eval, split.test_ids)
        entries.append(entry)
        if len(ring) < config.max_checkpoints:
            ring.append((step, clf.state_arrays()))
        if val_acc > best["acc"]:
            best.update(step=step, acc=val_acc, state=clf.state_arrays())

    record(0, None)
    for step in range(1, config.steps + 1):
        chosen = np.concatenate([
            rng.choice(per_domain_ids[int(d)], size=config.batch_per_domain,
                       replace=True) for d in domains])
        x = torch.from_numpy(dataset.payload_batch(chosen))
        y, _ = dataset.labels_for(chosen)
        loss = cross_entropy_loss(clf, (x, torch.from_numpy(y)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.eval_every == 0 or step == config.steps:
            record(step, float(loss.detach()))

    clf.load_state_arrays(best["state"])
    run = TrainRun(entries, ring, best["step"], best["acc"], best["state"],
                   dataset.mode, dataset.payload_shape, dataset.n_classes,
                   config, seed)
    return clf, run


@dataclass
class SwadPolicy:
    tol_start: float = 0.005  # accuracy fractions (0.5 percentage points)
    tol_end: float = 0.005


def swad_average(train_run: TrainRun, window_policy: SwadPolicy = None) -> Classifier:
    """Elementwise mean of ring checkpoints over a validation-chosen window.

    The window starts at the first eval step whose validation accuracy is
    within tol_start of the trace maximum and ends just before the accuracy
    degrades by tol_end from the running window maximum.
    """
    policy = window_policy or SwadPolicy()
    if not train_run.ring:
        raise ConfigError("train run kept no checkpoints")
    trace = train_run.val_trace()
    ring_steps = [s for s, _ in train_run.ring]
    accs = {s: a for s, a in trace if s in set(ring_steps)}
    steps = [s for s in ring_steps if s in accs]

    start_idx = None
    peak = max(accs[s] for s in steps)
    for i, s in enumerate(steps):
        if accs[s] >= peak - policy.tol_start:
            start_idx = i
            break
    window = []
    if start_idx is None:
        import warnings
        warnings.warn("empty SWAD window; falling back to the best checkpoint")
        window = [train_run.best_step]
    else:
        window_max = -1.0
        for s in steps[start_idx:]:
            if window and accs[s] < window_max - policy.tol_end:
                break
            window.append(s)
            window_max = max(window_max, accs[s])

    states = [state for (s, state) in train_run.ring if s in set(window)]
    mean_state = {}
    for key in states[0]:
        stack = np.stack([st[key].astype(np.float64) for st in states])
        mean_state[key] = stack.mean(axis=0).astype(states[0][key].dtype)

    clf = build_classifier(train_run.mode, train_run.payload_shape,
                           train_run.n_classes, train_run.config, train_run.seed)
    clf.load_state_arrays(mean_state)
    return clf


def evaluate(classifier: Classifier, dataset: MultiDomainDataset, id_set,
             batch_size: int = 64) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest index)."""
    ids = np.asarray(sorted(int(i) for i in id_set), dtype=np.int64)
    if len(ids) == 0:
        raise ConfigError("cannot evaluate on an empty id set")
    probs = classifier.predict_proba(dataset.payload_batch(ids), batch_size)
    preds = np.argmax(probs, axis=1)
    labels, _ = dataset.labels_for(ids)
    return float(np.mean(preds == labels))


# ---------------------------------------------------------------------------
# Run reports.
# ---------------------------------------------------------------------------

class RunReport:
    """Accuracy records keyed by (method, target_domain, seed, split_mode)."""

    CSV_COLUMNS = ("method", "target_domain", "seed", "split_mode", "accuracy")

    def __init__(self):
        self.rows = []
        self.failures = []
        self.context = {}

    def add_row(self, method, target_domain, seed, split_mode, accuracy):
        self.rows.append({"method": method, "target_domain": str(target_domain),
                          "seed": int(seed), "split_mode": split_mode,
                          "accuracy": float(accuracy)})

    def add_failure(self, method, target_domain, seed, split_mode, error):
        self.failures.append({"method": method, "target_domain": str(target_domain),
                              "seed": int(seed), "split_mode": split_mode,
                              "error": str(error)})

    def merge(self, other: "RunReport"):
        self.rows.extend(other.rows)
        self.failures.extend(other.failures)
        self.context.update(other.context)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r["method"], r["target_domain"],
                                                r["seed"], r["split_mode"]))

    def split_modes(self):
        return sorted({r["split_mode"] for r in self.rows})

    def aggregate(self) -> dict:
        """Per split_mode (never across), per method: per-domain and overall
        mean +/- std over seeds. std is None below 2 seeds."""
        out = {}
        for mode in self.split_modes():
            rows = [r for r in self.rows if r["split_mode"] == mode]
            methods = sorted({r["method"] for r in rows})
            out[mode] = {}
            for method in methods:
                mrows = [r for r in rows if r["method"] == method]
                domains = sorted({r["target_domain"] for r in mrows})
                per_domain = {}
                for dom in domains:
                    accs = [r["accuracy"] for r in mrows if r["target_domain"] == dom]
                    per_domain[dom] = {"mean": float(np.mean(accs)),
                                       "std": float(np.std(accs)) if len(accs) >= 2 else None,
                                       "n": len(accs)}
                seeds = sorted({r["seed"] for r in mrows})
                per_seed = []
                for s in seeds:
                    accs = [r["accuracy"] for r in mrows if r["seed"] == s]
                    if len(accs) == len(domains):
                        per_seed.append(float(np.mean(accs)))
                overall = {"mean": float(np.mean([v["mean"] for v in per_domain.values()])),
                           "std": float(np.std(per_seed)) if len(per_seed) >= 2 else None}
                out[mode][method] = {"per_domain": per_domain, "overall": overall}
        return out

    def overall_mean(self, method, split_mode=None) -> float:
        modes = self.split_modes()
        if split_mode is None:
            if len(modes) > 1:
                raise ConfigError(
                    "report mixes split modes "
                    f"{modes}; pass split_mode explicitly, they are never aggregated together")
            split_mode = modes[0]
        agg = self.aggregate()
        if split_mode not in agg or method not in agg[split_mode]:
            raise ConfigError(f"no rows for method {method!r} in mode {split_mode!r}")
        return agg[split_mode][method]["overall"]["mean"]

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.sorted_rows():
            w.writerow([r["method"], r["target_domain"], r["seed"],
                        r["split_mode"], f"{r['accuracy']:.6f}"])
        return buf.getvalue()

    def json_obj(self) -> dict:
        return {"rows": self.sorted_rows(), "failures": self.failures,
                "aggregate": self.aggregate(), "context": self.context}

    def save(self, directory):
        from pathlib import Path
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        atomic_write_text(directory / "report.csv", self.csv_text())
        atomic_write_json(directory / "report.json", self.json_obj())
