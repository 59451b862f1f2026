"""Multi-domain sample model, built-in benchmarks, folder ingestion, and splits.

Two payload worlds are supported: 2-D points (analytically checkable) and small
images in [0,1] (C, H, W). Everything downstream is payload-shape agnostic.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FdsError
from .util import atomic_write_bytes, atomic_write_json, derive_seed, load_json

DATASET_FORMAT = "fds-dataset-v1"

# Synthetic samples appended by the filter module get ids above this offset so
# they can never collide with generator/ingest ids (which are sequential).
SYNTHETIC_ID_OFFSET = 1 << 32


@dataclass
class Sample:
    sample_id: int
    class_id: int
    domain_id: int
    payload: np.ndarray


class MultiDomainDataset:
    """Samples from n domains and m classes, stored as parallel arrays.

    `payloads` is float32, sample-major. All payload access goes through
    `payload_batch` so tests can interpose access tracking.
    """

    def __init__(self, payloads, class_ids, domain_ids, sample_ids,
                 n_domains, n_classes, domain_names, class_names, mode):
        self.payloads = np.ascontiguousarray(payloads, dtype=np.float32)
        self.class_ids = np.asarray(class_ids, dtype=np.int64)
        self.domain_ids = np.asarray(domain_ids, dtype=np.int64)
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        self.n_domains = int(n_domains)
        self.n_classes = int(n_classes)
        self.domain_names = list(domain_names)
        self.class_names = list(class_names)
        self.mode = mode
        if mode not in ("point", "image"):
            raise ConfigError(f"unknown dataset mode {mode!r}")
        if not (len(self.payloads) == len(self.class_ids) == len(self.domain_ids)
                == len(self.sample_ids)):
            raise FdsError("parallel arrays disagree in length")
        if len(set(self.sample_ids.tolist())) != len(self.sample_ids):
            raise FdsError("sample_ids are not unique")
        if self.class_ids.size and (self.class_ids.min() < 0 or self.class_ids.max() >= n_classes):
            raise FdsError("class_id out of range")
        if self.domain_ids.size and (self.domain_ids.min() < 0 or self.domain_ids.max() >= n_domains):
            raise FdsError("domain_id out of range")
        self._index_of = {int(s): i for i, s in enumerate(self.sample_ids)}

    def __len__(self):
        return len(self.sample_ids)

    @property
    def payload_shape(self):
        return tuple(self.payloads.shape[1:])

    def sample(self, sample_id: int) -> Sample:
        i = self._index_of[int(sample_id)]
        return Sample(int(self.sample_ids[i]), int(self.class_ids[i]),
                      int(self.domain_ids[i]), self.payloads[i])

    def __iter__(self):
        for s in self.sample_ids:
            yield self.sample(int(s))

    def indices_of(self, sample_ids) -> np.ndarray:
        return np.asarray([self._index_of[int(s)] for s in sample_ids], dtype=np.int64)

    def payload_batch(self, sample_ids) -> np.ndarray:
        return self.payloads[self.indices_of(sample_ids)]

    def labels_for(self, sample_ids):
        idx = self.indices_of(sample_ids)
        return self.class_ids[idx], self.domain_ids[idx]

    def ids_of_domain(self, domain_id) -> np.ndarray:
        return self.sample_ids[self.domain_ids == domain_id]

    def ids_of_cell(self, domain_id, class_id) -> np.ndarray:
        mask = (self.domain_ids == domain_id) & (self.class_ids == class_id)
        return self.sample_ids[mask]

    def domain_index(self, name: str) -> int:
        return self.domain_names.index(name)

    def validate_cells(self):
        """Require every (domain, class) cell non-empty (benchmark invariant)."""
        for d in range(self.n_domains):
            for k in range(self.n_classes):
                if len(self.ids_of_cell(d, k)) == 0:
                    raise FdsError(f"empty cell (domain={d}, class={k})")

    # -- persistence: meta.json + payloads.bin (LE float32) + labels.csv -----

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": DATASET_FORMAT,
            "mode": self.mode,
            "n_domains": self.n_domains,
            "n_classes": self.n_classes,
            "domain_names": self.domain_names,
            "class_names": self.class_names,
            "payload_shape": list(self.payload_shape),
            "n_samples": len(self),
        }
        atomic_write_json(directory / "meta.json", meta)
        atomic_write_bytes(directory / "payloads.bin",
                           self.payloads.astype("<f4").tobytes())
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "class_id", "domain_id"])
        for s, k, d in zip(self.sample_ids, self.class_ids, self.domain_ids):
            w.writerow([int(s), int(k), int(d)])
        atomic_write_bytes(directory / "labels.csv", buf.getvalue().encode())

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        meta = load_json(directory / "meta.json")
        if meta.get("format") != DATASET_FORMAT:
            raise FdsError(f"unsupported dataset format in {directory}: {meta.get('format')!r}")
        shape = tuple(meta["payload_shape"])
        raw = np.fromfile(directory / "payloads.bin", dtype="<f4")
        payloads = raw.reshape((meta["n_samples"],) + shape)
        sample_ids, class_ids, domain_ids = [], [], []
        with open(directory / "labels.csv", newline="") as f:
            for row in csv.DictReader(f):
                sample_ids.append(int(row["sample_id"]))
                class_ids.append(int(row["class_id"]))
                domain_ids.append(int(row["domain_id"]))
        return cls(payloads, class_ids, domain_ids, sample_ids,
                   meta["n_domains"], meta["n_classes"],
                   meta["domain_names"], meta["class_names"], meta["mode"])


# ---------------------------------------------------------------------------
# Point benchmark: Gaussian (domain, class) cells on a shifted/rotated circle.
# ---------------------------------------------------------------------------

@dataclass
class DomainGeometry:
    """Cell means for the point benchmark.

    Class k sits on a circle of `class_radius`; domain d rotates the whole
    constellation by d*rotation and translates it by d*shift.
    """
    class_radius: float = 2.0
    sigma: float = 0.35
    shift: tuple = (3.0, 0.0)
    rotation: float = 0.35

    def mean(self, domain_id: int, class_id: int, n_classes: int) -> np.ndarray:
        angle = 2.0 * math.pi * class_id / n_classes + self.rotation * domain_id
        base = self.class_radius * np.array([math.cos(angle), math.sin(angle)])
        return base + domain_id * np.asarray(self.shift, dtype=float)


def make_gaussian_domains(n_domains, n_classes, per_cell_count,
                          domain_geometry=None, seed=0) -> MultiDomainDataset:
    # single-domain / single-class worlds are allowed: they are the
    # analytically checkable oracles for the sampler
    if n_domains < 1 or n_classes < 1 or per_cell_count < 1:
        raise ConfigError("n_domains, n_classes, per_cell_count must be positive")
    geo = domain_geometry or DomainGeometry()

    means = {(d, k): geo.mean(d, k, n_classes)
             for d in range(n_domains) for k in range(n_classes)}
    keys = sorted(means)
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            if np.array_equal(means[a], means[b]):
                raise ConfigError(f"degenerate geometry: cells {a} and {b} share mean {means[a]}")

    payloads, class_ids, domain_ids = [], [], []
    for d in range(n_domains):
        for k in range(n_classes):
            rng = np.random.default_rng(derive_seed(seed, "gauss", d, k))
            pts = rng.normal(means[(d, k)], geo.sigma, size=(per_cell_count, 2))
            payloads.append(pts)
            class_ids.extend([k] * per_cell_count)
            domain_ids.extend([d] * per_cell_count)
    payloads = np.concatenate(payloads).astype(np.float32)
    n = len(payloads)
    ds = MultiDomainDataset(payloads, class_ids, domain_ids, np.arange(n),
                            n_domains, n_classes,
                            [f"domain{d}" for d in range(n_domains)],
                            [f"class{k}" for k in range(n_classes)], "point")
    ds.validate_cells()
    return ds


# ---------------------------------------------------------------------------
# Image benchmark: geometric shape classes rendered in named styles.
# ---------------------------------------------------------------------------

SHAPE_CLASSES = ("disk", "square", "triangle", "cross")
STYLE_VOCABULARY = ("filled", "outline", "inverted", "textured")


def _shape_sdf(shape, xx, yy, r, theta):
    c, s = math.cos(-theta), math.sin(-theta)
    x = c * xx - s * yy
    y = s * xx + c * yy
    if shape == "disk":
        return np.hypot(x, y) - r
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) - 0.85 * r
    if shape == "triangle":
        # equilateral, circumradius r: max over the three edge half-planes
        d = -np.inf * np.ones_like(x)
        for ang in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6):
            d = np.maximum(d, x * math.cos(ang) + y * math.sin(ang) - 0.5 * r)
        return d
    if shape == "cross":
        bar1 = np.maximum(np.abs(x) - r, np.abs(y) - 0.32 * r)
        bar2 = np.maximum(np.abs(y) - r, np.abs(x) - 0.32 * r)
        return np.minimum(bar1, bar2)
    raise ConfigError(f"unknown shape class {shape!r}")


def _render_shape(shape, style, image_size, rng):
    n = image_size
    jit = rng.uniform(-0.06, 0.06, size=2) * n
    cx, cy = (n - 1) / 2 + jit[0], (n - 1) / 2 + jit[1]
    r = n * rng.uniform(0.30, 0.38)
    theta = rng.uniform(-0.3, 0.3)
    ys, xs = np.mgrid[0:n, 0:n]
    sd = _shape_sdf(shape, xs - cx, ys - cy, r, theta)

    aa = 1.4  # anti-alias edge width in pixels
    cover = np.clip(0.5 - sd / aa, 0.0, 1.0)
    fg = 0.92 + rng.uniform(-0.06, 0.06)
    bg = 0.06 + rng.uniform(-0.04, 0.04)
    if style == "filled":
        img = bg + (fg - bg) * cover
    elif style == "outline":
        band = np.clip(0.5 - (np.abs(sd) - 1.1) / aa, 0.0, 1.0)
        img = bg + (fg - bg) * band
    elif style == "inverted":
        img = fg + (bg - fg) * cover
    elif style == "textured":
        cell = 3
        checker = ((xs // cell + ys // cell) % 2).astype(float)
        tex = fg * (0.35 + 0.65 * checker)
        img = bg + (tex - bg) * cover
    else:
        raise ConfigError(f"unknown style {style!r}; vocabulary: {STYLE_VOCABULARY}")
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None, :, :].astype(np.float32)


def make_styled_shapes(n_classes, styles, per_cell_count, image_size,
                       seed=0) -> MultiDomainDataset:
    if image_size < 16:
        raise ConfigError("image_size must be >= 16")
    if not 2 <= n_classes <= len(SHAPE_CLASSES):
        raise ConfigError(f"n_classes must be in [2, {len(SHAPE_CLASSES)}]")
    styles = list(styles)
    for st in styles:
        if st not in STYLE_VOCABULARY:
            raise ConfigError(f"unknown style {st!r}; vocabulary: {STYLE_VOCABULARY}")
    if len(set(styles)) != len(styles) or len(styles) < 2:
        raise ConfigError("styles must be >= 2 distinct names")

    payloads, class_ids, domain_ids = [], [], []
    for d, style in enumerate(styles):
        for k in range(n_classes):
            rng = np.random.default_rng(derive_seed(seed, "shapes", style, k))
            for _ in range(per_cell_count):
                payloads.append(_render_shape(SHAPE_CLASSES[k], style, image_size, rng))
                class_ids.append(k)
                domain_ids.append(d)
    payloads = np.stack(payloads)
    ds = MultiDomainDataset(payloads, class_ids, domain_ids, np.arange(len(payloads)),
                            len(styles), n_classes, styles,
                            list(SHAPE_CLASSES[:n_classes]), "image")
    ds.validate_cells()
    return ds


# ---------------------------------------------------------------------------
# Folder ingestion (root/domain/class/image layout).
# ---------------------------------------------------------------------------

def ingest_image_folder(root_path, image_size) -> MultiDomainDataset:
    from PIL import Image

    root = Path(root_path)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(domains) < 2:
        raise ConfigError(f"{root} must contain >= 2 domain subdirectories")

    class_sets = {d: sorted(p.name for p in (root / d).iterdir() if p.is_dir())
                  for d in domains}
    reference = class_sets[domains[0]]
    for d in domains[1:]:
        if class_sets[d] != reference:
            raise FdsError(
                f"domain {d!r} has class set {class_sets[d]} but {domains[0]!r} has {reference}")

    payloads, class_ids, domain_ids = [], [], []
    for d_idx, d in enumerate(domains):
        for k_idx, k in enumerate(reference):
            files = sorted(p for p in (root / d / k).iterdir() if p.is_file())
            for f in files:
                try:
                    with Image.open(f) as im:
                        im = im.convert("RGB").resize((image_size, image_size),
                                                      Image.BILINEAR)
                        arr = np.asarray(im, dtype=np.float32) / 255.0
                except Exception as exc:
                    raise FdsError(f"unreadable image file {f}: {exc}") from exc
                payloads.append(arr.transpose(2, 0, 1))
                class_ids.append(k_idx)
                domain_ids.append(d_idx)
    payloads = np.stack(payloads)
    ds = MultiDomainDataset(payloads, class_ids, domain_ids, np.arange(len(payloads)),
                            len(domains), len(reference), domains, reference, "image")
    ds.validate_cells()
    return ds


# ---------------------------------------------------------------------------
# Leave-one-out splits.
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    target_domain: int
    train_ids: list
    val_ids: list
    test_ids: list
    val_fraction: float = 0.2
    seed: int = 0
    split_mode: str = "standard"  # standard | oracle | in_domain
    _sets: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.train_ids = sorted(int(i) for i in self.train_ids)
        self.val_ids = sorted(int(i) for i in self.val_ids)
        self.test_ids = sorted(int(i) for i in self.test_ids)

    def id_sets(self):
        if self._sets is None:
            self._sets = {"train": frozenset(self.train_ids),
                          "val": frozenset(self.val_ids),
                          "test": frozenset(self.test_ids)}
        return self._sets

    def validate(self, dataset: MultiDomainDataset):
        sets = self.id_sets()
        if sets["train"] & sets["val"] or sets["train"] & sets["test"] or sets["val"] & sets["test"]:
            raise FdsError("split id sets are not pairwise disjoint")
        everything = sets["train"] | sets["val"] | sets["test"]
        all_ids = set(int(s) for s in dataset.sample_ids)
        target_ids = set(int(s) for s in dataset.ids_of_domain(self.target_domain))
        if self.split_mode == "standard":
            if everything != all_ids:
                raise FdsError("split does not cover the dataset exactly")
            if sets["test"] != target_ids:
                raise FdsError("standard split: test set must be exactly the target domain")
        elif self.split_mode == "oracle":
            if everything != all_ids:
                raise FdsError("split does not cover the dataset exactly")
            if not (sets["val"] | sets["test"]) == target_ids:
                raise FdsError("oracle split: val+test must be exactly the target domain")
            if sets["train"] & target_ids:
                raise FdsError("oracle split: train must not touch the target domain")
        elif self.split_mode == "in_domain":
            if everything != all_ids - target_ids:
                raise FdsError("in-domain split must cover exactly the source domains")
        else:
            raise FdsError(f"unknown split_mode {self.split_mode!r}")

    def save(self, path):
        atomic_write_json(path, {
            "target_domain": self.target_domain,
            "train_ids": self.train_ids, "val_ids": self.val_ids,
            "test_ids": self.test_ids, "val_fraction": self.val_fraction,
            "seed": self.seed, "split_mode": self.split_mode,
        })

    @classmethod
    def load(cls, path):
        return cls(**load_json(path))


def _stratified_take(ids, fraction, rng):
    """Pick round(fraction * n) ids, seeded; returns (taken, rest)."""
    ids = np.sort(np.asarray(ids))
    n_take = int(round(fraction * len(ids)))
    perm = rng.permutation(len(ids))
    chosen = set(ids[perm[:n_take]].tolist())
    taken = [i for i in ids.tolist() if i in chosen]
    rest = [i for i in ids.tolist() if i not in chosen]
    return taken, rest


def leave_one_out_split(dataset, target_domain, val_fraction=0.2, seed=0) -> SplitPlan:
    if dataset.n_domains < 2:
        raise ConfigError("leave-one-out requires at least 2 domains")
    if not 0 <= target_domain < dataset.n_domains:
        raise ConfigError(f"target_domain {target_domain} out of range")
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError("val_fraction must be in (0, 1)")

    test_ids = dataset.ids_of_domain(target_domain).tolist()
    train_ids, val_ids = [], []
    rng = np.random.default_rng(derive_seed(seed, "loo", target_domain))
    for d in range(dataset.n_domains):
        if d == target_domain:
            continue
        for k in range(dataset.n_classes):
            val, train = _stratified_take(dataset.ids_of_cell(d, k), val_fraction, rng)
            val_ids.extend(val)
            train_ids.extend(train)
    plan = SplitPlan(target_domain, train_ids, val_ids, test_ids,
                     val_fraction, seed, "standard")
    plan.validate(dataset)
    return plan


def oracle_split(dataset, target_domain, val_fraction=0.2, seed=0) -> SplitPlan:
    """Opt-in oracle mode: validation drawn from the target domain itself."""
    if dataset.n_domains < 2:
        raise ConfigError("leave-one-out requires at least 2 domains")
    train_ids = []
    for d in range(dataset.n_domains):
        if d != target_domain:
            train_ids.extend(dataset.ids_of_domain(d).tolist())
    val_ids, test_ids = [], []
    rng = np.random.default_rng(derive_seed(seed, "oracle", target_domain))
    for k in range(dataset.n_classes):
        val, test = _stratified_take(dataset.ids_of_cell(target_domain, k),
                                     val_fraction, rng)
        val_ids.extend(val)
        test_ids.extend(test)
    plan = SplitPlan(target_domain, train_ids, val_ids, test_ids,
                     val_fraction, seed, "oracle")
    plan.validate(dataset)
    return plan


def holdout_split(dataset, val_fraction=0.2, seed=0) -> SplitPlan:
    """Train/val over every domain, no held-out domain (single-domain worlds).

    The sentinel target_domain -1 never matches a real domain, so leakage
    guards pass trivially. Not a leave-one-out plan; no test set.
    """
    train_ids, val_ids = [], []
    rng = np.random.default_rng(derive_seed(seed, "holdout"))
    for d in range(dataset.n_domains):
        for k in range(dataset.n_classes):
            val, train = _stratified_take(dataset.ids_of_cell(d, k), val_fraction, rng)
            val_ids.extend(val)
            train_ids.extend(train)
    return SplitPlan(-1, train_ids, val_ids, [], val_fraction, seed, "in_domain")


def in_domain_split(dataset, target_domain, test_fraction=0.2,
                    val_fraction=0.2, seed=0) -> SplitPlan:
    """Hold out a stratified test share of the source domains themselves."""
    if dataset.n_domains < 2:
        raise ConfigError("leave-one-out requires at least 2 domains")
    rng = np.random.default_rng(derive_seed(seed, "indomain", target_domain))
    train_ids, val_ids, test_ids = [], [], []
    for d in range(dataset.n_domains):
        if d == target_domain:
            continue
        for k in range(dataset.n_classes):
            cell = dataset.ids_of_cell(d, k)
            test, rest = _stratified_take(cell, test_fraction, rng)
            val, train = _stratified_take(rest, val_fraction, rng)
            test_ids.extend(test)
            val_ids.extend(val)
            train_ids.extend(train)
    plan = SplitPlan(target_domain, train_ids, val_ids, test_ids,
                     val_fraction, seed, "in_domain")
    plan.validate(dataset)
    return plan
