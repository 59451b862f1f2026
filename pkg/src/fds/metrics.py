"""Distribution metrics and plots: a cross-fitted discriminator score between
two feature sets (an approximation of a diversity-shift metric, not a
reimplementation of any published estimator), penultimate-layer features, and
a 2-D neighbor-embedding projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .util import derive_seed


@dataclass
class DiversityScore:
    value: float
    estimator: str
    extractor_hash: str = None
    n_per_side: int = 0


@dataclass
class DiversityConfig:
    n_max: int = 1000
    folds: int = 2
    seed: int = 0
    max_iter: int = 1000


def diversity_shift(features_a, features_b, estimator_config: DiversityConfig = None,
                    extractor_hash: str = None) -> DiversityScore:
    """Balanced two-sample discriminator score in [0, 1].

    Trains a logistic-regression discriminator between the two sets with
    k-fold cross-fitting; score = 2 * balanced_accuracy - 1, clamped. Near 0
    for matching sets, near 1 for disjoint supports.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.metrics import balanced_accuracy_score
    from sklearn.model_selection import StratifiedKFold

    cfg = estimator_config or DiversityConfig()
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError("feature sets must be 2-D with matching dimension")
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("feature sets must be non-empty")

    rng = np.random.default_rng(derive_seed(cfg.seed, "diversity"))
    n = min(len(a), len(b), cfg.n_max)
    a = a[rng.choice(len(a), size=n, replace=False)]
    b = b[rng.choice(len(b), size=n, replace=False)]
    x = np.concatenate([a, b])
    y = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])

    folds = StratifiedKFold(n_splits=cfg.folds, shuffle=True,
                            random_state=derive_seed(cfg.seed, "folds") % (2**32))
    accs = []
    for train_idx, test_idx in folds.split(x, y):
        clf = LogisticRegression(max_iter=cfg.max_iter)
        clf.fit(x[train_idx], y[train_idx])
        accs.append(balanced_accuracy_score(y[test_idx], clf.predict(x[test_idx])))
    score = float(np.clip(2.0 * np.mean(accs) - 1.0, 0.0, 1.0))
    return DiversityScore(score, "crossfit-logreg-approximation", extractor_hash, n)


def features_for_metric(classifier, payloads) -> np.ndarray:
    """Penultimate-layer activations of the (feedback) classifier."""
    return classifier.features(payloads)


def project_embeddings(features, labels, out_png=None, out_csv=None, seed=0,
                       label_names=None):
    """2-D neighbor-embedding projection colored by (pseudo-)domain label.

    Returns the [N, 2] coordinates; optionally writes a scatter plot and a CSV
    of coordinates. Degenerate identical features get a warned jitter.
    """
    from sklearn.manifold import TSNE

    feats = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(feats) < 10:
        raise ConfigError("projection needs at least 10 points")
    if float(np.ptp(feats)) == 0.0:
        import warnings
        warnings.warn("identical features; adding jitter before projection")
        rng = np.random.default_rng(derive_seed(seed, "jitter"))
        feats = feats + rng.normal(0, 1e-6, feats.shape)

    perplexity = min(30.0, (len(feats) - 1) / 3.0)
    coords = TSNE(n_components=2, random_state=seed % (2**32), init="pca",
                  perplexity=perplexity).fit_transform(feats)

    if out_csv is not None:
        lines = ["x,y,label"]
        lines += [f"{x:.6f},{y:.6f},{lab}" for (x, y), lab in zip(coords, labels)]
        from .util import atomic_write_text
        atomic_write_text(out_csv, "\n".join(lines) + "\n")
    if out_png is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 5))
        for lab in sorted(set(labels.tolist())):
            mask = labels == lab
            name = label_names[lab] if label_names is not None else str(lab)
            ax.scatter(coords[mask, 0], coords[mask, 1], s=8, label=name)
        ax.legend(loc="best", fontsize=8)
        ax.set_title("feature projection (penultimate classifier features)")
        fig.tight_layout()
        fig.savefig(out_png, dpi=120)
        plt.close(fig)
    return coords
