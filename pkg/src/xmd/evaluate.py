"""Representation quality: ridge linear probe, minority/majority split,
uniformity and tolerance."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .matcore import as_matrix, l2_normalize_rows

logger = logging.getLogger(__name__)


@dataclass
class ProbeReport:
    per_class_accuracy: dict[int, float]
    overall_accuracy: float
    minority_mean: float = float("nan")
    majority_mean: float = float("nan")
    dropped_classes: list[int] = field(default_factory=list)

    def with_groups(self, minority: set[int], majority: set[int]) -> "ProbeReport":
        """Fill minority/majority means from a class split (classes absent from the report are skipped)."""
        def mean(group):
            vals = [self.per_class_accuracy[c] for c in sorted(group) if c in self.per_class_accuracy]
            return float(np.mean(vals)) if vals else float("nan")

        return ProbeReport(
            self.per_class_accuracy, self.overall_accuracy,
            mean(minority), mean(majority), list(self.dropped_classes),
        )

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in sorted(self.per_class_accuracy.items())}
        return json.dumps(d, indent=2, allow_nan=True)


def stratified_split(labels: np.ndarray, seed: int, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Per-class seeded 80/20 split; every class with >= 2 samples lands on both sides."""
    rng = np.random.Generator(np.random.Philox(seed))
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = min(max(1, round(test_fraction * idx.size)), idx.size - 1)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def fit_ridge(x: np.ndarray, y_onehot: np.ndarray, ridge_lambda: float) -> tuple[np.ndarray, np.ndarray]:
    """One-vs-all ridge regression with an unpenalized bias."""
    mu = x.mean(axis=0)
    ybar = y_onehot.mean(axis=0)
    xc = x - mu
    if math.isinf(ridge_lambda):
        w = np.zeros((x.shape[1], y_onehot.shape[1]))
    else:
        a = xc.T @ xc + ridge_lambda * np.eye(x.shape[1])
        w = np.linalg.solve(a, xc.T @ (y_onehot - ybar))
    return w, ybar - mu @ w


def linear_probe(embeddings, labels, ridge_lambda: float = 1e-3, split_seed: int = 0,
                 normalize: bool = True) -> ProbeReport:
    """Fit a ridge probe on 80% of the rows and report per-class recall on the rest.

    Classes with fewer than two samples are dropped and listed in the report.
    """
    x = as_matrix(embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    if normalize:
        x = l2_normalize_rows(x)
    counts = np.bincount(labels)
    dropped = [int(c) for c in np.flatnonzero((counts > 0) & (counts < 2))]
    if dropped:
        logger.warning("probe drops classes with < 2 samples: %s", dropped)
        keep = ~np.isin(labels, dropped)
        x, labels = x[keep], labels[keep]
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes with >= 2 samples")
    tr, te = stratified_split(labels, split_seed)
    y = (labels[tr, None] == classes[None, :]).astype(np.float64)
    w, b = fit_ridge(x[tr], y, ridge_lambda)
    pred = classes[np.argmax(x[te] @ w + b, axis=1)]
    truth = labels[te]
    per_class = {int(c): float(np.mean(pred[truth == c] == c)) for c in classes}
    return ProbeReport(per_class, float(np.mean(pred == truth)), dropped_classes=dropped)


def minority_majority_split(proportions, threshold: float = 0.05) -> tuple[set[int], set[int]]:
    p = np.asarray(proportions, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("proportions must sum to 1")
    majority = {int(c) for c in np.flatnonzero(p > threshold)}
    minority = set(range(p.size)) - majority
    return minority, majority


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    return np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)


def uniformity(embeddings) -> float:
    """log of the mean Gaussian potential exp(-2 |x_i - x_j|^2) over ordered pairs i != j."""
    x = l2_normalize_rows(embeddings)
    m = x.shape[0]
    if m < 2:
        raise ValueError("uniformity needs at least two embeddings")
    pot = np.exp(-2.0 * _pairwise_sq_dists(x))
    np.fill_diagonal(pot, 0.0)
    return float(math.log(pot.sum() / (m * (m - 1))))


def tolerance(embeddings, labels) -> float:
    """Mean cosine similarity over same-class pairs i != j."""
    x = l2_normalize_rows(embeddings)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    if not same.any():
        raise ValueError("no same-class pair")
    return float((x @ x.T)[same].mean())


def within_cross_alpha(alpha: np.ndarray, labels) -> tuple[float, float]:
    """Mean similarity over same-class and cross-class pairs (diagonal excluded)."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(labels.size, dtype=bool)
    within = alpha[same & off]
    cross = alpha[~same]
    return (float(within.mean()) if within.size else float("nan"),
            float(cross.mean()) if cross.size else float("nan"))
