"""Superpixel similarity, nearest-neighbour negative masks and balance weights."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .matcore import as_matrix, gram, l2_normalize_rows

Normalization = Literal["paper", "conventional"]

# rows of the M x M similarity handled at once when building masks
_ROW_BLOCK = 1024


@dataclass(frozen=True)
class SimilarityBundle:
    alpha: np.ndarray
    knn_mask: np.ndarray
    votes: np.ndarray
    weights: np.ndarray
    weight_sum: float


def superpixel_similarity(features, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity between every pair of superpixel features."""
    f = l2_normalize_rows(features, eps)
    if f.shape[0] < 2:
        raise ValueError("need at least two superpixels")
    return gram(f, f)


def rescale_unit_interval(alpha) -> np.ndarray:
    return (as_matrix(alpha) + 1.0) / 2.0


def percent_to_k(percent: float, m: int) -> int:
    if m < 2:
        raise ValueError("need m >= 2")
    k = math.floor(percent * m / 100.0)
    return int(min(max(k, 0), m - 2))


def knn_mask(alpha, k: int) -> np.ndarray:
    """Boolean mask of surviving negatives.

    For each anchor the ``k`` most similar other superpixels are removed; ties
    at equal similarity remove the smaller column index first. The diagonal is
    stored as False.
    """
    alpha = as_matrix(alpha)
    m = alpha.shape[0]
    if alpha.shape != (m, m):
        raise ValueError("alpha must be square")
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k > m - 2:
        raise ValueError("no negatives remain")
    mask = np.ones((m, m), dtype=bool)
    np.fill_diagonal(mask, False)
    if k == 0:
        return mask
    for lo in range(0, m, _ROW_BLOCK):
        hi = min(lo + _ROW_BLOCK, m)
        rows = np.arange(lo, hi)
        block = -alpha[lo:hi].copy()
        block[rows - lo, rows] = np.inf  # anchor itself sorts last
        # stable sort on -alpha keeps equal values in column order
        nearest = np.argsort(block, axis=1, kind="stable")[:, :k]
        mask[rows[:, None], nearest] = False
    return mask


def threshold_alpha(alpha, alpha_min: float) -> np.ndarray:
    alpha = as_matrix(alpha)
    out = np.where(alpha < alpha_min, 0.0, alpha)
    np.fill_diagonal(out, np.diag(alpha))
    return out


def balance_weights(alpha, normalization: Normalization = "paper") -> tuple[np.ndarray, np.ndarray, float]:
    """Per-anchor loss weights from similarity votes.

    Votes are row sums of ``alpha`` (diagonal included). With ``paper``
    normalization the shifted votes are divided by the largest raw vote; with
    ``conventional`` they are divided by the vote range. Weights are
    ``1 - normalized vote``. When every vote is equal the weights fall back to
    uniform ``1/M``.
    """
    alpha = as_matrix(alpha)
    m = alpha.shape[0]
    if m < 2:
        raise ValueError("need at least two anchors")
    votes = alpha.sum(axis=1)
    v_min, v_max = votes.min(), votes.max()
    if v_max == v_min:
        weights = np.full(m, 1.0 / m)
        return votes, weights, 1.0
    if normalization == "paper":
        if v_max <= 0:
            raise ValueError("negative vote range; rescale alpha")
        normed = (votes - v_min) / v_max
    elif normalization == "conventional":
        normed = (votes - v_min) / (v_max - v_min)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    weights = 1.0 - normed
    if weights.min() < 0:
        raise ValueError("negative vote range; rescale alpha")
    return votes, weights, math.fsum(weights)


def similarity_bundle(
    features,
    k: int,
    rescale: bool = True,
    normalization: Normalization = "paper",
) -> SimilarityBundle:
    """Everything the losses need from one batch of frozen superpixel features.

    ``rescale`` maps alpha to [0, 1] before it is stored; the mask is unaffected
    since the map preserves order.
    """
    alpha = superpixel_similarity(features)
    if rescale:
        alpha = rescale_unit_interval(alpha)
    mask = knn_mask(alpha, k)
    votes, weights, weight_sum = balance_weights(alpha, normalization)
    return SimilarityBundle(alpha, mask, votes, weights, weight_sum)
