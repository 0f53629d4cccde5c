"""Cross-modal InfoNCE variants with analytic gradients.

All four losses share one softmax per anchor row ``i`` over the logits
``s_ii / tau`` (positive) and ``s_ij / tau`` for surviving negatives, where
``s = normalize(Q) @ normalize(K).T``:

* ``loss_slidr``: every other superpixel is a negative, anchors weighted 1/M.
* ``loss_alpha``: negative logits are scaled by ``1 - alpha_ij``.
* ``loss_knn``: negatives with mask 0 are dropped from the denominator.
* ``loss_st``: ``loss_knn`` with per-anchor weights ``w_i / sum(w)``.

Gradients are returned with respect to the raw (unnormalized) Q and K.
Rows are processed in blocks so that M in the thousands stays within memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .matcore import as_matrix, l2_normalize_rows, l2_normalize_rows_backward

Variant = Literal["slidr", "alpha", "knn", "st"]

ROW_BLOCK = 512
_ALPHA_TOL = 1e-12


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    variant: Variant = "slidr"
    normalization_eps: float = 1e-12

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossResult:
    value: float
    grad_q: np.ndarray
    grad_k: np.ndarray
    per_anchor: np.ndarray
    probs: np.ndarray | None = None


def similarity_loss(
    s: np.ndarray,
    tau: float,
    alpha: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    anchor_coef: np.ndarray | None = None,
    row_offset: int = 0,
):
    """Loss terms for a block of anchor rows of the similarity matrix.

    ``s``, ``alpha`` and ``mask`` hold rows ``row_offset .. row_offset+b`` of the
    full M x M matrices. Returns ``(per_anchor, grad_s, probs)`` where
    ``grad_s`` is the derivative of ``sum_i anchor_coef[i] * per_anchor[i]``
    and masked entries of ``probs`` are exactly zero.
    """
    b, m = s.shape
    rows = np.arange(b)
    cols = rows + row_offset
    factor = np.full((b, m), 1.0 / tau)
    if alpha is not None:
        factor = (1.0 - alpha) / tau
        factor[rows, cols] = 1.0 / tau
    logits = s * factor
    if mask is None:
        keep = np.ones((b, m), dtype=bool)
    else:
        keep = mask.astype(bool, copy=True)
        keep[rows, cols] = True
    shifted = np.where(keep, logits, -np.inf)
    top = shifted.max(axis=1, keepdims=True)
    expd = np.exp(shifted - top)
    denom = expd.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(denom[:, 0])
    per_anchor = lse - logits[rows, cols]
    probs = expd / denom
    if anchor_coef is None:
        anchor_coef = np.ones(b)
    dlogits = probs.copy()
    dlogits[rows, cols] -= 1.0
    grad_s = dlogits * anchor_coef[:, None] * factor
    return per_anchor, grad_s, probs


def _check_pair(q, k) -> tuple[np.ndarray, np.ndarray]:
    q = as_matrix(q)
    k = as_matrix(k)
    if q.shape != k.shape:
        raise ValueError(f"Q and K shapes differ: {q.shape} vs {k.shape}")
    if q.shape[0] < 2:
        raise ValueError("needs at least one negative")
    if q.shape[1] < 1:
        raise ValueError("embedding dimension must be >= 1")
    return q, k


def contrastive_loss(
    q,
    k,
    cfg: LossConfig = LossConfig(),
    alpha: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    weight_sum: float | None = None,
    keep_probs: bool = True,
) -> LossResult:
    """Shared engine behind the four public variants."""
    q, k = _check_pair(q, k)
    m = q.shape[0]
    if alpha is not None:
        alpha = as_matrix(alpha)
        if alpha.shape != (m, m):
            raise ValueError(f"alpha must be {m}x{m}, got {alpha.shape}")
        if alpha.max() > 1.0 + _ALPHA_TOL:
            raise ValueError("alpha entries above 1")
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (m, m):
            raise ValueError(f"mask must be {m}x{m}, got {mask.shape}")
        off = mask.astype(bool)
        surviving = off.sum(axis=1) - off[np.arange(m), np.arange(m)]
        if surviving.min() < 1:
            raise ValueError(f"anchor {int(np.argmin(surviving))} has no surviving negatives")
    if weights is None:
        coef = np.full(m, 1.0 / m)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (m,):
            raise ValueError("need one weight per anchor")
        if weight_sum is None:
            weight_sum = math.fsum(weights)
        if not weight_sum > 0:
            raise ValueError("weight_sum must be positive")
        if weights.min() < 0:
            raise ValueError("weights must be nonnegative")
        coef = weights / weight_sum

    eps = cfg.normalization_eps
    qn = l2_normalize_rows(q, eps)
    kn = l2_normalize_rows(k, eps)
    grad_qn = np.zeros_like(qn)
    grad_kn = np.zeros_like(kn)
    per_anchor = np.empty(m)
    probs = np.zeros((m, m)) if keep_probs else None
    for lo in range(0, m, ROW_BLOCK):
        hi = min(lo + ROW_BLOCK, m)
        s = qn[lo:hi] @ kn.T
        terms, grad_s, p = similarity_loss(
            s,
            cfg.temperature,
            None if alpha is None else alpha[lo:hi],
            None if mask is None else mask[lo:hi],
            coef[lo:hi],
            row_offset=lo,
        )
        per_anchor[lo:hi] = terms
        grad_qn[lo:hi] = grad_s @ kn
        grad_kn += grad_s.T @ qn[lo:hi]
        if probs is not None:
            probs[lo:hi] = p
    value = math.fsum(coef * per_anchor)
    return LossResult(
        value=value,
        grad_q=l2_normalize_rows_backward(q, grad_qn, eps),
        grad_k=l2_normalize_rows_backward(k, grad_kn, eps),
        per_anchor=per_anchor,
        probs=probs,
    )


def loss_slidr(q, k, cfg: LossConfig = LossConfig(), keep_probs: bool = True) -> LossResult:
    return contrastive_loss(q, k, cfg, keep_probs=keep_probs)


def loss_alpha(q, k, alpha, cfg: LossConfig = LossConfig(), keep_probs: bool = True) -> LossResult:
    """Negatives enter as ``exp((1 - alpha_ij) * s_ij / tau)``; the positive is untouched."""
    if alpha is None:
        raise ValueError("alpha is required")
    return contrastive_loss(q, k, cfg, alpha=alpha, keep_probs=keep_probs)


def loss_knn(q, k, mask, cfg: LossConfig = LossConfig(), keep_probs: bool = True) -> LossResult:
    if mask is None:
        raise ValueError("mask is required")
    return contrastive_loss(q, k, cfg, mask=mask, keep_probs=keep_probs)


def loss_st(
    q, k, mask, weights, weight_sum: float | None = None,
    cfg: LossConfig = LossConfig(), keep_probs: bool = True,
) -> LossResult:
    if mask is None:
        raise ValueError("mask is required")
    return contrastive_loss(
        q, k, cfg, mask=mask, weights=weights, weight_sum=weight_sum, keep_probs=keep_probs
    )


def finite_difference_check(
    fn: Callable[[np.ndarray, np.ndarray], LossResult],
    q,
    k,
    epsilon: float = 1e-5,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The error of each entry is ``|analytic - numeric| / max(1, |numeric|)``,
    taken over every entry of Q and K.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    q = as_matrix(q).copy()
    k = as_matrix(k).copy()
    res = fn(q, k)
    worst = 0.0
    for target, analytic in ((q, res.grad_q), (k, res.grad_k)):
        for idx in np.ndindex(target.shape):
            orig = target[idx]
            target[idx] = orig + epsilon
            up = fn(q, k).value
            target[idx] = orig - epsilon
            down = fn(q, k).value
            target[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
    return worst
