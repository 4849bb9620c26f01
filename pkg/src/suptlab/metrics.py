"""ROC-AUC by rank sums, with a pair-counting reference, and masked BCE."""

from __future__ import annotations

import numpy as np

from . import _kernels
from .numerics import Tensor, as_tensor, elementwise, reduce, softplus


class MetricError(ValueError):
    """The metric is undefined for the given input."""


class EmptyMaskError(ValueError):
    """Every label in the batch is masked out."""


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties 1/2).

    Mann-Whitney form: ``(R_pos - P(P+1)/2) / (P N)`` with average ranks.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise MetricError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC-AUC needs both classes present")
    ranks = _kernels.tied_ranks(s)
    rank_sum = ranks[y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc_pairs(scores, labels) -> float:
    """O(P N) reference: count concordant positive/negative pairs."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    pos, neg = s[y], s[~y]
    if not pos.size or not neg.size:
        raise MetricError("ROC-AUC needs both classes present")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (pos.size * neg.size)


def masked_bce_loss(logits, y, y_mask) -> Tensor:
    """Mean sigmoid cross-entropy over unmasked entries, in logit form.

    ``softplus(z) - y z`` equals ``-y log s(z) - (1-y) log(1-s(z))`` without
    ever forming ``s(z)``.
    """
    logits = as_tensor(logits)
    y = np.asarray(y, dtype=np.float64).reshape(logits.shape)
    mask = np.asarray(y_mask, dtype=bool).reshape(logits.shape)
    count = int(mask.sum())
    if count == 0:
        raise EmptyMaskError("every label is masked; loss is undefined")
    m = mask.astype(np.float64)
    # masked targets are zeroed so they cannot leak NaN sentinels
    y0 = np.where(mask, y, 0.0)
    per = softplus(logits) - elementwise("mul", logits, Tensor.wrap(y0))
    return reduce("sum_all", elementwise("mul", per, Tensor.wrap(m))) * (1.0 / count)


def per_task_auc(logits: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """AUC per task over present labels; NaN where a task has one class only."""
    out = np.full(y.shape[1], np.nan)
    for t in range(y.shape[1]):
        keep = mask[:, t]
        yt = y[keep, t]
        if yt.size and 0 < yt.sum() < yt.size:
            out[t] = roc_auc(logits[keep, t], yt)
    return out
