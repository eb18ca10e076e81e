"""Contrastive objectives and the rules for combining loss terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from feataug import autodiff as ad
from feataug.autodiff import Tensor

COMBINE_MODES = ("Average", "Free")


@dataclass
class LossTerm:
    tag: str  # "original" or "fa<j>"
    value: Tensor


def info_nce(anchors: Tensor, positives: Tensor, tau: float, *, symmetric_negatives: bool = False) -> Tensor:
    """Batch-mean InfoNCE where anchor ``i`` must pick positive ``i``.

    The candidates in the denominator are the ``N`` positive-branch rows.
    ``symmetric_negatives`` additionally counts the other anchors as
    negatives (the 2(N-1) SimCLR variant).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a = ad.l2_normalize(anchors)
    p = ad.l2_normalize(positives)
    b = a.shape[0]
    logits = ad.scale(ad.matmul(a, ad.transpose(p)), 1.0 / tau)
    if symmetric_negatives and b > 1:
        self_sim = ad.scale(ad.matmul(a, ad.transpose(a)), 1.0 / tau)
        # exp(-1e4) underflows to exactly 0, which removes self-pairs
        mask = np.where(np.eye(b, dtype=bool), -1e4, 0.0)
        self_sim = ad.add(self_sim, ad.constant(mask))
        denom = ad.logsumexp_rows(ad.concat([logits, self_sim], axis=1))
    else:
        denom = ad.logsumexp_rows(logits)
    return ad.mean(ad.sub(denom, ad.pick(logits, np.arange(b))))


def byol_similarity(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over rows of ``2 - 2 cos(pred_i, target_i)``."""
    p = ad.l2_normalize(pred)
    t = ad.l2_normalize(target)
    cos = ad.sum(ad.mul(p, t), axis=1)
    return ad.add(ad.scale(ad.mean(cos), -2.0), 2.0)


def combine(terms: list[LossTerm] | list[Tensor], mode: str) -> Tensor:
    """``Average`` takes the mean of the terms, ``Free`` their sum."""
    if not terms:
        raise ValueError("cannot combine an empty list of loss terms")
    if mode not in COMBINE_MODES:
        raise ValueError(f"unknown combine mode {mode!r}")
    values = [t.value if isinstance(t, LossTerm) else t for t in terms]
    total = values[0]
    for v in values[1:]:
        total = ad.add(total, v)
    if mode == "Average" and len(values) > 1:
        total = ad.scale(total, 1.0 / len(values))
    return total
