"""Contrastive losses: NT-Xent, supervised style InfoNCE, SimSiam, and the
style-infused total.

Both InfoNCE variants L2-normalize embeddings internally (the tau=0.07
convention presumes unit-norm features) and exclude self-similarity from
denominators. All functions return a scalar Tensor on the ambient tape.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad

VARIANTS = ("simclr", "simsiam")


def _masked_logsumexp_rows(sim: ad.Tensor) -> ad.Tensor:
    """Row-wise log sum exp of a square similarity matrix, self excluded.

    The row-max shift is a data-dependent constant: the gradient of
    logsumexp is unchanged by it, so it lives outside the tape.
    """
    n = sim.shape[0]
    off_diag = ad.constant(1.0 - np.eye(n))
    shifted = np.where(np.eye(n, dtype=bool), -np.inf, sim.data)
    row_max = ad.constant(shifted.max(axis=1, keepdims=True))
    e = ad.exp(ad.sub(sim, row_max))
    denom = ad.sum(ad.mul(e, off_diag), axis=1)
    return ad.add(ad.log(denom), ad.sum(row_max, axis=1))


def _similarity(z_all: ad.Tensor, tau: float) -> ad.Tensor:
    z = ad.l2_normalize(z_all, axis=1)
    return ad.mul_scalar(ad.matmul(z, ad.transpose(z)), 1.0 / tau)


def nt_xent(z1: ad.Tensor, z2: ad.Tensor, tau: float) -> ad.Tensor:
    """NT-Xent over 2B views: positive = counterpart view, negatives = the
    other 2B-2 views, mean over anchors. B=1 has no negatives and returns 0.
    """
    if tau <= 0:
        raise ValueError("nt_xent: tau must be positive")
    z1, z2 = ad.as_tensor(z1), ad.as_tensor(z2)
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError(f"nt_xent: expected matching (B, D) views, got {z1.shape} and {z2.shape}")
    b = z1.shape[0]
    sim = _similarity(ad.concat(z1, z2, axis=0), tau)
    lse = _masked_logsumexp_rows(sim)
    pos_mask = np.zeros((2 * b, 2 * b))
    idx = np.arange(2 * b)
    pos_mask[idx, (idx + b) % (2 * b)] = 1.0
    pos = ad.sum(ad.mul(sim, ad.constant(pos_mask)), axis=1)
    return ad.mean(ad.sub(lse, pos))


def style_infonce(z_all: ad.Tensor, style_labels, tau: float) -> ad.Tensor:
    """Supervised InfoNCE separating two style groups in one 2B batch.

    For each anchor, every same-style other sample is a positive; each
    anchor's positive sum is scaled by 1/(2B-1) and the anchor terms are
    summed (not averaged). Requires exactly two label values, B of each.
    """
    if tau <= 0:
        raise ValueError("style_infonce: tau must be positive")
    z_all = ad.as_tensor(z_all)
    labels = np.asarray(style_labels)
    n = z_all.shape[0]
    if labels.shape != (n,):
        raise ValueError(f"style_infonce: labels shape {labels.shape} does not match {n} embeddings")
    values, counts = np.unique(labels, return_counts=True)
    if len(values) != 2 or counts[0] != counts[1]:
        raise ValueError("style_infonce: batch must contain exactly two styles in equal number")

    sim = _similarity(z_all, tau)
    lse = _masked_logsumexp_rows(sim)
    same = (labels[:, None] == labels[None, :]).astype(np.float64)
    np.fill_diagonal(same, 0.0)
    pos_total = ad.sum(ad.mul(sim, ad.constant(same)))
    per_anchor_counts = ad.constant(same.sum(axis=1))
    lse_total = ad.sum(ad.mul(lse, per_anchor_counts))
    return ad.mul_scalar(ad.sub(lse_total, pos_total), 1.0 / (n - 1))


def simsiam_loss(p1: ad.Tensor, z2: ad.Tensor, p2: ad.Tensor, z1: ad.Tensor) -> ad.Tensor:
    """-1/2 [cos(p1, stopgrad(z2)) + cos(p2, stopgrad(z1))], mean over batch."""
    p1, z2, p2, z1 = map(ad.as_tensor, (p1, z2, p2, z1))
    if not (p1.shape == z2.shape == p2.shape == z1.shape):
        raise ValueError("simsiam_loss: all four inputs must share a shape")
    a = ad.mean(ad.cosine_sim(p1, ad.detach(z2)))
    b = ad.mean(ad.cosine_sim(p2, ad.detach(z1)))
    return ad.mul_scalar(ad.add(a, b), -0.5)


def unsup_loss(variant: str, z1: ad.Tensor, z2: ad.Tensor, tau: float,
               predictor: Callable[[ad.Tensor], ad.Tensor] | None = None) -> ad.Tensor:
    """Dispatch the contrastive loss for a variant.

    simclr ignores ``predictor``; simsiam applies it to both views and uses
    the stop-gradient symmetric cosine loss.
    """
    if variant == "simclr":
        return nt_xent(z1, z2, tau)
    if variant == "simsiam":
        if predictor is None:
            raise ValueError("unsup_loss: simsiam needs a predictor")
        return simsiam_loss(predictor(z1), z2, predictor(z2), z1)
    raise ValueError(f"unsup_loss: unknown variant {variant!r}")


def fedstyle_total(clean_inputs: tuple[ad.Tensor, ad.Tensor],
                   infused_inputs: tuple[ad.Tensor, ad.Tensor] | None,
                   lam: float, variant: str, tau: float,
                   predictor: Callable[[ad.Tensor], ad.Tensor] | None = None) -> ad.Tensor:
    """Clean contrastive loss plus lam times the style-infused one.

    lam == 0 returns the clean loss exactly (the infused inputs may be None
    and are never evaluated).
    """
    if lam < 0:
        raise ValueError("fedstyle_total: lambda must be non-negative")
    if variant not in VARIANTS:
        raise ValueError(f"fedstyle_total: unknown variant {variant!r}")
    clean = unsup_loss(variant, clean_inputs[0], clean_inputs[1], tau, predictor)
    if lam == 0.0:
        return clean
    if infused_inputs is None:
        raise ValueError("fedstyle_total: lambda > 0 requires infused inputs")
    infused = unsup_loss(variant, infused_inputs[0], infused_inputs[1], tau, predictor)
    return ad.add(clean, ad.mul_scalar(infused, lam))
