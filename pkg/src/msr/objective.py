"""Similarity losses, the reweighted four-pair loss and scalar schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BETA_MODES = ("fixed", "cosine")


@dataclass(frozen=True)
class LossWeights:
    beta: float
    beta_base: float
    mode: str = "cosine"


def _check_pair(name: str, z1: Tensor, z2: Tensor) -> None:
    if z1.shape != z2.shape:
        raise ad.ShapeError(f"{name}: shapes differ, {z1.shape} vs {z2.shape}")
    if z1.data.ndim != 2:
        raise ad.ShapeError(f"{name}: expected [B, d] embeddings, got {z1.shape}")


def _row_cosine(z1: Tensor, z2: Tensor) -> Tensor:
    # l2_normalize raises on rows at or below the 1e-12 floor
    return ad.dot(ad.l2_normalize(z1), ad.l2_normalize(z2))


def mse_loss(z1: Tensor, z2: Tensor) -> Tensor:
    """Batch mean of 2 - 2 * cos(z1, z2), the normalized squared error."""
    _check_pair("mse_loss", z1, z2)
    return 2.0 - 2.0 * ad.mean(_row_cosine(z1, z2))


def neg_cosine_loss(z1: Tensor, z2: Tensor) -> Tensor:
    """Batch mean of -cos(z1, z2)."""
    _check_pair("neg_cosine_loss", z1, z2)
    return -ad.mean(_row_cosine(z1, z2))


SIMILARITIES = {"mse": mse_loss, "neg_cosine": neg_cosine_loss}


def info_nce(z1: Tensor, z2: Tensor, negatives: Tensor | np.ndarray | None, gamma: float) -> Tensor:
    """Contrastive loss of one positive pair against a set of negatives.

    ``z1`` and ``z2`` are [d] vectors, ``negatives`` is [M, d] (M may be 0).
    All three are l2-normalized here before the logits are formed.
    """
    if gamma <= 0:
        raise ValueError(f"temperature must be positive, got {gamma}")
    if z1.data.ndim != 1 or z1.shape != z2.shape:
        raise ad.ShapeError(f"info_nce: expected two [d] vectors, got {z1.shape} and {z2.shape}")
    u, v = ad.l2_normalize(z1), ad.l2_normalize(z2)
    pos = ad.dot(u, v).reshape(1) * (1.0 / gamma)
    if negatives is None:
        negatives = Tensor(np.zeros((0, z1.shape[0]), dtype=z1.dtype))
    elif not isinstance(negatives, Tensor):
        negatives = Tensor(np.asarray(negatives, dtype=z1.dtype))
    if negatives.shape[0] == 0:
        logits = pos
    else:
        if negatives.data.ndim != 2 or negatives.shape[1] != z1.shape[0]:
            raise ad.ShapeError(f"info_nce: negatives must be [M, {z1.shape[0]}], got {negatives.shape}")
        neg = ad.dot(u, ad.l2_normalize(negatives)) * (1.0 / gamma)
        logits = ad.concat([pos, neg], axis=0)
    return ad.logsumexp(logits, axis=0) - ad.sum(pos)


def total_loss(z_on_a: Tensor, z_on_a_prime: Tensor, z_tg_w: Tensor, z_tg_w_prime: Tensor,
               beta: float, similarity: str = "mse", detach_online_partner: bool = True) -> Tensor:
    """Reweighted sum of the four pairs built from two aggressive and two weak views.

    (1-b) L(z, sg(zt')) + b L(z, sg(z')) + (1-b) L(z', sg(zt)) + b L(z', sg(z))

    where z, z' are online predictions of the aggressive views and zt, zt'
    target projections of the weak views.  With ``detach_online_partner``
    off, the online second arguments keep their gradient.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    try:
        L = SIMILARITIES[similarity]
    except KeyError:
        raise ValueError(f"unknown similarity {similarity!r}") from None
    partner = ad.stop_gradient if detach_online_partner else (lambda t: t)
    sg = ad.stop_gradient
    terms = (1.0 - beta) * L(z_on_a, sg(z_tg_w_prime)) + (1.0 - beta) * L(z_on_a_prime, sg(z_tg_w))
    if beta > 0.0:
        terms = terms + beta * L(z_on_a, partner(z_on_a_prime)) + beta * L(z_on_a_prime, partner(z_on_a))
    return terms


def _cosine_fraction(k: int, K: int) -> float:
    if K <= 0:
        raise ValueError(f"total steps must be positive, got {K}")
    if k < 0 or k > K:
        raise ValueError(f"step {k} outside [0, {K}]")
    return (math.cos(math.pi * k / K) + 1.0) / 2.0


def beta_at(k: int, K: int, beta_base: float, mode: str = "cosine") -> float:
    """Aggressive-pair weight at step k: fixed, or cosine-decayed from beta_base to 0."""
    if mode not in BETA_MODES:
        raise ValueError(f"unknown beta schedule {mode!r}")
    frac = _cosine_fraction(k, K)
    return float(beta_base) if mode == "fixed" else beta_base * frac


def cosine_lr(k: int, K: int, lr0: float) -> float:
    return lr0 * _cosine_fraction(k, K)
