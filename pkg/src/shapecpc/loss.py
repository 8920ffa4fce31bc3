"""Contrastive prediction loss and its texture-weighted combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import functional as F
from .tensor import DimensionError, Tensor, broadcast_to, concatenate, matmul, swapaxes

NEGATIVE_MODES = ("prediction", "target")


class MissingWeightError(KeyError):
    pass


@dataclass(frozen=True)
class LossWeights:
    omega0: float = 1.0
    omega: tuple = (0.5, 0.5, 0.5, 0.5, 0.5)

    def __post_init__(self):
        values = (self.omega0, *self.omega)
        if any(w < 0 for w in values):
            raise ValueError(f"loss weights must be non-negative, got {values}")
        if not any(w > 0 for w in values):
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def uniform(cls, omega0: float, omega_texture: float, n_textures: int) -> "LossWeights":
        return cls(float(omega0), (float(omega_texture),) * n_textures)

    def weight(self, texture_id: int) -> float:
        if texture_id == 0:
            return self.omega0
        if 1 <= texture_id <= len(self.omega):
            return self.omega[texture_id - 1]
        raise MissingWeightError(f"no weight for texture_id {texture_id} (have 0..{len(self.omega)})")

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.omega0 * c, tuple(w * c for w in self.omega))


def contrastive_logits(pred: Tensor, target: Tensor, train: Tensor, tau: float = 0.5, negatives: str = "prediction"):
    """Positive logits ``(..., n)`` and negative logits ``(..., n, m)``.

    Location ``i`` scores its prediction against its own encoded target; the
    negatives score against every training representation ``j`` of the same
    sample. ``negatives="target"`` uses the encoded target instead of the
    prediction on the negative side.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if negatives not in NEGATIVE_MODES:
        raise ValueError(f"negatives must be one of {NEGATIVE_MODES}, got {negatives!r}")
    if pred.shape[-2:] != target.shape[-2:] and np.broadcast_shapes(pred.shape, target.shape) is None:
        raise DimensionError(f"predictions {pred.shape} and targets {target.shape} are misaligned")
    if train.shape[-1] != pred.shape[-1]:
        raise DimensionError(f"train width {train.shape[-1]} differs from prediction width {pred.shape[-1]}")
    inv = 1.0 / tau
    pos = (pred * target).sum(axis=-1) * inv
    left = pred if negatives == "prediction" else target
    neg = matmul(left, swapaxes(train, -1, -2)) * inv
    return pos, neg


def contrastive_loss(pred: Tensor, target: Tensor, train: Tensor, tau: float = 0.5, negatives: str = "prediction") -> Tensor:
    """Per-sample loss summed over target locations; leading axes are kept."""
    pos, neg = contrastive_logits(pred, target, train, tau, negatives)
    lead = np.broadcast_shapes(pos.shape, neg.shape[:-1])
    pos_b = broadcast_to(pos, lead) if pos.shape != lead else pos
    neg_b = broadcast_to(neg, lead + neg.shape[-1:]) if neg.shape[:-1] != lead else neg
    logits = concatenate([pos_b.reshape(*lead, 1), neg_b], axis=-1)
    per_location = F.logsumexp(logits, axis=-1) - pos_b
    return per_location.sum(axis=-1)


def combined_loss(per_texture: Iterable[tuple[int, Tensor]], weights: LossWeights) -> Tensor:
    total = None
    for texture_id, value in per_texture:
        term = value * weights.weight(texture_id)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no loss terms to combine")
    return total


def combine_stacked(per_texture: Tensor, texture_ids: Sequence[int], weights: LossWeights) -> Tensor:
    """Weighted sum of a length-T+1 loss vector indexed by ``texture_ids``."""
    w = np.array([weights.weight(t) for t in texture_ids], dtype=per_texture.data.dtype)
    return (per_texture * Tensor(w)).sum()
