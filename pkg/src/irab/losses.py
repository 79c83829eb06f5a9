"""Training objectives: density MSE, segmentation cross-entropy and the
consistency / ranking losses of the compared semi-supervised baselines.

Reductions are sums over pixels unless ``reduction="mean"`` is passed.
Consistency targets (UDA, Mean Teacher, ICT) are constants: gradients flow
only through the first argument.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .pseudo import UNLABELED, PseudoLabelSet

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")


def sample_mixup(rng: np.random.Generator, a: float = 1.0, b: float = 1.0) -> float:
    """Mix-up coefficient drawn from Beta(a, b)."""
    return float(rng.beta(a, b))


def _zero() -> Tensor:
    return Tensor(0.0)


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def _reduce(total: Tensor, n: int, reduction: str) -> Tensor:
    if reduction == "sum":
        return total
    if reduction == "mean":
        return ag.scale(total, 1.0 / max(n, 1))
    raise ConfigError(f"unknown reduction {reduction!r}")


def mse_loss(pred: Tensor, target, reduction: str = "sum") -> Tensor:
    """Sum of squared differences between predicted and target density."""
    t = _const(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {t.shape}")
    return _reduce(ag.sum(ag.square(ag.sub(pred, t))), t.data.size, reduction)


def seg_ce_loss(probs: Tensor, targets, reduction: str = "sum") -> Tensor:
    """Cross-entropy ``-log P(target)`` summed over labelled pixels.

    ``probs`` is an ``(1, C, H, W)`` posterior. ``targets`` is an ``(H, W)``
    integer map of class indices, where ``UNLABELED`` (-1) marks pixels to
    skip. Probabilities are floored at 1e-12 before the log.
    """
    t = np.asarray(targets)
    if probs.ndim != 4 or probs.shape[0] != 1:
        raise ShapeError(f"seg_ce_loss expects a (1, C, H, W) posterior, got {probs.shape}")
    _, c, h, w = probs.shape
    if t.shape != (h, w):
        raise ShapeError(f"seg_ce_loss: targets {t.shape} do not match field {(h, w)}")
    ii, jj = np.nonzero(t != UNLABELED)
    if len(ii) == 0:
        return _zero()
    cls = t[ii, jj].astype(np.intp)
    if cls.min() < 0 or cls.max() >= c:
        raise ShapeError(f"seg_ce_loss: class index outside 0..{c - 1}")
    flat = (cls * h + ii) * w + jj
    nll = ag.scale(ag.sum(ag.log(ag.take(probs, flat), LOG_FLOOR)), -1.0)
    return _reduce(nll, len(ii), reduction)


def labeled_loss(density: Tensor, target_density, probs: Sequence[Tensor], masks,
                 w: LossWeights = LossWeights(), reduction: str = "sum") -> Tensor:
    """Density MSE plus ``lambda1`` times the cross-entropy of every head."""
    masks = np.asarray(masks)
    if len(probs) != (len(masks) if masks.ndim == 3 else 0):
        raise ShapeError(f"{len(probs)} posteriors for {len(masks)} masks")
    loss = mse_loss(density, target_density, reduction)
    if w.lambda1 == 0 or not probs:
        return loss
    seg = _zero()
    for p, m in zip(probs, masks):
        seg = ag.add(seg, seg_ce_loss(p, m, reduction))
    return ag.add(loss, ag.scale(seg, w.lambda1))


def multiclass_labeled_loss(density: Tensor, target_density, class_probs: Tensor, classes,
                            w: LossWeights = LossWeights(), reduction: str = "sum") -> Tensor:
    """Density MSE plus ``lambda1`` times a single multi-class cross-entropy."""
    loss = mse_loss(density, target_density, reduction)
    if w.lambda1 == 0:
        return loss
    return ag.add(loss, ag.scale(seg_ce_loss(class_probs, classes, reduction), w.lambda1))


def unlabeled_loss(probs: Sequence[Tensor], labels: PseudoLabelSet, w: LossWeights = LossWeights(),
                   reduction: str = "sum") -> Tensor:
    """``lambda2`` times the cross-entropy of every head against its pseudo-labels."""
    if len(probs) != labels.num_heads:
        raise ShapeError(f"{len(probs)} posteriors for {labels.num_heads} pseudo-label sets")
    if w.lambda2 == 0:
        return _zero()
    total = _zero()
    for p, lab in zip(probs, labels.labels):
        total = ag.add(total, seg_ce_loss(p, lab, reduction))
    return ag.scale(total, w.lambda2)


def rank_loss(counts: Sequence[Tensor]) -> Tensor:
    """Hinge penalty whenever a contained crop's count exceeds its container's.

    ``counts[0]`` belongs to the innermost crop and ``counts[-1]`` to the
    outermost, so crop ``t`` lies inside crop ``s`` whenever ``t <= s``.
    """
    if len(counts) < 2:
        raise ConfigError("rank_loss needs at least two nested crops")
    total = _zero()
    for s in range(len(counts)):
        for t in range(s + 1):
            total = ag.add(total, ag.relu(ag.sub(counts[t], counts[s])))
    return total


def uda_loss(pred_aug: Tensor, pred) -> Tensor:
    """Squared distance from the augmented-view density to the clean-view one."""
    return mse_loss(pred_aug, _const(pred))


def mt_loss(student: Tensor, teacher) -> Tensor:
    """Squared distance from the student density to the (constant) teacher density."""
    return mse_loss(student, _const(teacher))


def ict_loss(pred_mixed: Tensor, pred_aug, pred, lam: float) -> Tensor:
    """Distance from the prediction on the mixed image to the mix of predictions."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"mix-up coefficient must lie in [0, 1], got {lam}")
    a, b = _const(pred_aug).data, _const(pred).data
    return mse_loss(pred_mixed, lam * a + (1.0 - lam) * b)
