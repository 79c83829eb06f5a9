"""Pseudo-label generation for the stacked binary segmentation heads.

Heads are ordered by ascending threshold. A pixel is labelled foreground at
head ``k`` only if every lower-threshold head is also confident it is
foreground, and background at ``k`` only if every higher-threshold head is
confident it is background. Confident but mutually inconsistent predictions
are therefore dropped rather than used as targets.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .surrogate import ThresholdLadder, derive_mask_set, quantize_msst

UNLABELED = -1


def _check_tp(t_p: float) -> float:
    t_p = float(t_p)
    if not 0.5 < t_p < 1.0:
        raise ConfigError(f"t_p must lie in (0.5, 1), got {t_p}")
    return t_p


def _fields(probs) -> np.ndarray:
    p = np.asarray(getattr(probs, "fields", probs), dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    if p.ndim != 3:
        raise ShapeError(f"probability fields must be (c, H, W), got {p.shape}")
    return p


@dataclass
class ProbFieldSet:
    """Foreground posteriors ``P(M_k = 1)``, shape ``(c, H, W)``, ascending thresholds."""

    fields: np.ndarray
    ladder: Optional[ThresholdLadder] = None

    def __post_init__(self):
        self.fields = _fields(self.fields)
        if np.any(self.fields < 0) or np.any(self.fields > 1):
            raise ShapeError("probabilities must lie in [0, 1]")
        if self.ladder is not None and len(self.ladder) != len(self.fields):
            raise ShapeError(f"{len(self.fields)} fields for a ladder of {len(self.ladder)}")


@dataclass
class PseudoLabelSet:
    """Labels per head: ``labels[k, i, j]`` is 0, 1 or ``UNLABELED``."""

    labels: np.ndarray

    @property
    def num_heads(self) -> int:
        return self.labels.shape[0]

    def members(self, k: int) -> list:
        """The set S_k as a sorted list of ``(i, j, s)``."""
        ii, jj = np.nonzero(self.labels[k] != UNLABELED)
        return [(int(i), int(j), int(self.labels[k, i, j])) for i, j in zip(ii, jj)]

    def count(self) -> int:
        return int((self.labels != UNLABELED).sum())

    def is_subset_of(self, other: "PseudoLabelSet") -> bool:
        mine = self.labels != UNLABELED
        return bool(np.all(other.labels[mine] == self.labels[mine]))


def generate_pseudo_labels(probs, t_p: float = 0.9) -> PseudoLabelSet:
    """Inter-relationship-aware labels (all comparisons strict)."""
    t_p = _check_tp(t_p)
    p = _fields(probs)
    pos = np.logical_and.accumulate(p > t_p, axis=0)
    neg = np.logical_and.accumulate(((1.0 - p) > t_p)[::-1], axis=0)[::-1]
    labels = np.full(p.shape, UNLABELED, dtype=np.int8)
    labels[neg] = 0
    labels[pos] = 1
    return PseudoLabelSet(labels)


def naive_pseudo_labels(probs, t_p: float = 0.9) -> PseudoLabelSet:
    """Plain confidence thresholding per head, no cross-head conditions."""
    t_p = _check_tp(t_p)
    p = _fields(probs)
    labels = np.full(p.shape, UNLABELED, dtype=np.int8)
    labels[(1.0 - p) > t_p] = 0
    labels[p > t_p] = 1
    return PseudoLabelSet(labels)


def msst_pseudo_classes(class_probs: np.ndarray, t_p: float = 0.9) -> np.ndarray:
    """Arg-max class where its softmax confidence exceeds ``t_p``, else ``UNLABELED``.

    ``class_probs`` has shape ``(c+1, H, W)``.
    """
    t_p = _check_tp(t_p)
    q = np.asarray(class_probs, dtype=np.float64)
    best = q.argmax(axis=0)
    conf = np.take_along_axis(q, best[None], axis=0)[0]
    return np.where(conf > t_p, best, UNLABELED).astype(np.int64)


def classes_to_labels(classes: np.ndarray, num_heads: int) -> PseudoLabelSet:
    """Expand class indices to per-head binary labels: head k is 1 iff class >= k."""
    classes = np.asarray(classes)
    k = np.arange(1, num_heads + 1)[:, None, None]
    labels = np.where(classes[None] >= k, 1, 0).astype(np.int8)
    labels[:, classes == UNLABELED] = UNLABELED
    return PseudoLabelSet(labels)


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "logit-gaussian"
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("logit-gaussian", "flip"):
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        if self.magnitude < 0 or (self.kind == "flip" and self.magnitude > 1):
            raise ConfigError(f"invalid noise magnitude {self.magnitude} for {self.kind}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "NoiseModel":
        """``"logit-gaussian:2.0"`` or ``"flip:0.1"``; a bare number means logit-gaussian."""
        kind, _, mag = text.rpartition(":")
        try:
            return cls(kind or "logit-gaussian", float(mag), seed)
        except ValueError:
            raise ConfigError(f"cannot parse noise model {text!r}") from None


CLEAN_MARGIN = 0.02


def _logit(p):
    return np.log(p) - np.log1p(-p)


def simulate_prob_fields(density: np.ndarray, ladder: ThresholdLadder, noise: NoiseModel) -> ProbFieldSet:
    """Posteriors a predictor might emit: true masks squashed to
    (0.02, 0.98), then perturbed in logit space or flipped."""
    masks = derive_mask_set(density, ladder)
    clean = np.where(masks == 1, 1.0 - CLEAN_MARGIN, CLEAN_MARGIN)
    if noise.magnitude == 0:
        return ProbFieldSet(clean, ladder)
    rng = np.random.default_rng([noise.seed, 0])
    if noise.kind == "flip":
        flip = rng.random(clean.shape) < noise.magnitude
        return ProbFieldSet(np.where(flip, 1.0 - clean, clean), ladder)
    z = _logit(clean) + noise.magnitude * rng.standard_normal(clean.shape)
    return ProbFieldSet(1.0 / (1.0 + np.exp(-z)), ladder)


def simulate_class_probs(density: np.ndarray, ladder: ThresholdLadder, noise: NoiseModel) -> np.ndarray:
    """Multi-class counterpart: ``(c+1, H, W)`` softmax posteriors over quantization bins."""
    c = len(ladder)
    classes = quantize_msst(density, ladder)
    onehot = (np.arange(c + 1)[:, None, None] == classes[None])
    clean = np.where(onehot, 1.0 - CLEAN_MARGIN, CLEAN_MARGIN / c)
    if noise.magnitude == 0:
        return clean
    rng = np.random.default_rng([noise.seed, 1])
    if noise.kind == "flip":
        flip = rng.random(classes.shape) < noise.magnitude
        other = (classes + rng.integers(1, c + 1, size=classes.shape)) % (c + 1)
        moved = np.where(flip, other, classes)
        return np.where(np.arange(c + 1)[:, None, None] == moved[None], 1.0 - CLEAN_MARGIN, CLEAN_MARGIN / c)
    z = np.log(clean) + noise.magnitude * rng.standard_normal(clean.shape)
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def pseudo_label_quality(labels: PseudoLabelSet, truth: np.ndarray) -> dict:
    """Precision and coverage overall and per head.

    Precision is 1.0 when nothing is emitted.
    """
    truth = np.asarray(truth)
    lab = labels.labels
    if truth.shape != lab.shape:
        raise ShapeError(f"labels {lab.shape} vs truth {truth.shape}")
    emitted = lab != UNLABELED
    correct = emitted & (lab == truth)

    def ratio(num, den):
        return float(num) / float(den) if den else 1.0

    per_k = [{"precision": ratio(correct[k].sum(), emitted[k].sum()),
              "coverage": float(emitted[k].mean()),
              "emitted": int(emitted[k].sum())} for k in range(lab.shape[0])]
    return {"precision": ratio(correct.sum(), emitted.sum()),
            "coverage": float(emitted.mean()),
            "emitted": int(emitted.sum()),
            "per_head": per_k}
