"""Threshold ladders and the binary / multi-class segmentation targets they induce."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

DEFAULT_RATIOS = (0.0, 0.5, 0.7)
# incremental sequence used when varying the number of surrogate tasks
TASK_SEQUENCE = (0.0, 0.5, 0.7, 0.8, 0.9)


@dataclass(frozen=True)
class ThresholdLadder:
    ratios: tuple
    thresholds: tuple
    n_nonzero: int

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "thresholds", tuple(float(e) for e in self.thresholds))
        if len(self.ratios) != len(self.thresholds) or not self.ratios:
            raise ConfigError("ladder needs matching, nonempty ratios and thresholds")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError(f"thresholds not strictly increasing: {self.thresholds}")

    def __len__(self) -> int:
        return len(self.thresholds)

    def to_dict(self) -> dict:
        return {"ratios": list(self.ratios), "thresholds": list(self.thresholds), "N": self.n_nonzero}

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdLadder":
        return cls(tuple(d["ratios"]), tuple(d["thresholds"]), int(d["N"]))


def _check_ratios(ratios: Sequence[float]) -> tuple:
    ratios = tuple(float(r) for r in ratios)
    if not ratios:
        raise ConfigError("at least one ratio is required")
    if any(not 0.0 <= r < 1.0 for r in ratios):
        raise ConfigError(f"ratios must lie in [0, 1): {ratios}")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise ConfigError(f"ratios must be strictly increasing: {ratios}")
    return ratios


def rank_index(ratio: float, n: int) -> int:
    """1-based rank picked for a positive ratio: max(1, ceil(ratio * n)).

    The product is taken on the ratio's shortest decimal form so that, e.g.,
    0.7 * 10 is exactly 7 rather than 7.000000000000001.
    """
    return max(1, math.ceil(Fraction(repr(float(ratio))) * n))


def derive_thresholds(density_maps: Iterable[np.ndarray], ratios: Sequence[float] = DEFAULT_RATIOS
                      ) -> ThresholdLadder:
    """Quantile ladder over every strictly positive labeled density value.

    A ratio of 0 gives threshold 0. When ties make two thresholds equal, the
    later one moves up to the next distinct sorted value.
    """
    ratios = _check_ratios(ratios)
    pool = np.concatenate([np.asarray(d, dtype=np.float64).ravel() for d in density_maps])
    values = np.sort(pool[pool > 0])
    n = len(values)
    if n == 0:
        raise DataError("labeled density maps contain no nonzero values")
    thresholds = []
    for r in ratios:
        eps = 0.0 if r == 0 else float(values[rank_index(r, n) - 1])
        if thresholds and eps <= thresholds[-1]:
            above = values[values > thresholds[-1]]
            if not len(above):
                raise DataError(f"cannot build a strictly increasing ladder for ratios {ratios}")
            eps = float(above[0])
        thresholds.append(eps)
    return ThresholdLadder(ratios, tuple(thresholds), n)


def derive_mask(density: np.ndarray, eps: float) -> np.ndarray:
    """1 where density strictly exceeds ``eps``."""
    if eps < 0:
        raise ConfigError("threshold must be >= 0")
    return (np.asarray(density) > eps).astype(np.uint8)


def derive_mask_set(density: np.ndarray, ladder: ThresholdLadder) -> np.ndarray:
    """Stack of masks, shape ``(c, H, W)``, one per ladder threshold."""
    return np.stack([derive_mask(density, e) for e in ladder.thresholds])


def quantize_msst(density: np.ndarray, ladder: ThresholdLadder) -> np.ndarray:
    """Class index = number of thresholds strictly below the density value."""
    d = np.asarray(density)[..., None]
    return (d > np.asarray(ladder.thresholds)).sum(axis=-1).astype(np.int64)


def ladder_for_tasks(density_maps, num_tasks: int) -> ThresholdLadder:
    if not 1 <= num_tasks <= len(TASK_SEQUENCE):
        raise ConfigError(f"num_tasks must be in 1..{len(TASK_SEQUENCE)}")
    return derive_thresholds(density_maps, TASK_SEQUENCE[:num_tasks])
