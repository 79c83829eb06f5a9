"""scikit-learn style wrappers around the training and preprocessing code."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autograd import Tensor, no_grad
from .nn import predict_density
from .scenes import DatasetSplit, Scene, render_density
from .surrogate import DEFAULT_RATIOS, derive_mask_set, derive_thresholds
from .training import TrainConfig, train
from .validation import check_dots, check_images, counts_from


class CrowdCounter(RegressorMixin, BaseEstimator):
    """Density-regression counter trained with any of the supported methods.

    ``fit(X, y, X_unlabeled=None)`` takes images ``(n, H, W)`` and their dot
    annotations; ``predict`` returns counts. ``score`` is the negative mean
    absolute count error, so larger is better.
    """

    def __init__(self, method: str = "irast", epochs: int = 60, steps_per_epoch: int = 100, lr: float = 1e-3,
                 lr_period: int = 20, t_p: float = 0.9, ratios: Sequence[float] = DEFAULT_RATIOS,
                 lambda1: float = 1.0, lambda2: float = 1.0, sigma: float = 1.5, val_fraction: float = 0.25,
                 seed: int = 0):
        self.method = method
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.lr = lr
        self.lr_period = lr_period
        self.t_p = t_p
        self.ratios = ratios
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.sigma = sigma
        self.val_fraction = val_fraction
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(method=self.method, epochs=self.epochs, steps_per_epoch=self.steps_per_epoch,
                           lr=self.lr, lr_period=self.lr_period, t_p=self.t_p, ratios=tuple(self.ratios),
                           lambda1=self.lambda1, lambda2=self.lambda2, sigma=self.sigma,
                           val_fraction=self.val_fraction, seed=self.seed, track_pseudo_quality=False)

    def fit(self, X, y, X_unlabeled=None):
        cfg = self._config()
        images = check_images(X)
        dots = check_dots(y, len(images))
        labeled = [Scene(im, d) for im, d in zip(images, dots)]
        unlabeled = []
        if X_unlabeled is not None:
            unlabeled = [Scene(im, np.zeros((0, 2))) for im in check_images(X_unlabeled)]
        result = train(cfg, DatasetSplit(labeled, unlabeled, []))
        self.model_ = result.best_model
        self.ladder_ = result.ladder
        self.history_ = result.history
        self.downsample_factor_ = self.model_.config.downsample_factor
        return self

    def predict_density(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, self.downsample_factor_)
        with no_grad():
            return predict_density(self.model_, Tensor(images[:, None])).data[:, 0]

    def predict(self, X) -> np.ndarray:
        return self.predict_density(X).sum(axis=(1, 2))

    def score(self, X, y, sample_weight=None) -> float:
        err = np.abs(self.predict(X) - counts_from(y))
        return -float(np.average(err, weights=sample_weight))


class DensityRenderer(TransformerMixin, BaseEstimator):
    """Dot annotations to label-resolution density maps."""

    def __init__(self, shape: tuple = (32, 32), sigma: float = 1.5, factor: int = 4):
        self.shape = shape
        self.sigma = sigma
        self.factor = factor

    def fit(self, X=None, y=None):
        self.n_features_out_ = (self.shape[0] // self.factor) * (self.shape[1] // self.factor)
        return self

    def transform(self, X) -> np.ndarray:
        dots = check_dots(X, len(X))
        blank = np.zeros(tuple(self.shape))
        return np.stack([render_density(Scene(blank, d), self.sigma, self.factor) for d in dots])


class SurrogateMasker(TransformerMixin, BaseEstimator):
    """Learns a threshold ladder from density maps and emits nested binary masks."""

    def __init__(self, ratios: Sequence[float] = DEFAULT_RATIOS):
        self.ratios = ratios

    def fit(self, X, y=None):
        self.ladder_ = derive_thresholds(list(np.asarray(X, dtype=np.float64)), tuple(self.ratios))
        self.thresholds_ = np.asarray(self.ladder_.thresholds)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "ladder_")
        return np.stack([derive_mask_set(d, self.ladder_) for d in np.asarray(X, dtype=np.float64)])
