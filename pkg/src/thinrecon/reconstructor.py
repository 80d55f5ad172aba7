"""Estimator facade over the optimization loop, scikit-learn style."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .dataprep import View
from .meshkit import hard_coverage, iou
from .optimize import TrainConfig, train
from .validation import check_views


class SilhouetteMeshReconstructor(BaseEstimator):
    """Reconstruct a triangle mesh from calibrated views and masks.

    fit(views) runs the silhouette-fitting optimization and exposes the result
    as ``mesh_`` (the triangle mesh), ``field_`` (the underlying grid field),
    and ``report_`` (per-iteration losses). predict(views) renders binary
    masks of the fitted mesh; score(views) is the mean IoU against the views'
    own masks.

    Parameters mirror the training configuration; see TrainConfig.
    """

    def __init__(self, grid_res: int = 64, train_res: int = 128,
                 iters: int = 1000, lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 lambda_lap: float = 0.5, lambda_sdf: float = 0.2,
                 batch_views: int = 4, gamma: float = 1.0,
                 offsets_enabled: bool = False, seed: int = 0):
        self.grid_res = grid_res
        self.train_res = train_res
        self.iters = iters
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lambda_lap = lambda_lap
        self.lambda_sdf = lambda_sdf
        self.batch_views = batch_views
        self.gamma = gamma
        self.offsets_enabled = offsets_enabled
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            grid_res=self.grid_res, train_res=self.train_res,
            iters=self.iters, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
            eps=self.eps, lambda_lap=self.lambda_lap,
            lambda_sdf=self.lambda_sdf, batch_views=self.batch_views,
            gamma=self.gamma, offsets_enabled=self.offsets_enabled,
            seed=self.seed).validate()

    def fit(self, views: list[View], y=None, callback=None):
        """Optimize the field against the views; returns self."""
        self.mesh_, self.field_, self.report_ = train(
            views, self._config(), callback=callback)
        self.n_views_ = len(views)
        return self

    def _require_fitted(self):
        if not hasattr(self, "mesh_"):
            raise NotFittedError(
                "this reconstructor has not been fitted; call fit first")

    def predict(self, views: list[View], res: int | None = None) -> np.ndarray:
        """Hard silhouette masks of the fitted mesh, (n_views, res, res) uint8."""
        self._require_fitted()
        views = check_views(views, minimum=1)
        out = []
        for v in views:
            r = res if res is not None else v.resolution[0]
            out.append(hard_coverage(self.mesh_, v.intrinsics, v.pose, r))
        return np.stack(out)

    def score(self, views: list[View], y=None) -> float:
        """Mean IoU between rendered and observed masks."""
        self._require_fitted()
        views = check_views(views, minimum=1)
        scores = []
        for v in views:
            rendered = hard_coverage(
                self.mesh_, v.intrinsics, v.pose, v.resolution[0])
            scores.append(iou(rendered, v.mask))
        return float(np.mean(scores))
