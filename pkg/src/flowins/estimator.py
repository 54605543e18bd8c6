"""scikit-learn style wrappers around the filter and the track alignment."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_dataset, check_paired, check_positions, check_positive, check_times
from .evaluation import _rigid_fit, procrustes_align, rmse
from .flow_fusion import GatingConfig
from .pipeline import AblationConfig, FilterSettings, run_filter


class FlowAidedINS(BaseEstimator):
    """Flow-aided inertial navigation as an estimator.

    ``fit`` runs the filter (and the smoother) over a dataset; ``predict``
    returns estimated positions at requested times.

    Parameters
    ----------
    use_gnss, use_dense_flow, use_sparse_flow, use_flow_uncertainty : bool
        Aiding sources, as in :class:`~flowins.pipeline.AblationConfig`.
    smooth : bool
        Predict from the smoothed track instead of the filtered one.
    max_points : int
        Flow points used per frame pair.
    min_parallax_sigmas : float
        Parallax gate in flow standard deviations.
    chi2_threshold : float or None
        Flow gate; ``None`` uses the 95% quantile.
    sparse_points : int
        Points kept per frame in sparse mode.
    init : {"known", "stationary"}
        Initial state from the dataset or from a standstill.
    """

    def __init__(self, use_gnss=True, use_dense_flow=True, use_sparse_flow=False,
                 use_flow_uncertainty=True, smooth=True, max_points=120,
                 min_parallax_sigmas=4.0, chi2_threshold=None, sparse_points=30, init="known"):
        self.use_gnss = use_gnss
        self.use_dense_flow = use_dense_flow
        self.use_sparse_flow = use_sparse_flow
        self.use_flow_uncertainty = use_flow_uncertainty
        self.smooth = smooth
        self.max_points = max_points
        self.min_parallax_sigmas = min_parallax_sigmas
        self.chi2_threshold = chi2_threshold
        self.sparse_points = sparse_points
        self.init = init

    def _settings(self):
        if int(self.max_points) < 1 or int(self.sparse_points) < 1:
            raise ValueError("max_points and sparse_points must be at least 1")
        gate = GatingConfig(chi2_threshold=self.chi2_threshold,
                            max_points_per_update=int(self.max_points),
                            min_parallax_sigmas=check_positive(self.min_parallax_sigmas,
                                                               "min_parallax_sigmas", True))
        return FilterSettings(gate=gate, sparse_points=int(self.sparse_points), init=self.init)

    def fit(self, X, y=None):
        """Filter dataset ``X`` (a Dataset or manifest path).  ``y`` is ignored."""
        data = check_dataset(X)
        self.config_ = AblationConfig(bool(self.use_gnss), bool(self.use_dense_flow),
                                      bool(self.use_sparse_flow), bool(self.use_flow_uncertainty))
        self.result_ = run_filter(data, self.config_, self._settings())
        self.filter_track_ = self.result_.track()
        self.smoother_track_ = self.result_.smooth().trajectory() if self.smooth else None
        self.track_ = self.smoother_track_ if self.smooth else self.filter_track_
        self.track_.label = self.config_.label
        return self

    def predict(self, X):
        """Positions (n, 3) at the times ``X``."""
        check_is_fitted(self, "track_")
        t = check_times(X, "X")
        return self.track_.at(t, attitude=False).positions

    def score(self, X, y=None):
        """Negative aligned RMSE against ``y`` (or the dataset truth)."""
        check_is_fitted(self, "track_")
        truth = y
        if truth is None:
            data = check_dataset(X)
            if data.truth is None:
                raise ValueError("no ground truth to score against")
            truth = data.truth.trajectory()
        aligned, _, _ = procrustes_align(self.track_, truth)
        return -rmse(aligned, truth)


class ProcrustesAligner(TransformerMixin, BaseEstimator):
    """Rigid (rotation and translation) alignment of point sequences.

    ``fit(X, y)`` finds ``R, t`` minimizing ``sum |R x + t - y|^2``;
    ``transform`` applies them.
    """

    def fit(self, X, y):
        X, y = check_paired(X, y)
        self.rotation_, self.translation_ = _rigid_fit(X, y)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "rotation_")
        X = check_positions(X)
        return X @ self.rotation_.T + self.translation_

    def inverse_transform(self, X):
        check_is_fitted(self, "rotation_")
        X = check_positions(X)
        return (X - self.translation_) @ self.rotation_

    def score(self, X, y):
        X, y = check_paired(X, y, min_rows=1)
        return -float(np.sqrt(np.mean(np.sum((self.transform(X) - y) ** 2, axis=1))))
