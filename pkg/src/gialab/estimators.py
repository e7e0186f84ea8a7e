"""scikit-learn style wrapper around the client-side detectors.

The auditor is fitted on a client's local data together with the model it
last trusted; it then scores (``transform``) or flags (``predict``)
incoming models.  Models play the role of samples here, the local data is
fixed at fit time.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, check_X_y

from .detection import (
    MIN_SAMPLES,
    ThresholdConfig,
    detect_handcrafted,
    grad_divergence,
    loss_divergence,
    preset,
    same_parameters,
)
from .exceptions import DomainError, ShapeError
from .nn import LabeledDataset, ModelParams, per_sample_grad_norms, per_sample_losses

FEATURE_NAMES = (
    "min_D", "min_H", "min_R", "max_B",
    "r_lmax", "r_spikes", "r_p95", "r_cv",
    "r_norm", "r_var", "collapse",
)


def validate_models(models, reference: ModelParams | None = None) -> list[ModelParams]:
    """Accept one model or a sequence of models; optionally require the
    architecture of ``reference``."""
    if isinstance(models, ModelParams):
        models = [models]
    models = list(models)
    if not models:
        raise DomainError("no models given")
    for m in models:
        if not isinstance(m, ModelParams):
            raise TypeError(f"expected ModelParams, got {type(m).__name__}")
        if reference is not None and m.shapes() != reference.shapes():
            raise ShapeError("model architecture differs from the trusted reference")
    return models


def validate_local_data(X, y, n_classes: int, n_features: int) -> LabeledDataset:
    X, y = check_X_y(X, y, dtype=np.float64, ensure_min_samples=MIN_SAMPLES)
    if X.shape[1] != n_features:
        raise ShapeError(f"expected {n_features} features, got {X.shape[1]}")
    if not np.all(np.equal(np.mod(y, 1), 0)):
        raise DomainError("labels must be integers")
    return LabeledDataset(X, y.astype(np.int64), n_classes)


class ModelAuditor(BaseEstimator):
    """Client-side audit of received models.

    Parameters
    ----------
    reference : ModelParams
        The last model this client trusted.
    preset : {"conservative", "standard", "aggressive"}
        Threshold family, ignored when ``thresholds`` is given.
    thresholds : ThresholdConfig or dict, optional
        Explicit thresholds.
    """

    def __init__(self, reference=None, preset="standard", thresholds=None):
        self.reference = reference
        self.preset = preset
        self.thresholds = thresholds

    def _config(self) -> ThresholdConfig:
        if self.thresholds is None:
            return preset(self.preset)
        if isinstance(self.thresholds, ThresholdConfig):
            return self.thresholds
        return ThresholdConfig.from_dict(dict(self.thresholds))

    def fit(self, X, y):
        if not isinstance(self.reference, ModelParams):
            raise TypeError("reference must be a ModelParams")
        self.data_ = validate_local_data(X, y, self.reference.n_classes, self.reference.n_in)
        self.config_ = self._config()
        self.reference_losses_ = per_sample_losses(self.reference, self.data_)
        self.reference_norms_ = per_sample_grad_norms(self.reference, self.data_)
        self.n_features_in_ = self.data_.dim
        return self

    def _score(self, model: ModelParams):
        cfg = self.config_
        static, s_flag = detect_handcrafted(model, cfg)
        identical = same_parameters(model, self.reference)
        if identical:
            losses, norms = self.reference_losses_, self.reference_norms_
        else:
            losses = per_sample_losses(model, self.data_)
            norms = per_sample_grad_norms(model, self.data_)
        ld, l_flag = loss_divergence(losses, self.reference_losses_, cfg)
        gd, g_flag = grad_divergence(norms, self.reference_norms_, cfg)
        if identical:
            l_flag = g_flag = False

        def lowest(attr):
            vals = [getattr(s, attr) for s in static if getattr(s, attr) is not None]
            return min(vals) if vals else np.nan

        row = [
            lowest("D"), lowest("H"), lowest("R"),
            max((s.B for s in static if s.B is not None), default=np.nan),
            ld.r_lmax, ld.r_spikes, ld.r_p95, ld.r_cv,
            gd.r_norm, gd.r_var, float(gd.B[2]),
        ]
        return row, (s_flag, l_flag, g_flag)

    def transform(self, models) -> np.ndarray:
        """One row of sub-scores per model, columns as in ``FEATURE_NAMES``."""
        check_is_fitted(self, "data_")
        models = validate_models(models, self.reference)
        return np.array([self._score(m)[0] for m in models], dtype=np.float64)

    def flags(self, models) -> np.ndarray:
        """(n_models, 3) boolean matrix: static, loss, gradient."""
        check_is_fitted(self, "data_")
        models = validate_models(models, self.reference)
        return np.array([self._score(m)[1] for m in models], dtype=bool)

    def predict(self, models) -> np.ndarray:
        """True where the client should abort."""
        return self.flags(models).any(axis=1)

    def get_feature_names_out(self, input_features: Sequence[str] | None = None):
        return np.array(FEATURE_NAMES, dtype=object)
