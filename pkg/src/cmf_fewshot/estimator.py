"""scikit-learn style wrappers.

``FewShotClassifier.fit`` adapts a trained model to a labelled support set
(the "training data" of one task); ``predict`` classifies targets. No
weights change during ``fit``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted

from .adaptation import build_classifier, predict
from .analysis import pca_fit
from .backbone import backbone_forward


def _images(X, model) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    c, s = model.config.backbone.in_channels, model.config.backbone.image_size
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1:] != (c, s, s):
        raise ValueError(f"expected images of shape [N, {c}, {s}, {s}] (or [N, {s}, {s}]), got {X.shape}")
    return X


class FewShotClassifier(ClassifierMixin, BaseEstimator):
    """Adapt to a support set on ``fit``; classify with the generated head.

    ``model`` is a trained full model or a stripped deploy model.
    ``prior_images`` optionally fixes the FiLM support (the almost-zero-shot
    setting); a deploy model always uses its stored adaptation.
    """

    def __init__(self, model=None, prior_images=None):
        self.model = model
        self.prior_images = prior_images

    def fit(self, X, y):
        if self.model is None:
            raise ValueError("FewShotClassifier needs a trained model")
        X = _images(X, self.model)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = unique_labels(y)
        idx = np.searchsorted(self.classes_, y)
        stored = getattr(self.model, "stored", None)
        if stored is not None:
            self.film_ = stored.film
        else:
            self.film_ = self.model.film_for(X if self.prior_images is None else _images(self.prior_images, self.model))
        emb = backbone_forward(X, self.model.backbone, self.film_)
        self.head_ = build_classifier(emb, idx, self.model.part("head"), way=len(self.classes_), classes=self.classes_)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        return predict(_images(X, self.model), self.model.backbone, self.film_, self.head_)

    def predict(self, X):
        check_is_fitted(self, "head_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class PCAProjector(TransformerMixin, BaseEstimator):
    """Principal-component projection with deterministic component signs."""

    def __init__(self, n_components: int = 2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        self.fit_ = pca_fit(X, self.n_components)
        self.components_ = self.fit_.components
        self.explained_variance_ = self.fit_.variances
        self.mean_ = self.fit_.mean
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.transform(check_array(X, dtype=np.float64))
