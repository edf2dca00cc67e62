"""Scikit-learn style facade over the structure grid.

`RobustStructureClassifier` wraps preset selection, model construction,
(optionally adversarial) training, and prediction behind the standard
fit/predict/predict_proba interface, so the models drop into sklearn
pipelines, grid search, and cross-validation.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .attacks import AttackSpec
from .structures import build_model, predict_logits, structure_from_preset, validate_structure
from .training import TrainConfig, Trainer
from .util import derive_seed
from .validation import as_image_batch, check_labels, encode_labels


class RobustStructureClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier over the composable structure grid.

    Parameters mirror the preset table: pick a preset id and family, override
    the geometry, and choose natural or adversarial training by setting
    ``adversarial_epsilon`` to 0 or a positive perturbation budget.

    Attributes set by :meth:`fit`: ``classes_``, ``model_``, ``history_``,
    ``n_features_in_``.
    """

    def __init__(self, preset="(b)", family="vit", image=None, patch=4,
                 embed_dim=64, heads=4, mlp_ratio=4.0, stage_layers=None,
                 optimizer="adam", lr=1e-3, momentum=0.9, epochs=1,
                 batch_size=32, adversarial_epsilon=0.0, attack_steps=10,
                 attack_step_size=0.01, normalize=False, seed=0):
        self.preset = preset
        self.family = family
        self.image = image
        self.patch = patch
        self.embed_dim = embed_dim
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.stage_layers = stage_layers
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.adversarial_epsilon = adversarial_epsilon
        self.attack_steps = attack_steps
        self.attack_step_size = attack_step_size
        self.normalize = normalize
        self.seed = seed

    def _resolve_image(self, X) -> tuple[int, int, int]:
        if self.image is not None:
            return tuple(self.image)
        X = np.asarray(X)
        if X.ndim == 4:
            return tuple(X.shape[1:])
        raise ValueError(
            "image=(C, H, W) must be given when X is a flat feature matrix")

    def fit(self, X, y):
        image = self._resolve_image(X)
        X = as_image_batch(X, image)
        y = check_labels(y, X.shape[0])
        self.classes_, indices = encode_labels(y)
        self.n_features_in_ = int(np.prod(image))

        overrides = dict(image=image, patch=self.patch, embed_dim=self.embed_dim,
                         heads=self.heads, mlp_ratio=self.mlp_ratio,
                         classes=int(self.classes_.shape[0]))
        if self.stage_layers is not None:
            overrides["stage_layers"] = tuple(self.stage_layers)
        spec = structure_from_preset(self.preset, self.family, **overrides)
        validate_structure(spec)
        model = build_model(spec, seed=derive_seed(self.seed, "model"))
        if self.normalize:
            mean = X.mean(axis=(0, 2, 3))
            std = np.maximum(X.std(axis=(0, 2, 3)), 1e-8)
            model.set_normalization(mean, std)

        attack = None
        if self.adversarial_epsilon > 0:
            attack = AttackSpec(epsilon=self.adversarial_epsilon,
                                steps=self.attack_steps,
                                step_size=self.attack_step_size,
                                restarts=1, init="clean")
        config = TrainConfig(optimizer=self.optimizer, lr=self.lr,
                             momentum=self.momentum, epochs=self.epochs,
                             batch_size=self.batch_size,
                             seed=derive_seed(self.seed, "train"),
                             adversarial=attack)
        trainer = Trainer(model, config)
        result = trainer.fit(X, indices)
        if result.aborted:
            raise RuntimeError(f"training aborted: {result.reason}")
        self.model_ = model
        self.structure_ = spec
        self.history_ = result.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this estimator is not fitted yet; call fit first")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        X = as_image_batch(X, self.structure_.image)
        return predict_logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        indices = self.decision_function(X).argmax(axis=1)
        return self.classes_[indices]
