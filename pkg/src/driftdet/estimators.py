"""Scikit-learn-style estimator facade over the training engine.

`SourceDetector` is a plain supervised detector; `AdaptiveDetector` runs the
full teacher-student adaptation on (labeled source, unlabeled target). Both
expose fit/predict/score and clone cleanly via get_params/set_params.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .augment import StrongAugConfig, WeakAugConfig
from .data import AnnotatedImage, Dataset, Detection
from .errors import ConfigError, DataError
from .evaluation import evaluate_detector
from .model import ArchConfig
from .training import TrainConfig, Trainer, pretrain


def _as_dataset(X, domain: int, name: str) -> Dataset:
    if isinstance(X, Dataset):
        return X
    items = []
    for i, entry in enumerate(X):
        if isinstance(entry, AnnotatedImage):
            items.append(entry)
            continue
        pixels = np.asarray(entry, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DataError(
                f"image {i}: expected an HxWx3 array, got shape {pixels.shape}")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise DataError(f"image {i}: pixel values outside [0, 1]")
        items.append(AnnotatedImage(pixels=pixels, annotations=[], domain=domain))
    if items:  # a homogeneous AnnotatedImage list keeps its own domain tag
        domain = items[0].domain
    return Dataset(items=items, split="train", domain=domain, name=name)


class SourceDetector(BaseEstimator):
    """Supervised two-stage detector with a fit/predict interface.

    fit(X) expects a Dataset or a list of AnnotatedImage with annotations;
    predict(X) returns a list of Detection lists, one per image.
    """

    def __init__(self, arch: ArchConfig = ArchConfig(),
                 train: TrainConfig = TrainConfig(),
                 weak_aug: WeakAugConfig = WeakAugConfig(),
                 iterations: int | None = None,
                 score_threshold: float = 0.5, nms_iou: float = 0.5):
        self.arch = arch
        self.train = train
        self.weak_aug = weak_aug
        self.iterations = iterations
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou

    def fit(self, X, y=None):
        import dataclasses

        dataset = _as_dataset(X, domain=0, name="fit")
        if not any(img.annotations for img in dataset.items):
            raise DataError("supervised fit needs annotated images")
        cfg = self.train
        if self.iterations is not None:
            cfg = dataclasses.replace(cfg, burn_in_iterations=self.iterations)
        self.model_, self.metrics_ = pretrain(self.arch, cfg, dataset,
                                              self.weak_aug)
        return self

    def predict(self, X) -> list[list[Detection]]:
        self._check_fitted()
        dataset = _as_dataset(X, domain=0, name="predict")
        return [self.model_.detect(img.pixels, self.score_threshold,
                                   self.nms_iou)
                for img in dataset.items]

    def score(self, X, y=None) -> float:
        """Mean average precision on an annotated dataset."""
        self._check_fitted()
        dataset = _as_dataset(X, domain=0, name="score")
        return evaluate_detector(self.model_, dataset).mean_ap

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("estimator is not fitted; call fit first")


class AdaptiveDetector(BaseEstimator):
    """Teacher-student domain adaptation behind a fit/predict interface.

    fit(X, X_target) burns in on labeled X, then adapts on unlabeled
    X_target. Prediction uses the teacher (the student when mutual learning
    is disabled).
    """

    def __init__(self, arch: ArchConfig = ArchConfig(),
                 train: TrainConfig = TrainConfig(),
                 weak_aug: WeakAugConfig = WeakAugConfig(),
                 strong_aug: StrongAugConfig = StrongAugConfig(),
                 score_threshold: float = 0.5, nms_iou: float = 0.5):
        self.arch = arch
        self.train = train
        self.weak_aug = weak_aug
        self.strong_aug = strong_aug
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou

    def fit(self, X, X_target=None):
        if X_target is None:
            raise ConfigError("adaptation needs an unlabeled target dataset")
        source = _as_dataset(X, domain=0, name="fit_source")
        target = _as_dataset(X_target, domain=1, name="fit_target")
        base, self.burn_in_metrics_ = pretrain(self.arch, self.train, source,
                                               self.weak_aug)
        trainer = Trainer(base, self.train, source, target, self.weak_aug,
                          self.strong_aug)
        state = trainer.adapt()
        self.teacher_ = state.teacher
        self.student_ = state.student
        self.metrics_ = state.metrics
        return self

    @property
    def model_(self):
        if not hasattr(self, "teacher_"):
            raise ConfigError("estimator is not fitted; call fit first")
        return self.student_ if self.train.disable_mutual else self.teacher_

    def predict(self, X) -> list[list[Detection]]:
        model = self.model_
        dataset = _as_dataset(X, domain=1, name="predict")
        return [model.detect(img.pixels, self.score_threshold, self.nms_iou)
                for img in dataset.items]

    def score(self, X, y=None) -> float:
        dataset = _as_dataset(X, domain=1, name="score")
        return evaluate_detector(self.model_, dataset).mean_ap
