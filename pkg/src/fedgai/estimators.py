"""scikit-learn style wrappers: fit on (images, sketches), transform images into sketches."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .losses import LossWeights
from .metrics import proxy_fid
from .models import PerceptualEncoder
from .training import (
    ClientState,
    TrainConfig,
    distill_student,
    sketch_from_model,
    sketch_to_model,
    to_model_range,
    train_teacher_epoch,
)


def check_images(X, channels: int, name: str = "X") -> np.ndarray:
    """Validate an (N, C, H, W) float array in [0, 1]; (N, H, W) is accepted when C == 1."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3 and channels == 1:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != channels:
        raise ValueError(f"{name} must have shape (N, {channels}, H, W), got {X.shape}")
    if X.shape[2] % 8 or X.shape[3] % 8:
        raise ValueError(f"{name}: spatial size {X.shape[2]}x{X.shape[3]} must be divisible by 8")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


class SketchGAN(TransformerMixin, BaseEstimator):
    """Teacher image-to-sketch GAN for one designer.

    ``fit(images, sketches)`` trains the generator/discriminator pair;
    ``transform(images)`` returns sketches in ``[0, 1]`` with ink = 1.
    """

    def __init__(
        self,
        n_epochs=10,
        learning_rate=0.01,
        batch_size=8,
        momentum=0.0,
        gamma_gram=50.0,
        gamma_adv=1.0,
        gamma_clip=25.0,
        encoder_seed=0,
        random_state=0,
    ):
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.momentum = momentum
        self.gamma_gram = gamma_gram
        self.gamma_adv = gamma_adv
        self.gamma_clip = gamma_clip
        self.encoder_seed = encoder_seed
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            momentum=self.momentum,
            seed=self.random_state,
            loss_weights=LossWeights(self.gamma_gram, self.gamma_adv, self.gamma_clip),
        )

    def fit(self, X, y):
        X = check_images(X, 3)
        y = check_images(y, 1, name="y")
        if len(X) != len(y):
            raise ValueError(f"X and y have different lengths: {len(X)} vs {len(y)}")
        encoder = PerceptualEncoder(seed=self.encoder_seed)
        self.client_ = ClientState("estimator", X, y, encoder, seed=self.random_state)
        cfg = self._train_config()
        self.history_ = [train_teacher_epoch(self.client_, cfg) for _ in range(self.n_epochs)]
        self.resolution_ = X.shape[2]
        return self

    def _generate(self, X, student=False) -> np.ndarray:
        check_is_fitted(self, "client_")
        X = check_images(X, 3)
        return sketch_from_model(self.client_.generate_array(to_model_range(X), student=student))

    def transform(self, X):
        return self._generate(X)

    def score(self, X, y):
        """Negative proxy FID between generated and reference sketches (higher is better)."""
        y = check_images(y, 1, name="y")
        generated = sketch_to_model(self.transform(X))
        return -proxy_fid(self.client_.encoder, generated, sketch_to_model(y))


class SketchDistiller(SketchGAN):
    """Compresses a fitted :class:`SketchGAN` into a depthwise-separable student."""

    def __init__(self, teacher=None, n_epochs=5, learning_rate=0.01, batch_size=8, momentum=0.0, random_state=0):
        self.teacher = teacher
        self.n_epochs = n_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.momentum = momentum
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.teacher is None:
            raise ValueError("SketchDistiller needs a fitted SketchGAN as teacher")
        check_is_fitted(self.teacher, "client_")
        self.client_ = self.teacher.client_
        cfg = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, momentum=self.momentum, seed=self.random_state
        )
        self.history_ = distill_student(self.client_, cfg, epochs=self.n_epochs)
        self.resolution_ = self.teacher.resolution_
        return self

    def transform(self, X):
        return self._generate(X, student=True)
