"""scikit-learn style wrappers around pretraining and probing."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .imaging import GridSpec, check_image, resize
from .models import AutoregressorConfig, EncoderConfig, ModelConfig
from .tensor import no_grad
from .training import (
    PretrainConfig,
    image_features,
    init_models,
    pretrain,
    predict_head,
    restore_models,
    train_head,
)


def check_images(X, min_count: int = 1) -> list[np.ndarray]:
    """Accept an N×H×W×3 array or a sequence of H×W×3 arrays with values in [0, 1]."""
    if isinstance(X, np.ndarray):
        if X.ndim != 4:
            raise ValueError(f"expected an N×H×W×3 image array, got shape {X.shape}")
        items = list(X)
    else:
        items = list(X)
    if len(items) < min_count:
        raise ValueError(f"need at least {min_count} image(s), got {len(items)}")
    return [check_image(img, f"X[{i}]") for i, img in enumerate(items)]


class ShapeBiasedCPC(TransformerMixin, BaseEstimator):
    """Contrastive patch pretraining; ``transform`` returns mean patch vectors.

    ``fit`` ignores ``y``. With ``pretrained=False`` the encoder keeps its
    random initialization, which is the usual probe baseline.
    """

    def __init__(
        self,
        image_side=64,
        patch_side=16,
        stride=8,
        channels=(16, 32, 64),
        padding_mode="direct",
        layers=2,
        heads=4,
        k=3,
        n_textures=5,
        omega0=1.0,
        omega_texture=0.5,
        tau=0.5,
        lr=0.01,
        clip_norm=5.0,
        epochs=30,
        seed=0,
        pretrained=True,
    ):
        self.image_side = image_side
        self.patch_side = patch_side
        self.stride = stride
        self.channels = channels
        self.padding_mode = padding_mode
        self.layers = layers
        self.heads = heads
        self.k = k
        self.n_textures = n_textures
        self.omega0 = omega0
        self.omega_texture = omega_texture
        self.tau = tau
        self.lr = lr
        self.clip_norm = clip_norm
        self.epochs = epochs
        self.seed = seed
        self.pretrained = pretrained

    def _config(self) -> PretrainConfig:
        model = ModelConfig(
            GridSpec(self.image_side, self.patch_side, self.stride),
            EncoderConfig(tuple(self.channels), padding_mode=self.padding_mode),
            AutoregressorConfig(layers=self.layers, heads=self.heads),
        )
        return PretrainConfig(
            model=model,
            k=self.k,
            n_textures=self.n_textures,
            omega0=self.omega0,
            omega_texture=self.omega_texture,
            tau=self.tau,
            lr=self.lr,
            clip_norm=self.clip_norm,
            epochs=self.epochs,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        images = check_images(X)
        cfg = self._config()
        if self.pretrained:
            self.history_ = []
            self.checkpoint_ = pretrain(images, cfg, history=self.history_)
            _, self.encoder_, _ = restore_models(self.checkpoint_)
        else:
            self.history_ = []
            self.checkpoint_ = None
            self.encoder_, _ = init_models(cfg.model, cfg.seed)
        self.grid_ = cfg.model.grid
        self.n_features_out_ = self.encoder_.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        images = [resize(img, self.grid_.image_side) for img in check_images(X)]
        with no_grad():
            return image_features(self.encoder_, images, self.grid_).data.astype(np.float64)


class PatchProbeClassifier(ClassifierMixin, BaseEstimator):
    """Linear softmax head on frozen features from a fitted :class:`ShapeBiasedCPC`."""

    def __init__(self, featurizer=None, lr=0.1, epochs=300, weight_decay=1e-3, seed=0):
        self.featurizer = featurizer
        self.lr = lr
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.seed = seed

    def _features(self, X):
        return self.featurizer_.transform(X)

    def fit(self, X, y):
        images = check_images(X)
        y = np.asarray(y)
        if y.shape != (len(images),):
            raise ValueError(f"y must have one label per image; got {y.shape} for {len(images)} images")
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if self.featurizer is None:
            self.featurizer_ = ShapeBiasedCPC(pretrained=False, seed=self.seed).fit(images)
        else:
            check_is_fitted(self.featurizer, "encoder_")
            self.featurizer_ = self.featurizer
        feats = self._features(images)
        self.head_ = train_head(
            feats, self.label_encoder_.transform(y), len(self.classes_),
            lr=self.lr, epochs=self.epochs, weight_decay=self.weight_decay, seed=self.seed,
        )
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        return predict_head(self.head_, self._features(check_images(X))).astype(np.float64)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
