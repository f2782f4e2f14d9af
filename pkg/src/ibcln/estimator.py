"""scikit-learn style wrapper around the cascaded model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import display_image, psnr, run_cascade
from .imaging import ColorSpace, Image, encode_array, from_tensor
from .losses import LossWeights
from .model import SubnetConfig
from .training import InMemorySource, TrainConfig, Trainer, fit, triples_from_arrays
from .validation import check_alphas, check_image_batch, check_paired


class ReflectionRemover(TransformerMixin, BaseEstimator):
    """Learns to map gamma-encoded blended images to their transmission layers.

    ``fit(X, y)`` takes ``(n, H, W, 3)`` inputs and ground-truth transmissions
    in [0, 1]; ``transform``/``predict`` return gamma-encoded estimates of
    the same shape.
    """

    def __init__(self, n_steps=3, base_channels=64, lstm_channels=256, epochs=80, batch_size=2,
                 learning_rate=2e-4, lambda_residual=2.0, lambda_mp=1.0, lambda_pixel=2.0, lambda_adv=0.01,
                 ablation=(), patch_size=None, hflip=True, condition="transmission",
                 pretrained_features=True, random_state=0):
        self.n_steps = n_steps
        self.base_channels = base_channels
        self.lstm_channels = lstm_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda_residual = lambda_residual
        self.lambda_mp = lambda_mp
        self.lambda_pixel = lambda_pixel
        self.lambda_adv = lambda_adv
        self.ablation = ablation
        self.patch_size = patch_size
        self.hflip = hflip
        self.condition = condition
        self.pretrained_features = pretrained_features
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            n_steps=self.n_steps,
            loss_weights=LossWeights(self.lambda_residual, self.lambda_mp, self.lambda_pixel, self.lambda_adv),
            subnet=SubnetConfig(base_channels=self.base_channels, lstm_channels=self.lstm_channels),
            seed=self.random_state, ablation=tuple(self.ablation), patch_size=self.patch_size,
            hflip=self.hflip, condition=self.condition, pretrained_features=self.pretrained_features,
        )

    def fit(self, X, y, alpha=None):
        X, y = check_paired(X, y)
        alpha = check_alphas(alpha, len(X))
        self.trainer_ = Trainer(self._config())
        source = InMemorySource(triples_from_arrays(X, y, alpha))
        self.losses_ = []
        fit(self.trainer_, [source], on_step=lambda tr, rep, d: self.losses_.append(rep.as_floats()))
        self.model_ = self.trainer_.model.eval()
        self.n_features_in_ = X.shape[-1]
        return self

    def _traces(self, X, n_steps=None):
        check_is_fitted(self, "model_")
        X = check_image_batch(X)
        n = n_steps or self.trainer_.resolved.n_steps
        return [run_cascade(self.model_, Image(x, ColorSpace.GAMMA), n) for x in X]

    def transform(self, X, n_steps=None):
        traces = self._traces(X, n_steps)
        return np.stack([encode_array(from_tensor(t.final)) for t in traces])

    def predict(self, X, n_steps=None):
        return self.transform(X, n_steps)

    def predict_trace(self, X, n_steps=None):
        """Per-step gamma-encoded transmissions, shape ``(n, N, H, W, 3)``."""
        traces = self._traces(X, n_steps)
        return np.stack([np.stack([encode_array(from_tensor(T)) for T in t.transmissions]) for t in traces])

    def score(self, X, y):
        """Mean PSNR (dB) of the quantized predictions against ``y``."""
        X, y = check_paired(X, y)
        traces = self._traces(X)
        return float(np.mean([psnr(display_image(t.final), Image(gt, ColorSpace.GAMMA).pixels)
                              for t, gt in zip(traces, y)]))
