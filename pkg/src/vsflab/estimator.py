"""scikit-learn style front ends for the toy generator and the oracle."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_prompt, check_prompts, check_seeds
from .data import SHAPES, oracle_classify_batch
from .guidance import GuidanceSpec, Variant
from .model import ToyModel, euler_sample_batch, latent_stats, load_checkpoint, save_checkpoint, train

__all__ = ["FlowMatchingGenerator", "ShapeOracle"]


class FlowMatchingGenerator(BaseEstimator):
    """Text-conditioned rectified-flow generator for 16x16 RGB toy images.

    ``fit`` trains a small joint-attention transformer on images and
    prompts; ``sample`` draws images with an optional negative prompt and
    guidance variant.

    Parameters
    ----------
    dim, heads, layers, patch, mlp_ratio : int
        Network shape.
    n_steps : int
        Optimizer steps.
    learning_rate : float
        Peak Adam learning rate (linear warmup, cosine decay).
    batch_size : int
    uncond_prob : float
        Fraction of prompts replaced by the empty prompt during training.
    warmup : int
    ema : float
        Weight averaging decay; 0 disables it.
    sample_steps : int
        Euler steps used by :meth:`sample`.
    random_state : int
        Seeds both initialization and training.

    Attributes
    ----------
    model_ : ToyModel
    loss_curve_ : ndarray of shape (n_steps,)
    n_features_in_ : int
    """

    def __init__(self, dim=96, heads=4, layers=4, patch=4, mlp_ratio=2, n_steps=5000, learning_rate=1e-2,
                 batch_size=64, uncond_prob=0.1, warmup=200, ema=0.999, sample_steps=8, random_state=0):
        self.dim = dim
        self.heads = heads
        self.layers = layers
        self.patch = patch
        self.mlp_ratio = mlp_ratio
        self.n_steps = n_steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.uncond_prob = uncond_prob
        self.warmup = warmup
        self.ema = ema
        self.sample_steps = sample_steps
        self.random_state = random_state

    def fit(self, X, y, callback=None):
        """Train on images ``X`` (n, 16, 16, 3) and prompts ``y`` (strings or ids)."""
        X = check_images(X)
        ids = check_prompts(y, X.shape[0])
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        mean, std = latent_stats(X)
        self.model_ = ToyModel.initialize(seed=self.random_state, dim=self.dim, heads=self.heads,
                                          layers=self.layers, patch=self.patch, mlp_ratio=self.mlp_ratio,
                                          data_mean=mean, data_std=std)
        self.loss_curve_ = train(self.model_, X, ids, steps=self.n_steps, lr=self.learning_rate,
                                 seed=self.random_state, batch_size=self.batch_size,
                                 uncond_prob=self.uncond_prob, warmup=min(self.warmup, self.n_steps),
                                 ema=self.ema, callback=callback)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def sample(self, pos, neg=None, guidance=None, seeds=0, return_records=False):
        """Images for one prompt pair, one per seed, shape (len(seeds), 16, 16, 3)."""
        check_is_fitted(self, "model_")
        spec = guidance if isinstance(guidance, GuidanceSpec) else GuidanceSpec(guidance or Variant.NONE)
        pos = check_prompt(pos, "pos")
        neg = None if neg is None else check_prompt(neg, "neg")
        pixels, records = euler_sample_batch(self.model_, pos, neg, spec, self.sample_steps, check_seeds(seeds))
        return (pixels, records) if return_records else pixels

    def save(self, path):
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_)

    @classmethod
    def from_checkpoint(cls, path, **params):
        model = load_checkpoint(path)
        est = cls(dim=model.dim, heads=model.heads, layers=len(model.blocks), patch=model.patch, **params)
        est.model_ = model
        est.n_features_in_ = 16 * 16 * 3
        return est


class ShapeOracle(ClassifierMixin, BaseEstimator):
    """Deterministic attribute oracle wrapped as a classifier.

    ``predict`` returns the detected shape name or ``"none"``; ``fit`` only
    records the label set.
    """

    def fit(self, X=None, y=None):
        self.classes_ = np.array(SHAPES + ("none",))
        return self

    def _results(self, X):
        return oracle_classify_batch(check_images(X))

    def predict(self, X):
        check_is_fitted(self, "classes_")
        return np.array([r.shape or "none" for r in self._results(X)])

    def predict_colors(self, X):
        """Set of colors present per image."""
        return [set(r.colors) for r in self._results(X)]

    def quality(self, X):
        return np.array([r.quality for r in self._results(X)])
