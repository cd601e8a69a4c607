"""scikit-learn style wrapper around training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .features import FeatureExtractor
from .losses import LossWeights
from .network import NetConfig
from .synth import SynthVideo
from .trainer import TrainConfig, TrainingVideo, fit, infer, init_state
from .video import FrameSequence, VideoTriplet


def check_triplet(X):
    """Coerce a triplet-like input into a :class:`VideoTriplet`.

    Accepts a ``VideoTriplet``, a ``SynthVideo``, a ``TrainingVideo`` or a
    ``(raw, processed)`` pair of sequences/arrays.
    """
    if isinstance(X, VideoTriplet):
        return X
    if isinstance(X, (SynthVideo, TrainingVideo)):
        return X.triplet
    if isinstance(X, (tuple, list)) and len(X) == 2:
        raw, processed = X
        if not isinstance(raw, FrameSequence):
            raw = FrameSequence(np.asarray(raw, dtype=np.float32))
        if not isinstance(processed, FrameSequence):
            processed = FrameSequence(np.asarray(processed, dtype=np.float32))
        return VideoTriplet(raw, processed)
    raise TypeError(f"cannot interpret {type(X).__name__} as a (raw, processed) video")


def check_training_videos(X):
    videos = []
    for i, item in enumerate(X):
        if isinstance(item, TrainingVideo):
            videos.append(item)
        elif isinstance(item, SynthVideo):
            videos.append(TrainingVideo.from_synth(item, name=f"video-{i + 1}"))
        else:
            raise TypeError(f"training item {i + 1} carries no flows; pass TrainingVideo or SynthVideo")
    if not videos:
        raise ValueError("fit needs at least one video")
    return videos


class TemporalConsistencyModel(TransformerMixin, BaseEstimator):
    """Blind deflickering model: ``fit`` on videos with flows, ``transform`` raw/processed pairs.

    ``transform`` needs no optical flow; it returns one output
    :class:`FrameSequence` per input video.
    """

    def __init__(self, base_channels=32, residual_blocks=5, window_frames=5, batch_size=4,
                 epochs=100, batches_per_epoch=1000, learning_rate=1e-4, lambda_p=10.0,
                 lambda_sp=10.0, lambda_st=100.0, lambda_lt=100.0, lambda_rank=1e-5,
                 lambda_pp=100.0, alpha=50.0, grad_clip=10.0, feature_weights=None,
                 feature_width=1.0, feature_seed=0, random_state=0):
        self.base_channels = base_channels
        self.residual_blocks = residual_blocks
        self.window_frames = window_frames
        self.batch_size = batch_size
        self.epochs = epochs
        self.batches_per_epoch = batches_per_epoch
        self.learning_rate = learning_rate
        self.lambda_p = lambda_p
        self.lambda_sp = lambda_sp
        self.lambda_st = lambda_st
        self.lambda_lt = lambda_lt
        self.lambda_rank = lambda_rank
        self.lambda_pp = lambda_pp
        self.alpha = alpha
        self.grad_clip = grad_clip
        self.feature_weights = feature_weights
        self.feature_width = feature_width
        self.feature_seed = feature_seed
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batches_per_epoch=self.batches_per_epoch,
            batch_size=self.batch_size,
            window_frames=self.window_frames,
            learning_rate=self.learning_rate,
            weights=LossWeights(self.lambda_p, self.lambda_sp, self.lambda_st, self.lambda_lt,
                                self.lambda_rank, self.lambda_pp),
            seed=self.random_state,
            net=NetConfig(base_channels=self.base_channels, residual_blocks=self.residual_blocks),
            grad_clip=self.grad_clip,
            alpha=self.alpha,
        )

    def _extractor(self):
        if self.feature_weights:
            return FeatureExtractor.from_weight_file(self.feature_weights)
        return FeatureExtractor.fixed_random(self.feature_seed, self.feature_width)

    def fit(self, X, y=None, max_steps=None):
        videos = check_training_videos(X)
        config = self._train_config()
        self.train_config_ = config
        self.extractor_ = self._extractor()
        state, history = fit(videos, config, self.extractor_, max_steps=max_steps)
        self.net_ = state.net
        self.n_steps_ = state.step
        self.history_ = history
        return self

    def init_identity(self):
        """Set up an untrained (identity) model without fitting."""
        state = init_state(self._train_config())
        self.net_ = state.net
        self.n_steps_ = 0
        self.history_ = []
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def transform(self, X):
        self._check_fitted()
        single = isinstance(X, (VideoTriplet, SynthVideo, TrainingVideo)) or (
            isinstance(X, tuple) and len(X) == 2 and not isinstance(X[0], (VideoTriplet, SynthVideo, TrainingVideo))
        )
        items = [X] if single else list(X)
        outputs = [infer(self.net_, check_triplet(item)) for item in items]
        return outputs[0] if single else outputs

    def predict(self, X):
        return self.transform(X)

    def __sklearn_is_fitted__(self):
        return hasattr(self, "net_")
