"""scikit-learn style front door: ``RNNTRecognizer`` and ``FrameStacker``."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .decoder import DecodeParams, PredictionConfig, decode_utterance
from .encoder import EncoderConfig
from .model import ModelConfig, RNNTModel, matrix_param_names
from .nn import stack_frames
from .quant import quantize_model
from .tooling.container import ModelContainer
from .tooling.train import TrainConfig, train
from .validation import check_feature_sequences, check_label_sequences

__all__ = ["FrameStacker", "RNNTRecognizer"]


class FrameStacker(TransformerMixin, BaseEstimator):
    """Stack each frame with ``left_context`` predecessors, keep every ``downsample``-th."""

    def __init__(self, left_context=0, downsample=1):
        self.left_context = left_context
        self.downsample = downsample

    def fit(self, X, y=None):
        if self.left_context < 0 or self.downsample < 1:
            raise ValueError("left_context must be >= 0 and downsample >= 1")
        self.n_features_in_ = check_feature_sequences(X)[0].d
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        seqs = check_feature_sequences(X, self.n_features_in_)
        return [stack_frames(s, self.left_context, self.downsample).frames for s in seqs]


class RNNTRecognizer(BaseEstimator):
    """Train and run a streaming transducer recognizer.

    ``X`` is a list of ``(frames, features)`` arrays; ``y`` a list of label-id
    sequences (ids start at 1), or space-separated unit strings when ``units``
    is given. ``predict`` returns the same kind.
    """

    def __init__(self, units: Optional[Sequence[str]] = None, encoder_layers=4, encoder_units=48,
                 encoder_projection=24, time_reduction=2, reduce_after=2, embed_dim=12,
                 prediction_layers=2, prediction_units=32, prediction_projection=16, joint_dim=32,
                 layer_norm=True, frame_period=0.01, learning_rate=0.05, optimizer="momentum",
                 batch_size=32, steps=800, grad_clip=1.0, beam_width=4, max_expansions=3,
                 quantize=None, random_state=0):
        self.units = units
        self.encoder_layers = encoder_layers
        self.encoder_units = encoder_units
        self.encoder_projection = encoder_projection
        self.time_reduction = time_reduction
        self.reduce_after = reduce_after
        self.embed_dim = embed_dim
        self.prediction_layers = prediction_layers
        self.prediction_units = prediction_units
        self.prediction_projection = prediction_projection
        self.joint_dim = joint_dim
        self.layer_norm = layer_norm
        self.frame_period = frame_period
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.steps = steps
        self.grad_clip = grad_clip
        self.beam_width = beam_width
        self.max_expansions = max_expansions
        self.quantize = quantize
        self.random_state = random_state

    def _config(self, n_features, vocab_size):
        enc = EncoderConfig(n_features, self.encoder_layers, self.encoder_units,
                            self.encoder_projection, self.time_reduction, self.reduce_after,
                            self.layer_norm)
        pred = PredictionConfig(vocab_size, self.embed_dim, self.prediction_layers,
                                self.prediction_units, self.prediction_projection, self.layer_norm)
        return ModelConfig(enc, pred, self.joint_dim, tuple(self.units or ()),
                           frame_period=self.frame_period)

    def fit(self, X, y):
        seqs = check_feature_sequences(X, frame_period=self.frame_period)
        labels = check_label_sequences(y, len(self.units) if self.units else None, self.units or ())
        if len(seqs) != len(labels):
            raise ValueError(f"{len(seqs)} feature sequences but {len(labels)} label sequences")
        vocab = len(self.units) if self.units else max((max(s) for s in labels if s), default=1)
        self.config_ = self._config(seqs[0].d, vocab)
        hyper = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                            steps=self.steps, optimizer=self.optimizer, grad_clip=self.grad_clip,
                            seed=self.random_state, log_every=0)
        result = train(list(zip(seqs, labels)), self.config_, hyper)
        self.params_ = result.params
        self.loss_curve_ = result.losses
        self.n_features_in_ = seqs[0].d
        self._build()
        return self

    def _build(self):
        params = self.params_
        if self.quantize:
            params = quantize_model(params, matrix_param_names(self.config_), self.quantize)
        self.model_ = RNNTModel(self.config_, params)

    def _decode_params(self):
        return DecodeParams(beam_width=self.beam_width, max_expansions=self.max_expansions,
                            nbest=self.beam_width)

    def predict_nbest(self, X, fusion=None):
        check_is_fitted(self, "model_")
        seqs = check_feature_sequences(X, self.n_features_in_, self.frame_period)
        return [decode_utterance(s, self.model_, self._decode_params(), fusion=fusion) for s in seqs]

    def predict(self, X, fusion=None):
        best = [nbest[0][0] for nbest in self.predict_nbest(X, fusion)]
        if self.units:
            return [" ".join(self.units[k - 1] for k in labels) for labels in best]
        return best

    def score(self, X, y):
        """Exact-sequence accuracy."""
        check_is_fitted(self, "model_")
        refs = check_label_sequences(y, units=self.units or ())
        hyps = [nbest[0][0] for nbest in self.predict_nbest(X)]
        return float(np.mean([tuple(r) == tuple(h) for r, h in zip(refs, hyps)]))

    def to_container(self) -> ModelContainer:
        check_is_fitted(self, "model_")
        return ModelContainer(self.config_, dict(self.model_.params), {"steps": self.steps})

    @classmethod
    def from_container(cls, container: ModelContainer) -> "RNNTRecognizer":
        cfg = container.config
        enc, pred = cfg.encoder, cfg.prediction
        est = cls(units=tuple(cfg.units) or None, encoder_layers=enc.num_layers,
                  encoder_units=enc.units, encoder_projection=enc.projection_dim,
                  time_reduction=enc.time_reduction, reduce_after=enc.reduce_after,
                  embed_dim=pred.embed_dim, prediction_layers=pred.num_layers,
                  prediction_units=pred.units, prediction_projection=pred.projection_dim,
                  joint_dim=cfg.joint_dim, layer_norm=enc.layer_norm, frame_period=cfg.frame_period)
        est.config_ = cfg
        est.params_ = container.params
        est.n_features_in_ = cfg.feature_dim
        est.model_ = container.model()
        return est

