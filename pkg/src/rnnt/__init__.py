"""Streaming RNN transducer speech recognition, end to end on NumPy.

Subpackages: :mod:`rnnt.loss` (transducer and CTC losses), :mod:`rnnt.encoder`,
:mod:`rnnt.decoder` (prediction/joint networks and beam search),
:mod:`rnnt.biasing`, :mod:`rnnt.quant`, :mod:`rnnt.runtime` and
:mod:`rnnt.tooling` (data, training, metrics, container, CLI).
"""
from .biasing import ShallowFusion, compile_context
from .decoder import DecodeParams, decode_utterance, greedy_decode
from .estimator import FrameStacker, RNNTRecognizer
from .loss import ctc_loss, rnnt_loss
from .model import ModelConfig, RNNTModel, init_params
from .nn import FeatureSequence
from .quant import quantize_asymmetric, quantize_model, quantize_symmetric
from .runtime import PipelineConfig, measure_rt, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "DecodeParams",
    "FeatureSequence",
    "FrameStacker",
    "ModelConfig",
    "PipelineConfig",
    "RNNTModel",
    "RNNTRecognizer",
    "ShallowFusion",
    "compile_context",
    "ctc_loss",
    "decode_utterance",
    "greedy_decode",
    "init_params",
    "measure_rt",
    "quantize_asymmetric",
    "quantize_model",
    "quantize_symmetric",
    "rnnt_loss",
    "run_pipeline",
]
