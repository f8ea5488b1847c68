"""Framework-free neural primitives for the float inference path.

Everything here is a pure function of its inputs. Weight matrices may be
plain ``numpy`` arrays or any object implementing ``W @ x`` (the quantized
tensors in :mod:`rnnt.quant` do), so the same LSTM step serves both the
float and the int8 engines.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "ConfigError",
    "FeatureSequence",
    "LstmLayerWeights",
    "LstmState",
    "affine",
    "layer_norm",
    "log_softmax",
    "lstm_step",
    "sigmoid",
    "stack_frames",
]

LN_EPSILON = 1e-5


class ConfigError(ValueError):
    """Shapes or hyper-parameters that do not fit together."""


def sigmoid(x):
    # tanh form: overflow-free and keeps the input dtype
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def layer_norm(x, gain, bias, epsilon=LN_EPSILON):
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``.

    Uses the biased variance. Leading axes are treated as independent rows,
    which is how the per-gate normalization inside :func:`lstm_step` works.
    """
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ConfigError(
            f"layer_norm width mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return gain * centered / np.sqrt(var + epsilon) + bias


def affine(x, W, b):
    if W.shape[1] != np.shape(x)[-1] or W.shape[0] != np.shape(b)[-1]:
        raise ConfigError(f"affine shape mismatch: W {W.shape}, x {np.shape(x)}, b {np.shape(b)}")
    return W @ x + b


def log_softmax(x):
    x = np.asarray(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class LstmLayerWeights:
    """One LSTM layer. Gate blocks are stacked in the order input, forget, cell, output.

    ``w_input`` is ``(4H, in)``, ``w_recurrent`` is ``(4H, R)`` with ``R`` the
    projection width when ``proj`` (``(P, H)``) is present and ``H`` otherwise.
    ``ln_gain``/``ln_bias`` are ``(4, H)`` and normalize each gate's
    pre-activation separately.
    """

    w_input: object
    w_recurrent: object
    bias: np.ndarray
    proj: Optional[object] = None
    ln_gain: Optional[np.ndarray] = None
    ln_bias: Optional[np.ndarray] = None

    def __post_init__(self):
        four_h, _ = self.w_input.shape
        if four_h % 4:
            raise ConfigError("gate rows must be a multiple of 4")
        hidden = four_h // 4
        if self.w_recurrent.shape[0] != four_h or np.shape(self.bias) != (four_h,):
            raise ConfigError("gate blocks disagree in size")
        width = hidden if self.proj is None else self.proj.shape[0]
        if self.proj is not None and self.proj.shape[1] != hidden:
            raise ConfigError(f"projection expects {hidden} inputs, has {self.proj.shape[1]}")
        if self.w_recurrent.shape[1] != width:
            raise ConfigError(
                f"recurrent width {self.w_recurrent.shape[1]} != layer output width {width}"
            )
        if (self.ln_gain is None) != (self.ln_bias is None):
            raise ConfigError("layer norm needs both gain and bias")
        if self.ln_gain is not None:
            if np.shape(self.ln_gain) != (4, hidden) or np.shape(self.ln_bias) != (4, hidden):
                raise ConfigError("layer norm parameters must be (4, hidden)")

    @property
    def input_dim(self) -> int:
        return self.w_input.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_input.shape[0] // 4

    @property
    def output_dim(self) -> int:
        return self.hidden if self.proj is None else self.proj.shape[0]


@dataclass(frozen=True)
class LstmState:
    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, w: LstmLayerWeights, dtype=np.float32) -> "LstmState":
        return cls(np.zeros(w.hidden, dtype), np.zeros(w.output_dim, dtype))


def lstm_step(x, state: LstmState, w: LstmLayerWeights):
    """Advance one LSTM layer by one frame; returns ``(output, new_state)``."""
    if np.shape(x)[-1] != w.input_dim:
        raise ConfigError(f"lstm input width {np.shape(x)[-1]} != {w.input_dim}")
    if state.c.shape[-1] != w.hidden or state.h.shape[-1] != w.output_dim:
        raise ConfigError("lstm state does not match layer")
    z = w.w_input @ x + w.w_recurrent @ state.h + w.bias
    z = z.reshape(4, w.hidden)
    if w.ln_gain is not None:
        z = layer_norm(z, w.ln_gain, w.ln_bias)
    i = sigmoid(z[0])
    f = sigmoid(z[1])
    g = np.tanh(z[2])
    o = sigmoid(z[3])
    c = f * state.c + i * g
    h = o * np.tanh(c)
    if w.proj is not None:
        h = w.proj @ h
    return h, LstmState(c, h)


@dataclass(frozen=True)
class FeatureSequence:
    """``T`` frames of ``d`` features plus the time one frame covers, in seconds."""

    frames: np.ndarray
    frame_period: float = 0.01

    def __post_init__(self):
        if np.ndim(self.frames) != 2:
            raise ConfigError("frames must be a (T, d) matrix")

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def d(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.T * self.frame_period


def stack_frames(f: FeatureSequence, left_context: int, downsample: int) -> FeatureSequence:
    """Append ``left_context`` previous frames to each frame, keep every ``downsample``-th.

    Missing history at the start of the utterance is zero-filled. The stacked
    vector is ordered oldest first, current frame last.
    """
    if left_context < 0 or downsample < 1:
        raise ConfigError("need left_context >= 0 and downsample >= 1")
    if f.T == 0:
        raise ValueError("cannot stack an empty feature sequence")
    padded = np.concatenate([np.zeros((left_context, f.d), f.frames.dtype), f.frames])
    stacked = np.concatenate(
        [padded[k : k + f.T] for k in range(left_context + 1)], axis=1
    )
    return FeatureSequence(stacked[::downsample].copy(), f.frame_period * downsample)
