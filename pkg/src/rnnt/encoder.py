"""Streaming unidirectional LSTM encoder with a time-reduction layer.

The stack is split at the reduction point: the lower half consumes input
frames one at a time and buffers its outputs until ``N`` are available, the
upper half runs at the reduced rate. The two halves keep separate state so
they can run in different threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .nn import ConfigError, LstmLayerWeights, LstmState, lstm_step

__all__ = ["Encoder", "EncoderConfig", "EncoderState", "time_reduce"]


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    num_layers: int = 4
    units: int = 32
    projection_dim: int = 16
    time_reduction: int = 2
    reduce_after: int = 2
    layer_norm: bool = True

    def __post_init__(self):
        if self.time_reduction < 1:
            raise ConfigError("time_reduction must be >= 1")
        if not 1 <= self.reduce_after < self.num_layers:
            raise ConfigError("need 1 <= reduce_after < num_layers")
        if self.input_dim < 1 or self.units < 1 or self.projection_dim < 0:
            raise ConfigError("encoder dimensions must be positive")

    @property
    def output_dim(self) -> int:
        return self.projection_dim or self.units

    def layer_input_dims(self) -> List[int]:
        dims = [self.input_dim]
        for k in range(1, self.num_layers):
            dims.append(self.output_dim * (self.time_reduction if k == self.reduce_after else 1))
        return dims


def time_reduce(frames: Sequence[np.ndarray], N: int) -> List[np.ndarray]:
    """Concatenate each run of ``N`` frames; a short final group is zero-padded."""
    if N < 1:
        raise ConfigError("N must be >= 1")
    frames = list(frames)
    out = []
    for start in range(0, len(frames), N):
        group = frames[start : start + N]
        if len(group) < N:
            group = group + [np.zeros_like(group[0])] * (N - len(group))
        out.append(np.concatenate(group))
    return out


@dataclass
class EncoderState:
    lower: List[LstmState]
    upper: List[LstmState]
    pending: List[np.ndarray] = field(default_factory=list)


class Encoder:
    """Encoder weights plus the streaming interface. Weights are never mutated."""

    def __init__(self, config: EncoderConfig, layers: Sequence[LstmLayerWeights]):
        if len(layers) != config.num_layers:
            raise ConfigError(f"expected {config.num_layers} layers, got {len(layers)}")
        for k, (layer, dim) in enumerate(zip(layers, config.layer_input_dims())):
            if layer.input_dim != dim:
                raise ConfigError(f"layer {k} expects input {dim}, has {layer.input_dim}")
        self.config = config
        self.layers = tuple(layers)
        self.lower_layers = self.layers[: config.reduce_after]
        self.upper_layers = self.layers[config.reduce_after :]

    def init_state(self, dtype=np.float32) -> EncoderState:
        return EncoderState(
            [LstmState.zeros(w, dtype) for w in self.lower_layers],
            [LstmState.zeros(w, dtype) for w in self.upper_layers],
        )

    def encode_lower(self, frame, state: EncoderState) -> Optional[np.ndarray]:
        """Run the pre-reduction layers on one frame; returns a reduced frame every N calls."""
        if np.shape(frame)[-1] != self.config.input_dim:
            raise ConfigError(f"frame width {np.shape(frame)[-1]} != {self.config.input_dim}")
        x = frame
        for k, w in enumerate(self.lower_layers):
            x, state.lower[k] = lstm_step(x, state.lower[k], w)
        state.pending.append(x)
        if len(state.pending) == self.config.time_reduction:
            reduced = np.concatenate(state.pending)
            state.pending = []
            return reduced
        return None

    def flush(self, state: EncoderState) -> Optional[np.ndarray]:
        """Emit the zero-padded partial group left at end of stream, if any."""
        if not state.pending:
            return None
        N = self.config.time_reduction
        group = state.pending + [np.zeros_like(state.pending[0])] * (N - len(state.pending))
        state.pending = []
        return np.concatenate(group)

    def encode_upper(self, reduced, state: EncoderState) -> np.ndarray:
        x = reduced
        for k, w in enumerate(self.upper_layers):
            x, state.upper[k] = lstm_step(x, state.upper[k], w)
        return x

    def lower_forward(self, frames) -> List[np.ndarray]:
        state = self.init_state(np.asarray(frames).dtype)
        outs = []
        for frame in frames:
            x = frame
            for k, w in enumerate(self.lower_layers):
                x, state.lower[k] = lstm_step(x, state.lower[k], w)
            outs.append(x)
        return outs

    def forward(self, frames) -> np.ndarray:
        """Whole-utterance pass: lower layers, :func:`time_reduce`, upper layers."""
        frames = np.asarray(frames)
        if frames.ndim != 2 or len(frames) == 0:
            raise ValueError("encoder needs a non-empty (T, d) matrix")
        reduced = time_reduce(self.lower_forward(frames), self.config.time_reduction)
        state = self.init_state(frames.dtype)
        return np.stack([self.encode_upper(r, state) for r in reduced])
