import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnnt.encoder import EncoderConfig, time_reduce
from rnnt.model import ModelConfig, RNNTModel, init_params
from rnnt.nn import ConfigError


@pytest.fixture(scope="module")
def encoder():
    config = ModelConfig.toy(feature_dim=5, vocab_size=3,
                             encoder=dict(units=6, projection_dim=4))
    return RNNTModel(config, init_params(config, seed=4)).encoder


def frames(T, d=5, seed=0):
    return np.random.default_rng(seed).normal(size=(T, d)).astype(np.float32)


def stream(enc, x):
    state = enc.init_state()
    outs = []
    for f in x:
        r = enc.encode_lower(f, state)
        if r is not None:
            outs.append(enc.encode_upper(r, state))
    tail = enc.flush(state)
    if tail is not None:
        outs.append(enc.encode_upper(tail, state))
    return np.array(outs)


class TestTimeReduce:
    def test_concatenates_pairs(self):
        out = time_reduce([np.array([v]) for v in (1.0, 2, 3, 4)], 2)
        np.testing.assert_array_equal(out, [[1, 2], [3, 4]])

    def test_factor_one_is_identity(self):
        x = [np.array([v, -v]) for v in range(3)]
        np.testing.assert_array_equal(time_reduce(x, 1), x)

    def test_odd_length_pads_with_zeros(self):
        out = time_reduce([np.array([float(v)]) for v in range(1, 6)], 2)
        assert len(out) == 3
        np.testing.assert_array_equal(out[-1], [5, 0])

    @given(st.integers(1, 100), st.integers(1, 4))
    def test_output_count(self, T, N):
        assert len(time_reduce([np.zeros(2)] * T, N)) == math.ceil(T / N)

    def test_rejects_zero_factor(self):
        with pytest.raises(ConfigError):
            time_reduce([np.zeros(1)], 0)


class TestStreamingEncoder:
    def test_emits_once_per_two_frames(self, encoder):
        state = encoder.init_state()
        assert encoder.encode_lower(frames(1)[0], state) is None
        assert encoder.encode_lower(frames(1)[0], state) is not None

    def test_flush(self, encoder):
        state = encoder.init_state()
        assert encoder.flush(state) is None
        encoder.encode_lower(frames(1)[0], state)
        tail = encoder.flush(state)
        assert tail is not None and not tail[encoder.config.output_dim:].any()
        assert encoder.flush(state) is None

    def test_odd_length_frame_count(self, encoder):
        assert len(stream(encoder, frames(7))) == 4

    def test_stream_equals_batch(self, encoder):
        x = frames(10)
        assert stream(encoder, x).tobytes() == encoder.forward(x).tobytes()

    def test_flushed_stream_equals_time_reduce(self, encoder):
        x = frames(9, seed=2)
        lower = encoder.lower_forward(x)
        reduced = time_reduce(lower, 2)
        state = encoder.init_state()
        got = [r for r in (encoder.encode_lower(f, state) for f in x) if r is not None]
        got.append(encoder.flush(state))
        assert np.array(got).tobytes() == np.array(reduced).tobytes()

    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 24), st.integers(1, 23))
    def test_causality(self, encoder, T, cut):
        cut = min(cut, T)
        cut -= cut % 2
        x = frames(T, seed=T)
        full = stream(encoder, x)
        prefix = stream(encoder, x[:cut]) if cut else np.zeros((0,) + full.shape[1:])
        assert prefix.tobytes() == full[: len(prefix)].tobytes()

    def test_frame_width_checked(self, encoder):
        with pytest.raises(ConfigError):
            encoder.encode_lower(np.zeros(4), encoder.init_state())

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            EncoderConfig(4, num_layers=2, reduce_after=2)
        with pytest.raises(ConfigError):
            EncoderConfig(4, time_reduction=0)

    def test_reduced_layer_input_width(self):
        dims = EncoderConfig(4, num_layers=4, units=8, projection_dim=3, reduce_after=2).layer_input_dims()
        assert dims == [4, 3, 6, 3]
