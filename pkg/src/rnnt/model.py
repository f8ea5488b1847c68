"""Model configuration, parameter initialization and assembly of the inference model.

Parameters live in a flat ``{name: ndarray}`` mapping so the trainer, the
container format and the quantizer all agree on one naming scheme::

    enc.{k}.w_input  enc.{k}.w_recurrent  enc.{k}.bias  enc.{k}.proj
    enc.{k}.ln_gain  enc.{k}.ln_bias
    pred.embed       pred.{k}.*            (same LSTM fields)
    joint.w_enc  joint.w_pred  joint.bias  joint.w_out  joint.b_out
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .decoder import JointNetwork, PredictionConfig, PredictionNetwork
from .encoder import Encoder, EncoderConfig
from .nn import ConfigError, FeatureSequence, LstmLayerWeights, stack_frames

__all__ = ["ModelConfig", "RNNTModel", "init_params", "lstm_param_names", "matrix_param_names"]

LSTM_FIELDS = ("w_input", "w_recurrent", "bias", "proj", "ln_gain", "ln_bias")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig
    prediction: PredictionConfig
    joint_dim: int = 32
    units: Sequence[str] = field(default_factory=tuple)
    left_context: int = 0
    downsample: int = 1
    frame_period: float = 0.01

    def __post_init__(self):
        if self.units and len(self.units) != self.prediction.vocab_size:
            raise ConfigError(
                f"{len(self.units)} subword units for a vocabulary of {self.prediction.vocab_size}"
            )
        if self.joint_dim < 1:
            raise ConfigError("joint_dim must be positive")

    @property
    def vocab_size(self) -> int:
        """Output classes including blank."""
        return self.prediction.vocab_size + 1

    @property
    def feature_dim(self) -> int:
        return self.encoder.input_dim // (self.left_context + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["units"] = list(self.units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        return cls(
            encoder=EncoderConfig(**d.pop("encoder")),
            prediction=PredictionConfig(**d.pop("prediction")),
            units=tuple(d.pop("units", ())),
            **d,
        )

    @classmethod
    def toy(cls, feature_dim=16, vocab_size=8, units=None, **overrides) -> "ModelConfig":
        """Desk-scale reference: 4 encoder layers, N=2 after layer 2, 2 prediction layers."""
        enc = dict(input_dim=feature_dim, num_layers=4, units=48, projection_dim=24,
                   time_reduction=2, reduce_after=2, layer_norm=True)
        pred = dict(vocab_size=vocab_size, embed_dim=12, num_layers=2, units=32,
                    projection_dim=16, layer_norm=True)
        enc.update(overrides.pop("encoder", {}))
        pred.update(overrides.pop("prediction", {}))
        if units is None:
            units = tuple(chr(ord("a") + k) for k in range(vocab_size)) if vocab_size <= 26 else ()
        overrides.setdefault("joint_dim", 32)
        return cls(EncoderConfig(**enc), PredictionConfig(**pred), units=tuple(units), **overrides)


def _lstm_shapes(input_dim, units, proj, layer_norm):
    width = proj or units
    shapes = {
        "w_input": (4 * units, input_dim),
        "w_recurrent": (4 * units, width),
        "bias": (4 * units,),
    }
    if proj:
        shapes["proj"] = (proj, units)
    if layer_norm:
        shapes["ln_gain"] = (4, units)
        shapes["ln_bias"] = (4, units)
    return shapes


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    shapes = {}
    enc = config.encoder
    for k, dim in enumerate(enc.layer_input_dims()):
        for name, shape in _lstm_shapes(dim, enc.units, enc.projection_dim, enc.layer_norm).items():
            shapes[f"enc.{k}.{name}"] = shape
    pc = config.prediction
    shapes["pred.embed"] = (pc.vocab_size + 1, pc.embed_dim)
    for k, dim in enumerate(pc.layer_input_dims()):
        for name, shape in _lstm_shapes(dim, pc.units, pc.projection_dim, pc.layer_norm).items():
            shapes[f"pred.{k}.{name}"] = shape
    J = config.joint_dim
    shapes["joint.w_enc"] = (J, enc.output_dim)
    shapes["joint.w_pred"] = (J, pc.output_dim)
    shapes["joint.bias"] = (J,)
    shapes["joint.w_out"] = (config.vocab_size, J)
    shapes["joint.b_out"] = (config.vocab_size,)
    return shapes


def matrix_param_names(config: ModelConfig) -> List[str]:
    """Names of the 2-D weight matrices (the tensors a weights-only quantizer touches)."""
    return [n for n, s in param_shapes(config).items() if len(s) == 2 and "ln_" not in n]


def lstm_param_names(prefix: str, k: int) -> Dict[str, str]:
    return {f: f"{prefix}.{k}.{f}" for f in LSTM_FIELDS}


def init_params(config: ModelConfig, seed=0, dtype=np.float64) -> Dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) matrices, forget-gate bias 1, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        field_name = name.rsplit(".", 1)[-1]
        if field_name == "ln_gain":
            value = np.ones(shape)
        elif field_name in ("ln_bias", "b_out"):
            value = np.zeros(shape)
        elif field_name == "bias" and name.startswith(("enc.", "pred.")):
            value = np.zeros(shape)
            H = shape[0] // 4
            value[H : 2 * H] = 1.0
        elif field_name == "bias":
            value = np.zeros(shape)
        elif name == "pred.embed":
            value = rng.normal(0.0, 1.0, size=shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = value.astype(dtype)
    return params


def _lstm_layer(params, prefix, k, convert):
    names = lstm_param_names(prefix, k)
    get = lambda f: convert(names[f], params[names[f]]) if names[f] in params else None  # noqa: E731
    return LstmLayerWeights(
        w_input=get("w_input"),
        w_recurrent=get("w_recurrent"),
        bias=get("bias"),
        proj=get("proj"),
        ln_gain=get("ln_gain"),
        ln_bias=get("ln_bias"),
    )


class RNNTModel:
    """Immutable inference model: encoder, prediction network and joint network.

    ``params`` values may be float arrays or quantized tensors; anything that
    supports ``W @ x`` works for the matrices.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, object],
                 convert: Optional[Callable[[str, object], object]] = None):
        if convert is None:
            convert = _to_float32
        expected = param_shapes(config)
        missing = sorted(set(expected) - set(params))
        if missing:
            raise ConfigError(f"missing parameters: {missing}")
        for name, shape in expected.items():
            if tuple(np.shape(params[name])) != shape:
                raise ConfigError(f"{name}: shape {np.shape(params[name])} != {shape}")
        self.config = config
        self.params = params
        enc = config.encoder
        self.encoder = Encoder(enc, [_lstm_layer(params, "enc", k, convert) for k in range(enc.num_layers)])
        pc = config.prediction
        self.prediction = PredictionNetwork(
            pc,
            convert("pred.embed", params["pred.embed"]),
            [_lstm_layer(params, "pred", k, convert) for k in range(pc.num_layers)],
        )
        self.joint = JointNetwork(*(convert(f"joint.{n}", params[f"joint.{n}"])
                                    for n in ("w_enc", "w_pred", "bias", "w_out", "b_out")))

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def frontend(self, features) -> FeatureSequence:
        """Frame stacking/downsampling configured for this model."""
        if not isinstance(features, FeatureSequence):
            features = FeatureSequence(np.asarray(features, dtype=np.float32), self.config.frame_period)
        frames = features.frames.astype(np.float32, copy=False)
        if frames.shape[1] != self.config.feature_dim:
            raise ConfigError(f"feature dim {frames.shape[1]} != {self.config.feature_dim}")
        features = FeatureSequence(frames, features.frame_period)
        if self.config.left_context == 0 and self.config.downsample == 1:
            return features
        return stack_frames(features, self.config.left_context, self.config.downsample)


def _to_float32(name, value):
    if isinstance(value, np.ndarray):
        return np.ascontiguousarray(value, dtype=np.float32)
    return value
