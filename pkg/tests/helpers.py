"""Builders shared by several test modules."""
import itertools

import numpy as np

from rnnt.decoder import pred_forward
from rnnt.loss import rnnt_loss_bruteforce
from rnnt.model import ModelConfig, RNNTModel, init_params


def micro_config():
    return ModelConfig.toy(feature_dim=3, vocab_size=2, joint_dim=6,
                           encoder=dict(units=4, projection_dim=0),
                           prediction=dict(embed_dim=3, units=4, projection_dim=0))


def micro_model(seed, frames=6):
    """A random two-unit model sharp enough to have a clear best sequence, plus an input."""
    cfg = micro_config()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed=seed)
    scale = rng.uniform(1.0, 3.0)
    params = {k: v * scale for k, v in params.items()}
    params["joint.b_out"][0] += rng.uniform(0.0, 2.0)
    x = rng.normal(size=(frames, 3)).astype(np.float32)
    return RNNTModel(cfg, params), x


def sequence_log_prob(model, x, labels):
    """``log P(labels | x)`` by summing every alignment explicitly."""
    enc = model.encoder.forward(model.frontend(x).frames)
    preds = [pred_forward(model.prediction, labels[:u])[0] for u in range(len(labels) + 1)]
    lattice = np.array([[model.joint(e, g) for g in preds] for e in enc], dtype=np.float64)
    return -rnnt_loss_bruteforce(lattice, list(labels))


def exhaustive_best(model, x, max_len=3):
    units = range(1, model.config.prediction.vocab_size + 1)
    candidates = (y for n in range(max_len + 1) for y in itertools.product(units, repeat=n))
    return max(((y, sequence_log_prob(model, x, y)) for y in candidates), key=lambda item: item[1])


def small_config(feature_dim=4, vocab_size=3):
    return ModelConfig.toy(feature_dim=feature_dim, vocab_size=vocab_size, joint_dim=5,
                           encoder=dict(units=4, projection_dim=3),
                           prediction=dict(units=4, projection_dim=3, embed_dim=3))
