"""Desk-scale transducer training with hand-derived backpropagation.

The forward pass here is the batched float64 twin of the streaming float32
inference path in :mod:`rnnt.model`; both compute the same function up to
precision (checked in the tests).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..backprop import lstm_seq_backward, lstm_seq_forward
from ..loss import rnnt_loss_batch
from ..model import LSTM_FIELDS, ModelConfig, init_params
from ..nn import FeatureSequence, stack_frames

logger = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainResult", "TrainingDiverged", "forward_backward", "make_batch", "train"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    steps: int = 800
    optimizer: str = "momentum"
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 50
    lr_decay_start: float = 0.6

    def __post_init__(self):
        if self.optimizer not in ("momentum", "adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ValueError("learning_rate, batch_size and steps must be positive")


@dataclass
class TrainResult:
    params: Dict[str, np.ndarray]
    losses: List[float] = field(default_factory=list)
    seconds: float = 0.0
    diagnostic: Optional[str] = None


def _frontend(x, config: ModelConfig):
    if isinstance(x, FeatureSequence):
        feats = x
    else:
        feats = FeatureSequence(np.asarray(x, dtype=np.float32), config.frame_period)
    if config.left_context or config.downsample > 1:
        feats = stack_frames(feats, config.left_context, config.downsample)
    return feats.frames


def make_batch(items: Sequence[Tuple[object, Sequence[int]]], config: ModelConfig):
    """Pad a list of ``(features, labels)`` into arrays for :func:`forward_backward`."""
    frames = [_frontend(x, config).astype(np.float64) for x, _ in items]
    labels = [tuple(int(k) for k in y) for _, y in items]
    B = len(items)
    T = max(len(f) for f in frames)
    U = max(len(y) for y in labels)
    X = np.zeros((B, T, frames[0].shape[1]))
    Y = np.ones((B, U), dtype=np.int64)
    for b, (f, y) in enumerate(zip(frames, labels)):
        X[b, : len(f)] = f
        Y[b, : len(y)] = y
    return {
        "X": X,
        "T": np.array([len(f) for f in frames]),
        "Y": Y,
        "U": np.array([len(y) for y in labels]),
    }


def _layer(params, prefix, k):
    return {f: params.get(f"{prefix}.{k}.{f}") for f in LSTM_FIELDS}


def _store_grads(grads, prefix, k, g):
    for f, v in g.items():
        grads[f"{prefix}.{k}.{f}"] = v


def forward_backward(params, config: ModelConfig, batch, compute_grads=True):
    """Mean transducer loss over the batch and its gradient for every parameter."""
    enc = config.encoder
    N = enc.time_reduction
    X = batch["X"].transpose(1, 0, 2)  # (T, B, d)
    T_len, Y, U_len = batch["T"], batch["Y"], batch["U"]
    T, B, _ = X.shape
    caches = []

    h = X
    for k in range(enc.reduce_after):
        h, c = lstm_seq_forward(h, _layer(params, "enc", k))
        caches.append(c)
    mask = (np.arange(T)[:, None] < T_len[None, :])[..., None]
    h = h * mask
    Tr = -(-T // N)
    D = h.shape[2]
    h = np.concatenate([h, np.zeros((Tr * N - T, B, D))]) if Tr * N > T else h
    h = h.reshape(Tr, N, B, D).transpose(0, 2, 1, 3).reshape(Tr, B, N * D)
    for k in range(enc.reduce_after, enc.num_layers):
        h, c = lstm_seq_forward(h, _layer(params, "enc", k))
        caches.append(c)
    E = h.transpose(1, 0, 2)  # (B, Tr, De)
    Tr_len = -(-T_len // N)

    pc = config.prediction
    ids = np.concatenate([np.zeros((B, 1), np.int64), Y], axis=1)  # <sos> row is 0
    g = params["pred.embed"][ids].transpose(1, 0, 2)
    pred_caches = []
    for k in range(pc.num_layers):
        g, c = lstm_seq_forward(g, _layer(params, "pred", k))
        pred_caches.append(c)
    G = g.transpose(1, 0, 2)  # (B, U + 1, Dp)

    a = E @ params["joint.w_enc"].T + params["joint.bias"]
    p = G @ params["joint.w_pred"].T
    z = np.tanh(a[:, :, None, :] + p[:, None, :, :])
    logits = z @ params["joint.w_out"].T + params["joint.b_out"]

    losses, dlogits, _, _ = rnnt_loss_batch(logits, Y, Tr_len, U_len)
    loss = float(losses.mean())
    if not compute_grads:
        return loss, None
    dlogits = dlogits / B

    grads = {}
    grads["joint.w_out"] = np.einsum("btuv,btuj->vj", dlogits, z)
    grads["joint.b_out"] = dlogits.sum(axis=(0, 1, 2))
    dpre = (dlogits @ params["joint.w_out"]) * (1.0 - z * z)
    da = dpre.sum(axis=2)
    dp = dpre.sum(axis=1)
    grads["joint.w_enc"] = np.einsum("btj,btd->jd", da, E)
    grads["joint.bias"] = da.sum(axis=(0, 1))
    grads["joint.w_pred"] = np.einsum("buj,bud->jd", dp, G)
    dE = da @ params["joint.w_enc"]
    dG = dp @ params["joint.w_pred"]

    dg = dG.transpose(1, 0, 2)
    for k in range(pc.num_layers - 1, -1, -1):
        dg, gk = lstm_seq_backward(dg, _layer(params, "pred", k), pred_caches[k])
        _store_grads(grads, "pred", k, gk)
    d_embed = np.zeros_like(params["pred.embed"])
    np.add.at(d_embed, ids.T, dg)
    grads["pred.embed"] = d_embed

    dh = dE.transpose(1, 0, 2)
    for k in range(enc.num_layers - 1, enc.reduce_after - 1, -1):
        dh, gk = lstm_seq_backward(dh, _layer(params, "enc", k), caches[k])
        _store_grads(grads, "enc", k, gk)
    dh = dh.reshape(Tr, B, N, D).transpose(0, 2, 1, 3).reshape(Tr * N, B, D)[:T] * mask
    for k in range(enc.reduce_after - 1, -1, -1):
        dh, gk = lstm_seq_backward(dh, _layer(params, "enc", k), caches[k])
        _store_grads(grads, "enc", k, gk)
    return loss, grads


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()} if cfg.optimizer == "adam" else None

    def lr(self):
        # constant, then linear decay to 10% over the tail of training
        cfg = self.cfg
        start = cfg.lr_decay_start * cfg.steps
        if self.t <= start or cfg.steps <= 0:
            return cfg.learning_rate
        frac = (self.t - start) / max(cfg.steps - start, 1)
        return cfg.learning_rate * (1.0 - 0.9 * min(frac, 1.0))

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = cfg.grad_clip / norm if cfg.grad_clip and norm > cfg.grad_clip else 1.0
        lr = self.lr()
        for k in sorted(params):
            g = grads[k] * scale
            if cfg.optimizer == "sgd":
                params[k] -= lr * g
            elif cfg.optimizer == "momentum":
                self.m[k] = cfg.momentum * self.m[k] + g
                params[k] -= lr * self.m[k]
            else:
                b1, b2 = cfg.momentum, 0.999
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mh = self.m[k] / (1 - b1 ** self.t)
                vh = self.v[k] / (1 - b2 ** self.t)
                params[k] -= lr * mh / (np.sqrt(vh) + 1e-8)
        return norm


def _smoothing_diagnostic(losses, window=20, horizon=100):
    head = losses[:horizon]
    if len(head) < 2 * window:
        return None
    means = [float(np.mean(head[i : i + window])) for i in range(0, len(head) - window + 1, window)]
    if any(b > a for a, b in zip(means, means[1:])):
        return ("smoothed training loss did not decrease monotonically over the first "
                f"{len(head)} steps ({', '.join(f'{m:.3f}' for m in means)}); "
                "consider a lower learning rate")
    return None


def train(dataset, config: ModelConfig, hyper: Optional[TrainConfig] = None,
          params: Optional[Dict[str, np.ndarray]] = None, callback=None) -> TrainResult:
    """Minimize the mean transducer loss by minibatch gradient descent.

    ``dataset`` is a sequence of ``(features, labels)``. Raises
    :class:`TrainingDiverged` if the loss becomes non-finite.
    """
    hyper = hyper or TrainConfig()
    if not dataset:
        raise ValueError("empty training set")
    rng = np.random.default_rng(hyper.seed)
    params = {k: v.astype(np.float64).copy() for k, v in (params or init_params(config, hyper.seed)).items()}
    opt = _Optimizer(hyper, params)
    result = TrainResult(params)
    start = time.perf_counter()
    order = rng.permutation(len(dataset))
    pos = 0
    for step in range(hyper.steps):
        if pos + hyper.batch_size > len(order):
            order = rng.permutation(len(dataset))
            pos = 0
        idx = order[pos : pos + hyper.batch_size]
        pos += hyper.batch_size
        batch = make_batch([dataset[i] for i in idx], config)
        loss, grads = forward_backward(params, config, batch)
        if not math.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDiverged(f"loss became {loss} at step {step}; lower the learning rate "
                                   f"(currently {hyper.learning_rate}) or the gradient clip")
        opt.step(params, grads)
        result.losses.append(loss)
        if step == 99 or (step == hyper.steps - 1 and hyper.steps < 100):
            result.diagnostic = _smoothing_diagnostic(result.losses)
            if result.diagnostic:
                logger.warning(result.diagnostic)
        if hyper.log_every and (step + 1) % hyper.log_every == 0:
            logger.info("step %d loss %.4f lr %.4g", step + 1,
                        float(np.mean(result.losses[-hyper.log_every:])), opt.lr())
        if callback is not None:
            callback(step, loss, params)
    result.seconds = time.perf_counter() - start
    return result
