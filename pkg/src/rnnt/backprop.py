"""Batched float64 forward/backward kernels used by the trainer.

These mirror :func:`rnnt.nn.lstm_step` and :func:`rnnt.nn.layer_norm` but
process a whole ``(T, B, in)`` batch and keep the intermediates needed for
backpropagation through time.
"""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from .nn import LN_EPSILON

__all__ = ["lstm_seq_backward", "lstm_seq_forward"]


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def lstm_seq_forward(X, w: Dict[str, Optional[np.ndarray]]):
    """Run one LSTM layer over ``X`` of shape ``(T, B, in)`` from a zero state.

    ``w`` maps the field names of :class:`rnnt.nn.LstmLayerWeights` to arrays
    (``proj``/``ln_*`` may be ``None``). Returns ``(H, cache)`` with ``H`` of
    shape ``(T, B, out)``.
    """
    W_in, W_rec, b = w["w_input"], w["w_recurrent"], w["bias"]
    P, gain, beta = w.get("proj"), w.get("ln_gain"), w.get("ln_bias")
    T, B, _ = X.shape
    H4 = W_in.shape[0]
    Hd = H4 // 4
    R = W_rec.shape[1]
    Zx = X @ W_in.T + b
    h = np.zeros((B, R))
    c = np.zeros((B, Hd))
    outs = np.empty((T, B, R))
    cache = {
        "X": X, "h_prev": np.empty((T, B, R)), "c_prev": np.empty((T, B, Hd)),
        "gates": np.empty((T, B, 4, Hd)), "tanh_c": np.empty((T, B, Hd)),
        "m": np.empty((T, B, Hd)),
    }
    if gain is not None:
        cache["xhat"] = np.empty((T, B, 4, Hd))
        cache["inv_std"] = np.empty((T, B, 4, 1))
    for t in range(T):
        cache["h_prev"][t] = h
        cache["c_prev"][t] = c
        z = (Zx[t] + h @ W_rec.T).reshape(B, 4, Hd)
        if gain is not None:
            mu = z.mean(axis=-1, keepdims=True)
            d = z - mu
            inv_std = 1.0 / np.sqrt((d * d).mean(axis=-1, keepdims=True) + LN_EPSILON)
            xhat = d * inv_std
            cache["xhat"][t] = xhat
            cache["inv_std"][t] = inv_std
            z = xhat * gain + beta
        gates = np.empty_like(z)
        gates[:, 0] = _sigmoid(z[:, 0])
        gates[:, 1] = _sigmoid(z[:, 1])
        gates[:, 2] = np.tanh(z[:, 2])
        gates[:, 3] = _sigmoid(z[:, 3])
        c = gates[:, 1] * c + gates[:, 0] * gates[:, 2]
        tc = np.tanh(c)
        m = gates[:, 3] * tc
        h = m @ P.T if P is not None else m
        cache["gates"][t] = gates
        cache["tanh_c"][t] = tc
        cache["m"][t] = m
        outs[t] = h
    return outs, cache


def lstm_seq_backward(dH, w, cache):
    """Backpropagate ``dH`` (``(T, B, out)``) through :func:`lstm_seq_forward`.

    Returns ``(dX, grads)`` where ``grads`` has the same keys as ``w`` that are
    not ``None``.
    """
    W_in, W_rec = w["w_input"], w["w_recurrent"]
    P, gain = w.get("proj"), w.get("ln_gain")
    T, B, _ = dH.shape
    Hd = W_in.shape[0] // 4
    R = W_rec.shape[1]
    dZ = np.empty((T, B, 4 * Hd))
    dh_next = np.zeros((B, R))
    dc_next = np.zeros((B, Hd))
    grads = {}
    if P is not None:
        grads["proj"] = np.zeros_like(P)
    if gain is not None:
        grads["ln_gain"] = np.zeros_like(gain)
        grads["ln_bias"] = np.zeros_like(gain)
    for t in range(T - 1, -1, -1):
        dh = dH[t] + dh_next
        gates = cache["gates"][t]
        i, f, g, o = gates[:, 0], gates[:, 1], gates[:, 2], gates[:, 3]
        tc = cache["tanh_c"][t]
        if P is not None:
            grads["proj"] += dh.T @ cache["m"][t]
            dm = dh @ P
        else:
            dm = dh
        dc = dc_next + dm * o * (1.0 - tc * tc)
        dz = np.empty((B, 4, Hd))
        dz[:, 0] = dc * g * i * (1.0 - i)
        dz[:, 1] = dc * cache["c_prev"][t] * f * (1.0 - f)
        dz[:, 2] = dc * i * (1.0 - g * g)
        dz[:, 3] = dm * tc * o * (1.0 - o)
        dc_next = dc * f
        if gain is not None:
            xhat = cache["xhat"][t]
            grads["ln_gain"] += (dz * xhat).sum(axis=0)
            grads["ln_bias"] += dz.sum(axis=0)
            dxhat = dz * gain
            dz = cache["inv_std"][t] * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        dz = dz.reshape(B, 4 * Hd)
        dZ[t] = dz
        dh_next = dz @ W_rec
    X = cache["X"]
    grads["w_input"] = np.einsum("tbg,tbi->gi", dZ, X)
    grads["w_recurrent"] = np.einsum("tbg,tbr->gr", dZ, cache["h_prev"])
    grads["bias"] = dZ.sum(axis=(0, 1))
    dX = dZ @ W_in
    return dX, grads
