"""Transducer and CTC losses with exact forward-backward gradients.

Losses take raw logits and apply their own log-softmax, so every gradient
returned is with respect to the pre-softmax logits. The dynamic programs
run in float64 regardless of the input precision.

Lattice layout: ``logits[t, u, k]`` scores symbol ``k`` (0 is blank) after
``t + 1`` encoder frames and ``u`` emitted labels, ``t in [0, T)`` and
``u in [0, U]``. A path starts at ``(0, 0)`` and ends with the blank emitted
from ``(T - 1, U)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .nn import log_softmax

__all__ = [
    "BLANK",
    "RnntPosteriors",
    "ctc_loss",
    "ctc_loss_bruteforce",
    "gradient_check",
    "logaddexp",
    "rnnt_grad_check",
    "rnnt_loss",
    "rnnt_loss_batch",
    "rnnt_loss_bruteforce",
]

BLANK = 0
NEG_INF = -np.inf
BRUTEFORCE_MAX_STEPS = 20


def logaddexp(a, b):
    """Elementwise log(exp(a) + exp(b)); -inf is absorbing on both sides."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    hi = np.maximum(a, b)
    lo = np.minimum(a, b)
    with np.errstate(invalid="ignore"):
        out = hi + np.log1p(np.exp(lo - hi))
    return np.where(np.isneginf(hi), NEG_INF, out)


def _check_labels(labels, vocab):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels == BLANK):
        raise ValueError("label sequence contains the blank id")
    if np.any(labels < 0) or np.any(labels >= vocab):
        raise ValueError(f"label id out of range for vocabulary of {vocab}")
    return labels


@dataclass
class RnntPosteriors:
    """Forward/backward log scores, log-likelihood and logit gradients for one lattice."""

    alpha: np.ndarray
    beta: np.ndarray
    grad: np.ndarray
    log_likelihood: float
    feasible: bool = True


def rnnt_loss_batch(logits, labels, frame_lengths, label_lengths):
    """Batched transducer loss.

    Parameters
    ----------
    logits : (B, T, U + 1, V) array
        Padded joint-network outputs.
    labels : (B, U) int array
        Padded targets; entries past ``label_lengths[b]`` are ignored.
    frame_lengths, label_lengths : (B,) int arrays

    Returns
    -------
    losses : (B,) array of ``-log P(y|x)``
    grads : (B, T, U + 1, V) array of ``d loss_b / d logits_b``; zero outside
        each utterance's lattice.
    alpha, beta : (B, T, U + 1) log forward / backward scores.
    """
    logits = np.asarray(logits, dtype=np.float64)
    B, T, U1, V = logits.shape
    frame_lengths = np.asarray(frame_lengths, dtype=np.int64)
    label_lengths = np.asarray(label_lengths, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64).reshape(B, -1)
    if np.any(label_lengths > U1 - 1) or np.any(frame_lengths > T):
        raise ValueError("lengths exceed the lattice dimensions")
    if np.any(frame_lengths < 1):
        raise ValueError("every utterance needs at least one frame")
    padded = np.ones((B, max(U1 - 1, 0)), dtype=np.int64)
    for b in range(B):
        padded[b, : label_lengths[b]] = _check_labels(labels[b, : label_lengths[b]], V)
    labels = padded

    lp = log_softmax(logits)
    lp_blank = lp[..., BLANK]
    # lp_emit[b, t, u] = log P(y_{u+1} | t, u)
    lp_emit = np.take_along_axis(lp[:, :, :-1, :], labels[:, None, :, None], axis=3)[..., 0]

    tt = np.arange(T)[None, :, None]
    uu = np.arange(U1)[None, None, :]
    valid = (tt < frame_lengths[:, None, None]) & (uu <= label_lengths[:, None, None])
    terminal = (tt == frame_lengths[:, None, None] - 1) & (uu == label_lengths[:, None, None])

    alpha = np.full((B, T, U1), NEG_INF)
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                alpha[:, 0, 0] = 0.0
                continue
            from_blank = alpha[:, t - 1, u] + lp_blank[:, t - 1, u] if t > 0 else NEG_INF
            from_emit = alpha[:, t, u - 1] + lp_emit[:, t, u - 1] if u > 0 else NEG_INF
            alpha[:, t, u] = logaddexp(from_blank, from_emit)
    alpha = np.where(valid, alpha, NEG_INF)

    beta = np.full((B, T, U1), NEG_INF)
    for t in range(T - 1, -1, -1):
        for u in range(U1 - 1, -1, -1):
            to_blank = beta[:, t + 1, u] + lp_blank[:, t, u] if t + 1 < T else NEG_INF
            to_emit = beta[:, t, u + 1] + lp_emit[:, t, u] if u + 1 < U1 else NEG_INF
            val = logaddexp(to_blank, to_emit)
            val = np.where(terminal[:, t, u], lp_blank[:, t, u], val)
            beta[:, t, u] = np.where(valid[:, t, u], val, NEG_INF)

    log_like = beta[:, 0, 0]
    losses = -log_like
    feasible = np.isfinite(log_like)

    # Transition posteriors -> d loss / d log-prob; -inf cells contribute zero.
    ll = np.where(feasible, log_like, 0.0)[:, None, None]
    beta_next_t = np.concatenate([beta[:, 1:, :], np.full((B, 1, U1), NEG_INF)], axis=1)
    beta_next_t = np.where(terminal, 0.0, beta_next_t)
    beta_next_u = np.concatenate([beta[:, :, 1:], np.full((B, T, 1), NEG_INF)], axis=2)
    with np.errstate(invalid="ignore", over="ignore"):
        post_blank = np.exp(alpha + lp_blank + beta_next_t - ll)
        post_emit = np.exp(alpha + np.concatenate([lp_emit, np.zeros((B, T, 1))], axis=2)
                           + beta_next_u - ll)
    post_blank = np.nan_to_num(post_blank, nan=0.0) * feasible[:, None, None]
    post_emit = np.nan_to_num(post_emit, nan=0.0) * feasible[:, None, None]

    emit_idx = np.concatenate([labels, np.ones((B, 1), np.int64)], axis=1)
    onehot = np.arange(V) == emit_idx[:, None, :, None]
    dlp = -post_emit[..., None] * onehot
    dlp[..., BLANK] -= post_blank
    # softmax Jacobian: d/dz_k = g_k - p_k * sum_j g_j
    grads = dlp - np.exp(lp) * dlp.sum(axis=-1, keepdims=True)
    return losses, grads, alpha, beta


def rnnt_loss(logits, labels):
    """Loss and posteriors for a single ``(T, U + 1, V)`` lattice.

    An infeasible lattice (zero frames with labels pending) yields
    ``loss = inf`` and ``posteriors.feasible = False`` rather than raising.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 3:
        raise ValueError("lattice must be (T, U + 1, V)")
    T, U1, V = logits.shape
    if U1 != len(labels) + 1:
        raise ValueError(f"lattice has {U1 - 1} label positions, got {len(labels)} labels")
    if T == 0:
        empty = np.zeros((0, U1))
        if len(labels):
            return math.inf, RnntPosteriors(empty, empty, np.zeros_like(logits), -math.inf, False)
        raise ValueError("empty lattice")
    losses, grads, alpha, beta = rnnt_loss_batch(logits[None], labels[None], [T], [len(labels)])
    loss = float(losses[0])
    return loss, RnntPosteriors(alpha[0], beta[0], grads[0], -loss, bool(np.isfinite(loss)))


def _enumerate_rnnt_alignments(T, U):
    """Every sequence with ``T`` blanks and ``U`` labels, as tuples of booleans (True = label)."""
    for label_slots in itertools.combinations(range(T + U), U):
        slots = set(label_slots)
        yield tuple(i in slots for i in range(T + U))


def rnnt_loss_bruteforce(logits, labels, return_count=False):
    """``-log P(y|x)`` by summing over every alignment explicitly.

    All ``C(T + U, U)`` blank/label orderings are enumerated; orderings whose
    last symbol is a label would emit after the final frame and have zero
    probability.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = [int(v) for v in np.asarray(labels).reshape(-1)]
    T, U1, V = logits.shape
    U = len(labels)
    if U1 != U + 1:
        raise ValueError("lattice/label length mismatch")
    if T + U > BRUTEFORCE_MAX_STEPS:
        raise ValueError(f"brute force limited to T + U <= {BRUTEFORCE_MAX_STEPS}")
    logz = np.log(np.exp(logits - logits.max(-1, keepdims=True)).sum(-1)) + logits.max(-1)
    path_logs = []
    count = 0
    for alignment in _enumerate_rnnt_alignments(T, U):
        count += 1
        t = u = 0
        total = 0.0
        for is_label in alignment:
            if t >= T:
                total = -math.inf
                break
            if is_label:
                total += logits[t, u, labels[u]] - logz[t, u]
                u += 1
            else:
                total += logits[t, u, BLANK] - logz[t, u]
                t += 1
        path_logs.append(total)
    finite = [p for p in path_logs if p != -math.inf]
    if not finite:
        loss = math.inf
    else:
        m = max(finite)
        loss = -(m + math.log(math.fsum(math.exp(p - m) for p in finite)))
    return (loss, count) if return_count else loss


def _shift(a, k, fill=NEG_INF):
    """Shift a 1-D array right by ``k`` (left when negative), filling the gap."""
    out = np.full_like(a, fill)
    if k > 0:
        out[k:] = a[:-k] if k < len(a) else a[:0]
    elif k < 0:
        out[:k] = a[-k:] if -k < len(a) else a[:0]
    return out


def ctc_loss(logits, labels):
    """CTC loss over ``(T, V)`` frame logits; returns ``(loss, d loss / d logits)``.

    When ``T`` is shorter than the minimum alignment length (labels plus one
    blank between each repeated pair) the loss is ``inf`` and the gradient zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ValueError("ctc needs a (T >= 1, V) matrix")
    T, V = logits.shape
    labels = _check_labels(labels, V)
    lp = log_softmax(logits)
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    S = len(ext)
    # skip transition s-2 -> s allowed onto a label that differs from the previous label
    can_skip = np.zeros(S, dtype=bool)
    can_skip[3::2] = labels[1:] != labels[:-1]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        skip = np.where(can_skip, _shift(prev, 2), NEG_INF)
        alpha[t] = logaddexp(logaddexp(prev, _shift(prev, 1)), skip) + lp[t, ext]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    skip_from = _shift(can_skip, -2, False)
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        skip = np.where(skip_from, _shift(nxt, -2), NEG_INF)
        beta[t] = logaddexp(logaddexp(nxt, _shift(nxt, -1)), skip) + lp[t, ext]

    log_like = float(logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2] if S > 1 else NEG_INF))
    if not np.isfinite(log_like):
        return math.inf, np.zeros_like(logits)
    # alpha*beta double counts the frame emission, remove it once
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - lp[:, ext] - log_like)
    occ = np.nan_to_num(occ, nan=0.0)
    dlp = np.zeros_like(lp)
    for s in range(S):
        dlp[:, ext[s]] -= occ[:, s]
    grads = dlp - np.exp(lp) * dlp.sum(axis=-1, keepdims=True)
    return -log_like, grads


def _ctc_collapse(path):
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != BLANK:
            out.append(sym)
        prev = sym
    return tuple(out)


def ctc_loss_bruteforce(logits, labels):
    """Sum over every length-``T`` frame labeling that collapses to ``labels``."""
    logits = np.asarray(logits, dtype=np.float64)
    T, V = logits.shape
    if V ** T > 10 ** 6:
        raise ValueError("brute force CTC limited to V**T <= 1e6")
    target = tuple(int(v) for v in np.asarray(labels).reshape(-1))
    logz = np.log(np.exp(logits - logits.max(-1, keepdims=True)).sum(-1)) + logits.max(-1)
    terms = []
    for path in itertools.product(range(V), repeat=T):
        if _ctc_collapse(path) == target:
            terms.append(sum(logits[t, k] - logz[t] for t, k in enumerate(path)))
    if not terms:
        return math.inf
    m = max(terms)
    return -(m + math.log(math.fsum(math.exp(v - m) for v in terms)))


def gradient_check(loss_fn, x, analytic, epsilon=1e-4, floor=1e-6):
    """Largest relative error between ``analytic`` and central differences of ``loss_fn`` at ``x``.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries that are zero analytically from dividing by round-off.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + epsilon
        up = loss_fn(x)
        flat[i] = keep - epsilon
        down = loss_fn(x)
        flat[i] = keep
        numeric = (up - down) / (2 * epsilon)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst


def rnnt_grad_check(logits, labels, epsilon=1e-4):
    """Max relative error of :func:`rnnt_loss` logit gradients against finite differences."""
    _, post = rnnt_loss(logits, labels)
    return gradient_check(lambda z: rnnt_loss(z, labels)[0], logits, post.grad, epsilon)
