"""Prediction/joint networks and frame-synchronous transducer beam search.

Prediction-network outputs are memoized per label prefix in a
:class:`PredictionCache`. Hypotheses keep a handle to their parent's entry,
so even with caching disabled a new prefix costs one network step; the cache
removes the recomputation for prefixes that are reached again (another
frame, another parent, a merged hypothesis).
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .nn import ConfigError, LstmLayerWeights, LstmState, log_softmax, lstm_step

__all__ = [
    "DecodeParams",
    "Hypothesis",
    "JointNetwork",
    "PredEntry",
    "PredictionCache",
    "PredictionConfig",
    "PredictionNetwork",
    "decode_step",
    "decode_utterance",
    "finalize_beam",
    "format_nbest",
    "greedy_decode",
    "initial_beam",
    "pred_forward",
]

BLANK = 0
SOS = 0  # the embedding row for <sos>; blank is never fed to the network


@dataclass(frozen=True)
class PredictionConfig:
    vocab_size: int
    embed_dim: int = 16
    num_layers: int = 2
    units: int = 32
    projection_dim: int = 16
    layer_norm: bool = True

    def __post_init__(self):
        if self.vocab_size < 1 or self.num_layers < 1 or self.embed_dim < 1:
            raise ConfigError("prediction network dimensions must be positive")

    @property
    def output_dim(self) -> int:
        return self.projection_dim or self.units

    def layer_input_dims(self) -> List[int]:
        return [self.embed_dim] + [self.output_dim] * (self.num_layers - 1)


class PredictionNetwork:
    """Label-history network: embedding lookup followed by an LSTM stack."""

    def __init__(self, config: PredictionConfig, embedding, layers: Sequence[LstmLayerWeights]):
        if embedding.shape != (config.vocab_size + 1, config.embed_dim):
            raise ConfigError(f"embedding shape {embedding.shape} does not fit config")
        self.config = config
        self.embedding = embedding
        self.layers = tuple(layers)

    def start_state(self, dtype=np.float32) -> Tuple[LstmState, ...]:
        return tuple(LstmState.zeros(w, dtype) for w in self.layers)

    def step(self, label: int, state):
        if label < 0 or label > self.config.vocab_size:
            raise ValueError(f"label {label} outside the prediction vocabulary")
        x = self.embedding[label]
        new_state = []
        for w, s in zip(self.layers, state):
            x, s = lstm_step(x, s, w)
            new_state.append(s)
        return x, tuple(new_state)


class JointNetwork:
    """``logits = W_out tanh(W_enc e + W_pred g + b) + b_out``."""

    def __init__(self, w_enc, w_pred, bias, w_out, b_out):
        J = w_enc.shape[0]
        if w_pred.shape[0] != J or np.shape(bias) != (J,) or w_out.shape[1] != J:
            raise ConfigError("joint network shapes disagree")
        if np.shape(b_out) != (w_out.shape[0],):
            raise ConfigError("joint output bias does not match output layer")
        self.w_enc, self.w_pred, self.bias = w_enc, w_pred, bias
        self.w_out, self.b_out = w_out, b_out

    @property
    def vocab_size(self) -> int:
        return self.w_out.shape[0]

    def enc_part(self, enc):
        if np.shape(enc)[-1] != self.w_enc.shape[1]:
            raise ConfigError("encoder frame width does not match joint network")
        return self.w_enc @ enc + self.bias

    def pred_part(self, pred):
        if np.shape(pred)[-1] != self.w_pred.shape[1]:
            raise ConfigError("prediction output width does not match joint network")
        return self.w_pred @ pred

    def combine(self, enc_part, pred_part):
        return self.w_out @ np.tanh(enc_part + pred_part) + self.b_out

    def __call__(self, enc, pred):
        return self.combine(self.enc_part(enc), self.pred_part(pred))


class PredEntry(NamedTuple):
    state: tuple
    output: np.ndarray
    joint_part: np.ndarray


class PredictionCache:
    """Prefix-keyed LRU memo of prediction-network states.

    ``capacity=0`` disables memoization; ``steps`` counts network steps
    actually executed, ``hits``/``misses`` count lookups.
    """

    def __init__(self, network: PredictionNetwork, joint: Optional[JointNetwork] = None,
                 capacity: int = 4096):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.network = network
        self.joint = joint
        self.capacity = capacity
        self._entries: "OrderedDict[tuple, PredEntry]" = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.steps = 0

    def __len__(self):
        return len(self._entries)

    def __contains__(self, prefix):
        return tuple(prefix) in self._entries

    def reset_counters(self):
        self.hits = self.misses = self.steps = 0

    def _extend(self, parent: Optional[PredEntry], label: int) -> PredEntry:
        state = parent.state if parent is not None else self.network.start_state()
        out, state = self.network.step(label, state)
        self.steps += 1
        jp = self.joint.pred_part(out) if self.joint is not None else None
        return PredEntry(state, out, jp)

    def _store(self, prefix, entry):
        if self.capacity == 0:
            return
        self._entries[prefix] = entry
        self._entries.move_to_end(prefix)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def lookup(self, prefix: Sequence[int], parent: Optional[PredEntry] = None) -> PredEntry:
        """Entry for ``prefix``; ``parent`` (the entry for ``prefix[:-1]``) saves recomputation."""
        prefix = tuple(prefix)
        entry = self._entries.get(prefix)
        if entry is not None:
            self.hits += 1
            self._entries.move_to_end(prefix)
            return entry
        self.misses += 1
        if parent is not None and prefix:
            entry = self._extend(parent, prefix[-1])
        else:
            base, cut = None, 0
            for cut in range(len(prefix) - 1, -1, -1):
                base = self._entries.get(prefix[:cut])
                if base is not None:
                    break
            if base is None:
                base, cut = self._extend(None, SOS), 0
            entry = base
            for k in prefix[cut:]:
                entry = self._extend(entry, k)
        self._store(prefix, entry)
        return entry


def pred_forward(network: PredictionNetwork, prefix: Sequence[int],
                 cache: Optional[PredictionCache] = None):
    """Prediction-network output after consuming ``<sos>, prefix``; returns ``(output, state)``."""
    if any(int(k) == BLANK for k in prefix):
        raise ValueError("blank is never fed to the prediction network")
    if cache is None:
        cache = PredictionCache(network, capacity=0)
    entry = cache.lookup(prefix)
    return entry.output, entry.state


FusionHook = Callable[[int, int], Tuple[int, float]]


@dataclass
class DecodeParams:
    beam_width: int = 4
    max_expansions: int = 3
    nbest: int = 4
    cache_capacity: int = 4096

    def __post_init__(self):
        if self.beam_width < 1 or self.max_expansions < 0 or self.nbest < 1:
            raise ValueError("beam_width/nbest must be >= 1 and max_expansions >= 0")


@dataclass
class Hypothesis:
    prefix: Tuple[int, ...]
    log_score: float
    pred: Optional[PredEntry] = field(default=None, repr=False)
    parent: Optional[PredEntry] = field(default=None, repr=False)
    context_state: int = 0
    boost_accum: float = 0.0


def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def _rank_key(h: Hypothesis):
    return (-h.log_score, len(h.prefix), h.prefix)


def decode_step(beam: Sequence[Hypothesis], enc_frame, model, params: DecodeParams,
                cache: PredictionCache, fusion=None) -> List[Hypothesis]:
    """Consume one encoder frame.

    Each round expands every active hypothesis by blank (which finishes the
    frame) and by every label (which stays in the frame); the best
    ``beam_width`` candidates over finished and still-active hypotheses are
    kept. Labels per hypothesis per frame are capped at ``max_expansions``.
    Finished hypotheses with equal prefixes are merged by log-sum-exp.

    ``fusion``, when given, has ``step(context_state, label) -> (state, score)``
    and its score is added on every label emission.
    """
    if not beam:
        raise ValueError("beam must not be empty")
    joint = model.joint
    V = joint.vocab_size
    W = params.beam_width
    enc_part = joint.enc_part(enc_frame)
    # without memoization a hypothesis keeps only its parent's state and pays
    # one network step every time it is scored
    memo = cache.capacity > 0
    finished: Dict[tuple, Hypothesis] = {}
    active = list(beam)
    for round_ in range(params.max_expansions + 1):
        extensions = []
        for h in active:
            entry = h.pred if h.pred is not None else cache.lookup(h.prefix, h.parent)
            logp = log_softmax(joint.combine(enc_part, entry.joint_part))
            score = h.log_score + float(logp[BLANK])
            old = finished.get(h.prefix)
            if old is None:
                finished[h.prefix] = replace(h, log_score=score, pred=entry if memo else None,
                                             parent=None if memo else h.parent)
            else:
                finished[h.prefix] = replace(old, log_score=_logaddexp(old.log_score, score))
            if round_ == params.max_expansions:
                continue
            for k in range(1, V):
                ctx, boost = h.context_state, h.boost_accum
                inc = 0.0
                if fusion is not None:
                    ctx, inc = fusion.step(ctx, k)
                extensions.append(Hypothesis(
                    h.prefix + (k,), h.log_score + float(logp[k]) + inc,
                    None, entry, ctx, boost + inc,
                ))
        pool = [(h, True) for h in finished.values()] + [(h, False) for h in extensions]
        pool.sort(key=lambda item: _rank_key(item[0]))
        finished = {h.prefix: h for h, done in pool[:W] if done}
        active = [h for h, done in pool[:W] if not done]
        if not active:
            break
    return sorted(finished.values(), key=_rank_key)


def initial_beam(fusion=None) -> List[Hypothesis]:
    start = fusion.start if fusion is not None else 0
    return [Hypothesis((), 0.0, None, None, start, 0.0)]


def decode_utterance(features, model, params: Optional[DecodeParams] = None,
                     cache: Optional[PredictionCache] = None, fusion=None,
                     on_partial: Optional[Callable[[int, Hypothesis], None]] = None):
    """Stream an utterance through encoder and beam search.

    Returns the N-best list as ``(labels, score)`` pairs, best first.
    ``on_partial(j, best)`` is called after each reduced frame ``j``.
    """
    params = params or DecodeParams()
    feats = model.frontend(features)
    if feats.T == 0:
        raise ValueError("empty feature sequence")
    if cache is None:
        cache = PredictionCache(model.prediction, model.joint, params.cache_capacity)
    enc = model.encoder
    state = enc.init_state()
    beam = initial_beam(fusion)
    j = 0

    def consume(reduced):
        nonlocal beam, j
        out = enc.encode_upper(reduced, state)
        beam = decode_step(beam, out, model, params, cache, fusion)
        if on_partial is not None:
            on_partial(j, beam[0])
        j += 1

    for frame in feats.frames:
        reduced = enc.encode_lower(frame, state)
        if reduced is not None:
            consume(reduced)
    tail = enc.flush(state)
    if tail is not None:
        consume(tail)
    return finalize_beam(beam, params, fusion)


def finalize_beam(beam: Sequence[Hypothesis], params: DecodeParams, fusion=None):
    """End-of-utterance N-best as ``(labels, score)``, applying ``fusion.final`` if defined."""
    if fusion is not None and hasattr(fusion, "final"):
        beam = sorted((replace(h, log_score=h.log_score + fusion.final(h.context_state)) for h in beam),
                      key=_rank_key)
    return [(h.prefix, h.log_score) for h in beam[: params.nbest]]


def greedy_decode(features, model, max_expansions: int = 3) -> Tuple[Tuple[int, ...], float]:
    """Argmax path: emit the best label while it beats blank, at most ``max_expansions`` per frame."""
    feats = model.frontend(features)
    enc = model.encoder
    state = enc.init_state()
    net, joint = model.prediction, model.joint
    out, pstate = net.step(SOS, net.start_state())
    prefix: List[int] = []
    score = 0.0
    frames = []
    for f in feats.frames:
        reduced = enc.encode_lower(f, state)
        if reduced is not None:
            frames.append(enc.encode_upper(reduced, state))
    tail = enc.flush(state)
    if tail is not None:
        frames.append(enc.encode_upper(tail, state))
    for e in frames:
        for n in range(max_expansions + 1):
            logp = log_softmax(joint(e, out))
            k = int(np.argmax(logp)) if n < max_expansions else BLANK
            score += float(logp[k])
            if k == BLANK:
                break
            prefix.append(k)
            out, pstate = net.step(k, pstate)
    return tuple(prefix), score


def format_nbest(nbest, units: Sequence[str] = ()) -> str:
    """One line per hypothesis: ``rank<TAB>score<TAB>ids<TAB>text``."""
    lines = []
    for rank, (labels, score) in enumerate(nbest, 1):
        ids = " ".join(str(k) for k in labels)
        lines.append(f"{rank}\t{score:.6f}\t{ids}\t{detokenize(labels, units)}")
    return "\n".join(lines)


def detokenize(labels, units: Sequence[str] = ()) -> str:
    """Map ids to unit strings; units starting with U+2581 begin a new word."""
    if not units:
        return " ".join(str(k) for k in labels)
    pieces = [units[k - 1] for k in labels]
    if any(p.startswith("▁") for p in pieces):
        return "".join(pieces).replace("▁", " ").strip()
    return " ".join(pieces)
