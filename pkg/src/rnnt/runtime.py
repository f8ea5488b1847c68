"""Streaming orchestration and real-time-factor measurement.

Recognition runs as three stages: the encoder layers before time reduction,
the encoder layers after it, and prediction/joint/beam search. In pipelined
mode each stage owns a thread and hands work to the next through a bounded
FIFO, so a slow stage applies backpressure instead of buffering without
limit. Sequential mode calls the very same stage functions inline, which is
the oracle the pipelined output must match bit for bit.
"""
from __future__ import annotations

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .decoder import DecodeParams, PredictionCache, decode_step, finalize_beam, initial_beam
from .nn import FeatureSequence

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "RtReport",
    "RtRow",
    "STAGES",
    "measure_rt",
    "nearest_rank",
    "run_pipeline",
]

STAGES = ("encoder-lower", "encoder-upper", "decoder")
_POLL = 0.05


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it and ``__cause__`` is the original error."""

    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"pipeline stage {stage!r} failed: {error!r}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    capacities: Tuple[int, int] = (8, 8)
    pipelined: bool = True

    def __post_init__(self):
        if len(self.capacities) != 2 or min(self.capacities) < 1:
            raise ValueError("need two queue capacities, each >= 1")


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ``ceil(pct/100 * n)``-th smallest value."""
    if not values:
        raise ValueError("percentile of an empty set")
    if not 0 < pct <= 100:
        raise ValueError("percentile must be in (0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass(frozen=True)
class RtRow:
    utt_id: str
    audio_s: float
    proc_s: float

    @property
    def rt(self) -> float:
        return self.proc_s / self.audio_s


@dataclass
class RtReport:
    rows: List[RtRow]
    busy: Dict[str, float] = field(default_factory=dict)
    wall_s: float = 0.0

    def __post_init__(self):
        if not self.rows:
            raise ValueError("RT report needs at least one utterance")

    @property
    def rts(self) -> List[float]:
        return [r.rt for r in self.rows]

    def percentile(self, pct: float) -> float:
        return nearest_rank(self.rts, pct)

    @property
    def rt90(self) -> float:
        return self.percentile(90)

    @property
    def mean_rt(self) -> float:
        return sum(self.rts) / len(self.rows)

    def to_text(self) -> str:
        lines = ["id\taudio_s\tproc_s\tRT"]
        lines += [f"{r.utt_id}\t{r.audio_s:.4f}\t{r.proc_s:.6f}\t{r.rt:.6f}" for r in self.rows]
        lines.append("")
        lines.append(f"utterances\t{len(self.rows)}")
        for pct in (50, 90, 99):
            lines.append(f"RT{pct}\t{self.percentile(pct):.6f}")
        lines.append(f"RT_mean\t{self.mean_rt:.6f}")
        if self.wall_s:
            lines.append(f"wall_s\t{self.wall_s:.6f}")
        for stage, secs in self.busy.items():
            lines.append(f"busy[{stage}]\t{secs:.6f}")
        return "\n".join(lines) + "\n"


def measure_rt(utterances: Iterable[Tuple[str, FeatureSequence]],
               engine: Callable[[FeatureSequence], object]) -> RtReport:
    """Time ``engine(features)`` per utterance with a monotonic clock."""
    rows = []
    for utt_id, feats in utterances:
        if feats.duration <= 0:
            raise ValueError(f"{utt_id}: zero-length audio")
        start = time.perf_counter()
        engine(feats)
        rows.append(RtRow(str(utt_id), feats.duration, time.perf_counter() - start))
    if not rows:
        raise ValueError("no utterances to measure")
    if len(rows) < 10:
        logger.warning("RT percentiles over only %d utterances are unstable", len(rows))
    return RtReport(rows)


class _Stages:
    """The three stage bodies. Each keeps its own per-utterance state."""

    def __init__(self, model, params: DecodeParams, fusion=None):
        self.model = model
        self.params = params
        self.fusion = fusion
        self.busy = dict.fromkeys(STAGES, 0.0)

    # stage 1
    def lower(self, feats: FeatureSequence):
        enc = self.model.encoder
        state = enc.init_state()
        for frame in self.model.frontend(feats).frames:
            t0 = time.perf_counter()
            reduced = enc.encode_lower(frame, state)
            self.busy[STAGES[0]] += time.perf_counter() - t0
            if reduced is not None:
                yield reduced
        t0 = time.perf_counter()
        tail = enc.flush(state)
        self.busy[STAGES[0]] += time.perf_counter() - t0
        if tail is not None:
            yield tail

    # stage 2
    def upper_state(self):
        return self.model.encoder.init_state()

    def upper(self, reduced, state):
        t0 = time.perf_counter()
        out = self.model.encoder.encode_upper(reduced, state)
        self.busy[STAGES[1]] += time.perf_counter() - t0
        return out

    # stage 3
    def decoder_state(self):
        cache = PredictionCache(self.model.prediction, self.model.joint, self.params.cache_capacity)
        return [initial_beam(self.fusion), cache]

    def decode(self, enc_frame, state):
        t0 = time.perf_counter()
        state[0] = decode_step(state[0], enc_frame, self.model, self.params, state[1], self.fusion)
        self.busy[STAGES[2]] += time.perf_counter() - t0

    def finish(self, state):
        t0 = time.perf_counter()
        nbest = finalize_beam(state[0], self.params, self.fusion)
        self.busy[STAGES[2]] += time.perf_counter() - t0
        return nbest


def _run_sequential(utts, stages: _Stages):
    results, rows = [], []
    for utt_id, feats in utts:
        start = time.perf_counter()
        up, dec = stages.upper_state(), stages.decoder_state()
        for reduced in stages.lower(feats):
            stages.decode(stages.upper(reduced, up), dec)
        results.append((utt_id, stages.finish(dec)))
        rows.append(RtRow(utt_id, feats.duration, time.perf_counter() - start))
    return results, rows


_END = object()  # end of one utterance
_STOP = object()  # end of stream


def _run_threaded(utts, stages: _Stages, config: PipelineConfig):
    q1 = queue.Queue(config.capacities[0])
    q2 = queue.Queue(config.capacities[1])
    stop = threading.Event()
    failures: List[Tuple[str, BaseException]] = []
    starts: Dict[str, float] = {}
    results, rows = [], []

    def put(q, item):
        while not stop.is_set():
            try:
                q.put(item, timeout=_POLL)
                return True
            except queue.Full:
                continue
        return False

    def get(q):
        while not stop.is_set():
            try:
                return q.get(timeout=_POLL)
            except queue.Empty:
                continue
        return _STOP

    def guarded(name, body):
        def run():
            try:
                body()
            except BaseException as exc:  # noqa: BLE001 - reported with stage identity
                failures.append((name, exc))
                stop.set()
        return threading.Thread(target=run, name=f"rnnt-{name}", daemon=True)

    def stage_lower():
        for utt_id, feats in utts:
            starts[utt_id] = time.perf_counter()
            if not put(q1, (utt_id, feats.duration)):
                return
            for reduced in stages.lower(feats):
                if not put(q1, reduced):
                    return
            if not put(q1, _END):
                return
        put(q1, _STOP)

    def stage_upper():
        while True:
            head = get(q1)
            if head is _STOP:
                put(q2, _STOP)
                return
            put(q2, head)
            state = stages.upper_state()
            while True:
                item = get(q1)
                if item is _STOP:
                    return
                if item is _END:
                    put(q2, _END)
                    break
                if not put(q2, stages.upper(item, state)):
                    return

    def stage_decoder():
        while True:
            head = get(q2)
            if head is _STOP:
                return
            utt_id, duration = head
            state = stages.decoder_state()
            while True:
                item = get(q2)
                if item is _STOP:
                    return
                if item is _END:
                    break
                stages.decode(item, state)
            results.append((utt_id, stages.finish(state)))
            rows.append(RtRow(utt_id, duration, time.perf_counter() - starts[utt_id]))

    threads = [guarded(name, body) for name, body in zip(STAGES, (stage_lower, stage_upper, stage_decoder))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if failures:
        stage, exc = failures[0]
        raise PipelineError(stage, exc) from exc
    return results, rows


def run_pipeline(utterances: Iterable[Tuple[str, object]], model, params: Optional[DecodeParams] = None,
                 config: Optional[PipelineConfig] = None, fusion=None):
    """Recognize ``(id, features)`` pairs; returns ``([(id, nbest)], RtReport)``.

    ``nbest`` is the same ``[(labels, score)]`` list :func:`rnnt.decoder.decode_utterance`
    returns, and is bit-identical between pipelined and sequential mode.
    """
    params = params or DecodeParams()
    config = config or PipelineConfig()
    utts = []
    for utt_id, feats in utterances:
        if not isinstance(feats, FeatureSequence):
            feats = FeatureSequence(feats, model.config.frame_period)
        if feats.T == 0:
            raise ValueError(f"{utt_id}: empty feature sequence")
        utts.append((str(utt_id), feats))
    if not utts:
        raise ValueError("no utterances")
    if len({u for u, _ in utts}) != len(utts):
        raise ValueError("utterance ids must be unique")
    stages = _Stages(model, params, fusion)
    start = time.perf_counter()
    if config.pipelined:
        results, rows = _run_threaded(utts, stages, config)
    else:
        results, rows = _run_sequential(utts, stages)
    report = RtReport(rows, dict(stages.busy), time.perf_counter() - start)
    return results, report
