"""Synthetic toy recognition task.

Each subword unit owns a fixed random feature vector. An utterance is a
random unit sequence; every unit is rendered as its vector repeated for a
random number of frames, plus Gaussian noise. The embedding table depends
only on ``ToyTaskSpec.seed`` so train/dev/test streams share one "acoustics".
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..nn import FeatureSequence

__all__ = ["BiasTask", "ToyTaskSpec", "gen_bias_task", "gen_toy_data", "toy_embeddings"]

Utterance = Tuple[FeatureSequence, Tuple[int, ...]]


@dataclass(frozen=True)
class ToyTaskSpec:
    vocab_size: int = 8
    feature_dim: int = 16
    min_labels: int = 1
    max_labels: int = 6
    min_frames: int = 2
    max_frames: int = 4
    noise: float = 0.4
    seed: int = 0
    frame_period: float = 0.03

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("toy task needs at least 2 units")
        if not 0 <= self.min_labels <= self.max_labels:
            raise ValueError("bad label-length range")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError("bad frames-per-unit range")


def toy_embeddings(spec: ToyTaskSpec) -> np.ndarray:
    """Row ``k`` is the feature vector of unit ``k + 1``."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xE3B]))
    return rng.normal(size=(spec.vocab_size, spec.feature_dim))


def _draw_labels(rng, spec, n):
    # no immediate repeats: two equal adjacent units would be acoustically indistinguishable
    labels = [int(rng.integers(1, spec.vocab_size + 1))] if n else []
    while len(labels) < n:
        k = int(rng.integers(1, spec.vocab_size))
        labels.append(k if k < labels[-1] else k + 1)
    return labels


def render(labels: Sequence[int], spec: ToyTaskSpec, rng, emb=None, noise=None) -> FeatureSequence:
    """Frames for ``labels``; ``noise`` is a scalar or one level per unit (default ``spec.noise``)."""
    if emb is None:
        emb = toy_embeddings(spec)
    levels = np.broadcast_to(spec.noise if noise is None else noise, (len(labels),))
    frames = []
    for k, level in zip(labels, levels):
        dur = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        frames.append(emb[k - 1][None, :] + level * rng.normal(size=(dur, spec.feature_dim)))
    if not frames:
        frames.append(spec.noise * rng.normal(size=(spec.min_frames, spec.feature_dim)))
    return FeatureSequence(np.concatenate(frames).astype(np.float32), spec.frame_period)


def gen_toy_data(spec: ToyTaskSpec, count: int, stream: int = 0,
                 max_noise: float = None) -> List[Utterance]:
    """``count`` utterances from the independent random ``stream`` of this task.

    With ``max_noise`` each utterance draws its noise level from
    ``[spec.noise, max_noise]`` (augmentation for a noise-robust recognizer).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, stream]))
    emb = toy_embeddings(spec)
    data = []
    for _ in range(count):
        n = int(rng.integers(spec.min_labels, spec.max_labels + 1))
        labels = _draw_labels(rng, spec, n)
        noise = None if max_noise is None else rng.uniform(spec.noise, max_noise)
        data.append((render(labels, spec, rng, emb, noise), tuple(labels)))
    return data


@dataclass
class BiasTask:
    """Biasing evaluation task built on a toy task.

    ``names`` maps a name word to its unit spelling; any particular spelling
    is rare in random toy text. Phrase-bearing utterances speak one name with
    heavy noise (``name_noise``) inside clean context, so the recognizer hears
    it poorly. ``train`` is noise-augmented toy data for a recognizer whose
    posteriors stay calibrated on noisy frames. The ``dev_*`` splits are for
    tuning the fusion weight.
    """

    names: Dict[str, Tuple[int, ...]]
    train: List[Utterance]
    with_phrase: List[Utterance]
    without_phrase: List[Utterance]
    dev_with_phrase: List[Utterance]
    dev_without_phrase: List[Utterance]


def gen_bias_task(spec: ToyTaskSpec, n_names: int = 6, name_len: Tuple[int, int] = (3, 4),
                  count: int = 200, train_count: int = 2000, name_noise: float = 1.5,
                  max_train_noise: float = 1.5, stream: int = 100) -> BiasTask:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2, stream]))
    emb = toy_embeddings(spec)
    names: Dict[str, Tuple[int, ...]] = {}
    while len(names) < n_names:
        spelling = tuple(_draw_labels(rng, spec, int(rng.integers(name_len[0], name_len[1] + 1))))
        names.setdefault("".join(chr(ord("a") + k - 1) for k in spelling), spelling)
    words = list(names)

    def phrase_set(n):
        out = []
        for _ in range(n):
            spelling = names[words[int(rng.integers(len(words)))]]
            # context must not repeat an edge unit (adjacent repeats are inaudible)
            while True:
                left = _draw_labels(rng, spec, int(rng.integers(0, 3)))
                right = _draw_labels(rng, spec, int(rng.integers(0, 3)))
                if (not left or left[-1] != spelling[0]) and (not right or right[0] != spelling[-1]):
                    break
            labels = tuple(left) + spelling + tuple(right)
            noise = [spec.noise] * len(left) + [name_noise] * len(spelling) + [spec.noise] * len(right)
            out.append((render(labels, spec, rng, emb, noise), labels))
        return out

    return BiasTask(
        names=names,
        train=gen_toy_data(spec, train_count, stream=stream + 1, max_noise=max_train_noise),
        with_phrase=phrase_set(count),
        without_phrase=gen_toy_data(spec, count, stream=stream + 2),
        dev_with_phrase=phrase_set(count),
        dev_without_phrase=gen_toy_data(spec, count, stream=stream + 3),
    )
