"""Contextual biasing: a subword trie with score-removing failure arcs.

Phrases are spelled into subword units and merged into a deterministic,
prefix-sharing automaton. Every matching arc adds a fixed boost; leaving a
partial match takes a failure arc back to the start that subtracts exactly
what the unfinished match had added. Completed phrases keep their boost.

:class:`ShallowFusion` adapts a compiled automaton to the decoder's fusion
hook (``start``, ``step(state, label)`` and ``final(state)``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

logger = logging.getLogger(__name__)

__all__ = [
    "ContextFST",
    "FusionParams",
    "OOVError",
    "ShallowFusion",
    "bias_transition",
    "compile_context",
    "dump_fst",
    "fused_score",
    "read_inventory",
    "read_phrases",
    "reference_score",
    "spell",
]

START = 0


class OOVError(ValueError):
    """No phrase could be spelled with the subword inventory."""


@dataclass(frozen=True)
class FusionParams:
    weight: float = 1.0
    per_unit_boost: float = 1.0

    def __post_init__(self):
        if not (self.weight >= 0 and math.isfinite(self.weight)):
            raise ValueError("fusion weight must be finite and >= 0")
        if not (self.per_unit_boost > 0 and math.isfinite(self.per_unit_boost)):
            raise ValueError("per_unit_boost must be finite and > 0")


@dataclass(frozen=True)
class ContextFST:
    """Compiled context automaton. State 0 is the start state.

    ``arcs[s]`` maps a label to its target; every matching arc carries
    ``boost``. ``accumulated[s]`` is the boost gathered on the path to ``s``
    and ``failure[s]`` the (non-positive) weight of the backoff arc to start.
    """

    arcs: Tuple[Mapping[int, int], ...]
    accumulated: Tuple[float, ...]
    failure: Tuple[float, ...]
    final: frozenset
    boost: float
    phrases: Tuple[str, ...] = ()
    oov: Tuple[str, ...] = ()

    @property
    def num_states(self) -> int:
        return len(self.arcs)

    def transition(self, state: int, label: int) -> Tuple[int, float]:
        return bias_transition(self, state, label)


def spell(phrase: str, inventory: Mapping[str, Sequence[int]]):
    """Unit sequence for a (possibly multi-word) phrase, or ``None`` if any word is OOV."""
    units: List[int] = []
    for word in phrase.split():
        if word not in inventory:
            return None
        units.extend(int(k) for k in inventory[word])
    return tuple(units) if units else None


def compile_context(phrases: Iterable[str], inventory: Mapping[str, Sequence[int]],
                    per_unit_boost: float = 1.0) -> ContextFST:
    """Build the biasing automaton for ``phrases`` spelled by ``inventory``.

    OOV phrases are skipped with a warning; an error is raised if none remain.
    """
    if not (per_unit_boost > 0 and math.isfinite(per_unit_boost)):
        raise ValueError("per_unit_boost must be finite and > 0")
    phrases = [p.strip() for p in phrases if p.strip()]
    arcs: List[Dict[int, int]] = [{}]
    accumulated = [0.0]
    final = set()
    kept, oov = [], []
    for phrase in phrases:
        units = spell(phrase, inventory)
        if units is None:
            oov.append(phrase)
            continue
        kept.append(phrase)
        s = START
        for k in units:
            nxt = arcs[s].get(k)
            if nxt is None:
                nxt = len(arcs)
                arcs[s][k] = nxt
                arcs.append({})
                accumulated.append(accumulated[s] + per_unit_boost)
            s = nxt
        final.add(s)
    if not kept:
        raise OOVError(f"no phrase is spellable with the inventory: {oov}")
    if oov:
        logger.warning("skipping %d OOV phrase(s): %s", len(oov), ", ".join(oov))
    # boost gathered since the last completed phrase on the path; completed
    # prefixes keep theirs, so only this part is removed on failure
    since_final = [0.0] * len(arcs)
    order = [START]
    for s in order:
        for nxt in arcs[s].values():
            since_final[nxt] = (0.0 if s in final else since_final[s]) + per_unit_boost
            order.append(nxt)
    failure = tuple(0.0 if s in final or s == START else -since_final[s] for s in range(len(arcs)))
    return ContextFST(
        arcs=tuple(dict(a) for a in arcs),
        accumulated=tuple(accumulated),
        failure=failure,
        final=frozenset(final),
        boost=per_unit_boost,
        phrases=tuple(kept),
        oov=tuple(oov),
    )


def bias_transition(fst: ContextFST, state: int, label: int) -> Tuple[int, float]:
    """Follow ``label`` from ``state``; returns ``(next_state, delta_score)``."""
    if not 0 <= state < fst.num_states:
        raise ValueError(f"unknown context state {state}")
    nxt = fst.arcs[state].get(label)
    if nxt is not None:
        return nxt, fst.boost
    if state == START:
        return START, 0.0
    delta = fst.failure[state]
    nxt = fst.arcs[START].get(label)
    if nxt is None:
        return START, delta
    return nxt, delta + fst.boost


def fused_score(base_logprob: float, delta_score: float, weight: float) -> float:
    if weight < 0:
        raise ValueError("fusion weight must be >= 0")
    return base_logprob + weight * delta_score


class ShallowFusion:
    """Decoder hook adding ``weight * delta`` for every emitted label."""

    def __init__(self, fst: ContextFST, weight: float = 1.0):
        if weight < 0:
            raise ValueError("fusion weight must be >= 0")
        self.fst = fst
        self.weight = weight
        self.start = START

    def step(self, state: int, label: int) -> Tuple[int, float]:
        nxt, delta = bias_transition(self.fst, state, label)
        return nxt, self.weight * delta

    def final(self, state: int) -> float:
        # an utterance that ends inside an unfinished phrase loses that boost
        return self.weight * self.fst.failure[state]


def reference_score(labels: Sequence[int], spellings: Iterable[Sequence[int]],
                    boost: float) -> float:
    """Independent scorer with the automaton's matching rules, using only prefix tests.

    Greedy left-to-right matching of phrase spellings: extend the current
    match while it is a prefix of some spelling, bank it on completion, and on
    a mismatch drop the unbanked part and retry the label as a new match.
    """
    spellings = [tuple(s) for s in spellings]
    prefixes = {s[:i] for s in spellings for i in range(1, len(s) + 1)}
    complete = set(spellings)
    total = 0.0
    cur: Tuple[int, ...] = ()
    banked = 0
    for k in labels:
        cand = cur + (k,)
        if cand in prefixes:
            cur = cand
            total += boost
        else:
            total -= boost * (len(cur) - banked)
            banked = 0
            if cur and (k,) in prefixes:
                cur = (k,)
                total += boost
            else:
                cur = ()
        if cur in complete:
            banked = len(cur)
    return total


def read_inventory(path, units: Sequence[str] = ()) -> Dict[str, Tuple[int, ...]]:
    """``word<TAB>unit unit ...`` lines.

    Units are integer ids, or symbols from ``units`` (symbol ``i`` has id ``i + 1``).
    """
    ids = {u: i + 1 for i, u in enumerate(units)}
    inventory = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                word, spelled = line.split("\t")
                inventory[word] = tuple(ids[u] if u in ids else int(u) for u in spelled.split())
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: bad inventory line {line!r}") from exc
    return inventory


def read_phrases(path) -> List[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def dump_fst(fst: ContextFST) -> str:
    """Text dump: ``src label weight dst`` arcs, ``src phi weight 0`` failures, ``final s``."""
    lines = []
    for s, arcs in enumerate(fst.arcs):
        for label in sorted(arcs):
            lines.append(f"{s} {label} {fst.boost:.6g} {arcs[label]}")
        if s != START:
            lines.append(f"{s} phi {fst.failure[s]:.6g} {START}")
    lines.extend(f"final {s}" for s in sorted(fst.final))
    return "\n".join(lines) + "\n"
