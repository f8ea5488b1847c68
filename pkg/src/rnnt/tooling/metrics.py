"""Word error rate with substitution/insertion/deletion counts."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

logger = logging.getLogger(__name__)

__all__ = ["WerReport", "edit_ops", "exact_match_rate", "word_error_rate"]


def edit_ops(ref: Sequence, hyp: Sequence) -> Tuple[int, int, int]:
    """Minimum-edit ``(substitutions, insertions, deletions)`` turning ``ref`` into ``hyp``.

    Among alignments with the fewest edits, prefers more substitutions.
    """
    n, m = len(ref), len(hyp)
    # each cell holds (edits, -substitutions, S, I, D); min() picks cheapest, then most S
    prev = [(j, 0, 0, j, 0) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0, 0, i)]
        for j in range(1, m + 1):
            e, ns, s, ins, d = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (e, ns, s, ins, d)
            else:
                diag = (e + 1, ns - 1, s + 1, ins, d)
            e, ns, s, ins, d = cur[j - 1]
            left = (e + 1, ns, s, ins + 1, d)
            e, ns, s, ins, d = prev[j]
            up = (e + 1, ns, s, ins, d + 1)
            cur.append(min(diag, left, up))
        prev = cur
    return prev[m][2:]


@dataclass(frozen=True)
class WerReport:
    substitutions: int
    insertions: int
    deletions: int
    ref_words: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        # an empty reference counts each inserted word against a denominator of 1
        return self.errors / max(self.ref_words, 1)

    def __str__(self):
        return (f"WER {100 * self.wer:.2f}% ({self.errors}/{self.ref_words}; "
                f"S={self.substitutions} I={self.insertions} D={self.deletions})")


def word_error_rate(refs: Iterable[Sequence], hyps: Iterable[Sequence]) -> WerReport:
    """Corpus-level WER; items are token sequences (split strings first)."""
    S = I = D = N = 0
    refs, hyps = list(refs), list(hyps)
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    for r, h in zip(refs, hyps):
        r = r.split() if isinstance(r, str) else r
        h = h.split() if isinstance(h, str) else h
        s, i, d = edit_ops(r, h)
        S, I, D, N = S + s, I + i, D + d, N + len(r)
    if N == 0 and I:
        logger.warning("empty reference with %d inserted word(s); WER uses a denominator of 1", I)
    return WerReport(S, I, D, N)


def exact_match_rate(refs: Iterable[Sequence], hyps: Iterable[Sequence]) -> float:
    pairs = [(tuple(r), tuple(h)) for r, h in zip(refs, hyps)]
    if not pairs:
        raise ValueError("no utterances")
    return sum(r == h for r, h in pairs) / len(pairs)
