"""Feature files, manifests and N-best output.

Feature file: an 8-byte header of two little-endian uint32 values ``T`` and
``d``, followed by ``T * d`` little-endian float32 values in row-major order.

Manifest: UTF-8 text, one ``id<TAB>feature-file<TAB>transcript`` per line.
Relative feature paths resolve against the manifest's directory. The
transcript is space-separated subword units (it may be empty).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

__all__ = [
    "ManifestEntry",
    "labels_to_text",
    "read_features",
    "read_manifest",
    "text_to_labels",
    "write_features",
    "write_manifest",
]

_HEADER = struct.Struct("<II")


def write_features(path, frames) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise ValueError("features must be a (T, d) matrix")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(*frames.shape))
        f.write(np.ascontiguousarray(frames).tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature header")
    T, d = _HEADER.unpack_from(buf)
    expected = _HEADER.size + 4 * T * d
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for T={T} d={d}, found {len(buf)}")
    return np.frombuffer(buf, "<f4", offset=_HEADER.size).reshape(T, d).astype(np.float32)


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    feature_path: Path
    transcript: str


def read_manifest(path) -> List[ManifestEntry]:
    base = Path(path).parent
    entries = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{n}: expected 3 tab-separated fields, got {len(parts)}")
            utt_id, feat, text = parts
            entries.append(ManifestEntry(utt_id, base / feat, text.strip()))
    return entries


def write_manifest(path, entries: Sequence[Tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id, feat, text in entries:
            if "\t" in utt_id or "\t" in str(feat) or "\t" in text:
                raise ValueError("manifest fields must not contain tabs")
            f.write(f"{utt_id}\t{feat}\t{text}\n")


def text_to_labels(text: str, units: Sequence[str]) -> Tuple[int, ...]:
    """Unit symbols to label ids (symbol ``i`` has id ``i + 1``; 0 is blank)."""
    index: Dict[str, int] = {u: i + 1 for i, u in enumerate(units)}
    try:
        return tuple(index[tok] for tok in text.split())
    except KeyError as exc:
        raise ValueError(f"unknown subword unit {exc.args[0]!r}") from None


def labels_to_text(labels: Sequence[int], units: Sequence[str]) -> str:
    return " ".join(units[k - 1] if units else str(k) for k in labels)
