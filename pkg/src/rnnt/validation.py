"""Input checks shared by the estimator API and the CLI."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np

from .nn import FeatureSequence

__all__ = ["check_feature_sequences", "check_label_sequences"]


def check_feature_sequences(X, n_features: Optional[int] = None,
                            frame_period: float = 0.01) -> List[FeatureSequence]:
    """Coerce ``X`` to a list of finite float32 ``(T, d)`` sequences with one shared ``d``."""
    if isinstance(X, (np.ndarray, FeatureSequence)) and np.ndim(getattr(X, "frames", X)) == 2:
        raise ValueError("X must be a sequence of (T, d) matrices, not a single matrix")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, FeatureSequence):
            fs = x
        else:
            arr = np.asarray(x, dtype=np.float32)
            if arr.ndim != 2:
                raise ValueError(f"X[{i}] must be 2-D (frames, features), got shape {arr.shape}")
            fs = FeatureSequence(arr, frame_period)
        if fs.T == 0:
            raise ValueError(f"X[{i}] has no frames")
        if not np.all(np.isfinite(fs.frames)):
            raise ValueError(f"X[{i}] contains NaN or infinity")
        if n_features is None:
            n_features = fs.d
        elif fs.d != n_features:
            raise ValueError(f"X[{i}] has {fs.d} features, expected {n_features}")
        out.append(fs)
    if not out:
        raise ValueError("X is empty")
    return out


def check_label_sequences(y, vocab_size: Optional[int] = None,
                          units: Sequence[str] = ()) -> List[Tuple[int, ...]]:
    """Label sequences as tuples of ids in ``1..vocab_size`` (0 is reserved for blank).

    String items are split on whitespace and mapped through ``units``.
    """
    index = {u: i + 1 for i, u in enumerate(units)}
    out = []
    for i, seq in enumerate(y):
        if isinstance(seq, str):
            if not units:
                raise ValueError("string transcripts need a unit inventory")
            try:
                seq = [index[tok] for tok in seq.split()]
            except KeyError as exc:
                raise ValueError(f"y[{i}]: unknown unit {exc.args[0]!r}") from None
        labels = tuple(int(k) for k in seq)
        if any(k < 1 for k in labels):
            raise ValueError(f"y[{i}]: label ids must be >= 1 (0 is blank)")
        if vocab_size is not None and any(k > vocab_size for k in labels):
            raise ValueError(f"y[{i}]: label id above vocabulary size {vocab_size}")
        out.append(labels)
    return out
