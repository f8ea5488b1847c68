"""Per-tensor int8 quantization and fixed-point matrix-vector kernels.

Symmetric tensors have no zero offset: ``values = round(x * theta)`` with
``theta = 127 / max|x|``, so a product of two quantized operands needs no
correction terms and fits the 32-bit accumulator directly. The asymmetric
scheme is kept for comparison; its kernel must subtract zero points first.

Quantized tensors support ``W @ x`` with a float vector ``x`` (the activation
is quantized on the fly) and ``W[i]`` (a dequantized row, for embeddings), so
they drop into the inference model wherever a float matrix is expected.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numba
import numpy as np

__all__ = [
    "AsymQuantizedTensor",
    "QuantizationError",
    "QuantizedTensor",
    "dequantize",
    "max_inner_dim",
    "pair_sums",
    "payload_bytes",
    "qmatvec",
    "qmatvec_asym",
    "qmatvec_int",
    "qmatvec_oracle",
    "quantize_asymmetric",
    "quantize_model",
    "quantize_symmetric",
]

QMAX = 127
ACC_LIMIT = 2**31


class QuantizationError(ValueError):
    pass


def max_inner_dim(max_product: int = QMAX * QMAX) -> int:
    """Largest inner dimension whose worst-case dot product fits a signed 32-bit accumulator."""
    return (ACC_LIMIT - 1) // max_product


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray
    theta: float

    def __post_init__(self):
        v = self.values
        if v.dtype != np.int8:
            raise QuantizationError(f"values must be int8, got {v.dtype}")
        if v.size and (v.min() < -QMAX or v.max() > QMAX):
            raise QuantizationError("values outside [-127, 127]")
        if not (np.isfinite(self.theta) and self.theta > 0):
            raise QuantizationError(f"theta must be positive, got {self.theta}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1] if self.values.ndim > 1 else 1

    @property
    def nbytes(self) -> int:
        return self.values.nbytes + 4  # float32 scale

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return (self.values.astype(np.float64) / self.theta).astype(dtype)

    def __getitem__(self, idx):
        return (self.values[idx].astype(np.float64) / self.theta).astype(np.float32)

    def __matmul__(self, x):
        x = np.asarray(x)
        if x.ndim == 1:
            if x.shape[0] != self.values.shape[1]:
                raise QuantizationError(f"dimension mismatch: {self.shape} @ {x.shape}")
            if not np.all(np.isfinite(x)):
                raise QuantizationError("cannot quantize non-finite values")
            return _dynamic_matvec(self.values, self.theta, x)
        return np.stack([self @ x[:, j] for j in range(x.shape[1])], axis=1)

    def __eq__(self, other):
        return (isinstance(other, QuantizedTensor) and self.theta == other.theta
                and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True)
class AsymQuantizedTensor:
    values: np.ndarray
    scale: float
    zero_point: int

    def __post_init__(self):
        if self.values.dtype != np.int8:
            raise QuantizationError(f"values must be int8, got {self.values.dtype}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise QuantizationError(f"scale must be positive, got {self.scale}")

    @property
    def shape(self):
        return self.values.shape

    @property
    def nbytes(self) -> int:
        return self.values.nbytes + 8  # float32 scale + int32 zero point

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return ((self.values.astype(np.float64) - self.zero_point) / self.scale).astype(dtype)

    def __getitem__(self, idx):
        return ((self.values[idx].astype(np.float64) - self.zero_point) / self.scale).astype(np.float32)

    def __matmul__(self, x):
        x = np.asarray(x)
        if x.ndim == 1:
            return qmatvec_asym(self, quantize_asymmetric(x)).astype(np.float32)
        return np.stack([self @ x[:, j] for j in range(x.shape[1])], axis=1)


def _check_finite(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantizationError("cannot quantize non-finite values")
    return x


def _finite_scale(scale: float) -> float:
    if not np.isfinite(scale):
        raise QuantizationError("tensor range too small to scale into int8 without overflow")
    return scale


def quantize_symmetric(x) -> QuantizedTensor:
    """``theta = 127 / max(|min x|, |max x|)``; all-zero input gets ``theta = 1``."""
    x = _check_finite(x)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    theta = _finite_scale(QMAX / peak) if peak > 0 else 1.0
    values = np.clip(round_half_away(x * theta), -QMAX, QMAX).astype(np.int8)
    return QuantizedTensor(values, theta)


def dequantize(q) -> np.ndarray:
    return q.dequantize()


def quantize_asymmetric(x) -> AsymQuantizedTensor:
    """Affine map of ``[min x, max x]`` onto ``[-128, 127]``.

    A constant tensor gets ``scale = 1`` and ``zero_point = -round(c)`` so
    every value is stored as 0 and integer constants reconstruct exactly.
    """
    x = _check_finite(x)
    lo, hi = (float(x.min()), float(x.max())) if x.size else (0.0, 0.0)
    if hi > lo:
        scale = _finite_scale(255.0 / (hi - lo))
        zero_point = int(-128 - round_half_away(lo * scale))
    else:
        scale = 1.0
        zero_point = -int(round_half_away(lo))
    values = np.clip(round_half_away(x * scale) + zero_point, -128, 127).astype(np.int8)
    return AsymQuantizedTensor(values, scale, zero_point)


@numba.njit(cache=True, nogil=True)
def _matvec_i8(W, v):
    # Plain widening loop; LLVM vectorizes it. Exactness does not depend on
    # instruction choice because every partial sum is an exact integer.
    rows, n = W.shape
    out = np.empty(rows, dtype=np.int32)
    for i in range(rows):
        acc = np.int32(0)
        for j in range(n):
            acc += np.int32(W[i, j]) * np.int32(v[j])
        out[i] = acc
    return out


@numba.njit(cache=True, nogil=True)
def _quantize_vec(x):
    peak = 0.0
    for j in range(x.shape[0]):
        a = abs(x[j])
        if a > peak:
            peak = a
    theta = QMAX / peak if peak > 0 else 1.0
    out = np.empty(x.shape[0], dtype=np.int8)
    for j in range(x.shape[0]):
        y = x[j] * theta
        r = min(np.floor(abs(y) + 0.5), QMAX)
        out[j] = np.int8(r if y >= 0 else -r)
    return out, theta


@numba.njit(cache=True, nogil=True)
def _dynamic_matvec(W, theta_w, x):
    v, theta_v = _quantize_vec(x)
    acc = _matvec_i8(W, v)
    return (acc / (theta_w * theta_v)).astype(np.float32)


def pair_sums(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a[2j]*b[2j] + a[2j+1]*b[2j+1]`` for int8 operands, computed exactly."""
    a = a.astype(np.int64)
    b = b.astype(np.int64)
    n = a.shape[-1] - a.shape[-1] % 2
    return a[..., 0:n:2] * b[..., 0:n:2] + a[..., 1:n:2] * b[..., 1:n:2]


@numba.njit(cache=True, nogil=True)
def _matvec_i8_offset(W, zw, v, zv):
    rows, n = W.shape
    out = np.empty(rows, dtype=np.int32)
    for i in range(rows):
        acc = np.int32(0)
        for j in range(n):
            acc += (np.int32(W[i, j]) - zw) * (np.int32(v[j]) - zv)
        out[i] = acc
    return out


def _check_dims(W, v, limit):
    if W.ndim != 2 or v.ndim != 1:
        raise QuantizationError("qmatvec expects a matrix and a vector")
    if W.shape[1] != v.shape[0]:
        raise QuantizationError(f"dimension mismatch: {W.shape} @ {v.shape}")
    if W.shape[1] > limit:
        raise QuantizationError(
            f"inner dimension {W.shape[1]} could overflow the 32-bit accumulator (limit {limit})"
        )


def qmatvec_int(W: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact int32 dot products of int8 ``W`` rows with int8 ``v``."""
    W = np.ascontiguousarray(W, dtype=np.int8)
    v = np.ascontiguousarray(v, dtype=np.int8)
    _check_dims(W, v, max_inner_dim())
    return _matvec_i8(W, v)


def qmatvec_oracle(W: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Naive 64-bit reference for :func:`qmatvec_int`."""
    return W.astype(np.int64) @ v.astype(np.int64)


def qmatvec(W: QuantizedTensor, v: QuantizedTensor) -> np.ndarray:
    acc = qmatvec_int(W.values, v.values)
    return acc / (W.theta * v.theta)


def qmatvec_asym(W: AsymQuantizedTensor, v: AsymQuantizedTensor) -> np.ndarray:
    Wv = np.ascontiguousarray(W.values)
    vv = np.ascontiguousarray(v.values)
    # offsets widen operands to 9 bits: |product| <= 255**2
    _check_dims(Wv, vv, max_inner_dim(255 * 255))
    acc = _matvec_i8_offset(Wv, np.int32(W.zero_point), vv, np.int32(v.zero_point))
    return acc / (W.scale * v.scale)


def quantize_model(params: Dict[str, np.ndarray], matrix_names: Iterable[str],
                   scheme: str = "symmetric") -> Dict[str, object]:
    """Quantize the named weight matrices per tensor; everything else stays float32."""
    if scheme in ("sym", "symmetric"):
        fn = quantize_symmetric
    elif scheme in ("asym", "asymmetric"):
        fn = quantize_asymmetric
    else:
        raise QuantizationError(f"unknown scheme {scheme!r}")
    names = set(matrix_names)
    unknown = names - set(params)
    if unknown:
        raise QuantizationError(f"no such parameters: {sorted(unknown)}")
    return {k: fn(v) if k in names else np.asarray(v, dtype=np.float32) for k, v in params.items()}


def payload_bytes(params: Dict[str, object], names: Optional[Iterable[str]] = None) -> int:
    """Serialized bytes of the selected tensors (float tensors counted as float32)."""
    keys = params if names is None else names
    total = 0
    for k in keys:
        v = params[k]
        total += v.nbytes if isinstance(v, (QuantizedTensor, AsymQuantizedTensor)) else np.asarray(v).size * 4
    return total
