"""Self-describing model container.

Layout (all integers little-endian)::

    magic     8 bytes   b"RNNTMDL\\0"
    version   uint32
    hlen      uint32    length of the JSON header in bytes
    header    hlen bytes of UTF-8 JSON (sorted keys, compact separators)
    payload   tensor bytes, concatenated in header order, C order

The header holds the model config, free-form metadata and one entry per
tensor: ``name``, ``dtype`` (``float32``, ``int8_sym`` or ``int8_asym``),
``shape``, ``offset``/``nbytes`` into the payload, plus ``theta`` or
``scale``/``zero_point`` for int8 tensors. Floats are written with Python's
shortest round-trip repr, so load followed by save reproduces the file byte
for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..model import ModelConfig, RNNTModel
from ..quant import AsymQuantizedTensor, QuantizedTensor

__all__ = ["ContainerError", "FORMAT_VERSION", "ModelContainer", "load_model", "save_model"]

MAGIC = b"RNNTMDL\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


class ContainerError(ValueError):
    pass


def _entry(name, value):
    if isinstance(value, QuantizedTensor):
        return {"name": name, "dtype": "int8_sym", "shape": list(value.shape),
                "theta": float(value.theta)}, value.values
    if isinstance(value, AsymQuantizedTensor):
        return {"name": name, "dtype": "int8_asym", "shape": list(value.shape),
                "scale": float(value.scale), "zero_point": int(value.zero_point)}, value.values
    arr = np.asarray(value, dtype=np.float32)
    return {"name": name, "dtype": "float32", "shape": list(arr.shape)}, arr


@dataclass
class ModelContainer:
    config: ModelConfig
    params: Dict[str, object]
    metadata: dict = field(default_factory=dict)

    @property
    def dtypes(self) -> Dict[str, str]:
        return {k: _entry(k, v)[0]["dtype"] for k, v in self.params.items()}

    def model(self) -> RNNTModel:
        return RNNTModel(self.config, self.params)

    def to_bytes(self) -> bytes:
        tensors, chunks, offset = [], [], 0
        for name in sorted(self.params):
            meta, arr = _entry(name, self.params[name])
            data = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            meta.update(offset=offset, nbytes=len(data))
            tensors.append(meta)
            chunks.append(data)
            offset += len(data)
        header = {"config": self.config.to_dict(), "metadata": self.metadata, "tensors": tensors}
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelContainer":
        if len(buf) < _PREFIX.size:
            raise ContainerError("truncated container")
        magic, version, hlen = _PREFIX.unpack_from(buf)
        if magic != MAGIC:
            raise ContainerError("not a model container (bad magic)")
        if version != FORMAT_VERSION:
            raise ContainerError(f"unsupported container version {version} (expected {FORMAT_VERSION})")
        start = _PREFIX.size + hlen
        try:
            header = json.loads(buf[_PREFIX.size : start].decode("utf-8"))
        except ValueError as exc:
            raise ContainerError(f"corrupt header: {exc}") from exc
        payload = memoryview(buf)[start:]
        params = {}
        for t in header["tensors"]:
            end = t["offset"] + t["nbytes"]
            if end > len(payload):
                raise ContainerError(f"tensor {t['name']} runs past end of file")
            raw = payload[t["offset"] : end]
            if t["dtype"] == "float32":
                params[t["name"]] = np.frombuffer(raw, "<f4").reshape(t["shape"]).astype(np.float32)
            elif t["dtype"] == "int8_sym":
                params[t["name"]] = QuantizedTensor(np.frombuffer(raw, np.int8).reshape(t["shape"]).copy(),
                                                    t["theta"])
            elif t["dtype"] == "int8_asym":
                params[t["name"]] = AsymQuantizedTensor(
                    np.frombuffer(raw, np.int8).reshape(t["shape"]).copy(), t["scale"], t["zero_point"])
            else:
                raise ContainerError(f"tensor {t['name']}: unknown dtype {t['dtype']!r}")
        return cls(ModelConfig.from_dict(header["config"]), params, header.get("metadata", {}))

    def save(self, path) -> int:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return len(data)

    @classmethod
    def load(cls, path) -> "ModelContainer":
        return cls.from_bytes(Path(path).read_bytes())


def save_model(path, config: ModelConfig, params: Dict[str, object], metadata: Optional[dict] = None) -> int:
    return ModelContainer(config, dict(params), dict(metadata or {})).save(path)


def load_model(path) -> ModelContainer:
    return ModelContainer.load(path)
