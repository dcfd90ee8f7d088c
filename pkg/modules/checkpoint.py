"""
Binary checkpoint format.

    magic           4 bytes  b"JMLA"
    version         u32
    header length   u32
    header          UTF-8 JSON (config, topology, rng state, provenance)
    parameter count u32
    per parameter:
        name length u32, name UTF-8
        ndim        u32
        dims        ndim x u64
        payload len u64 (bytes), payload little-endian float64, row-major

All integers are little-endian. Parameters are written in model order.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Mapping, Union

import numpy as np

from modules.tensor import Tensor

MAGIC = b"JMLA"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is missing, truncated or of another version."""


@dataclass
class Checkpoint:
    header: Dict
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def config(self) -> Dict:
        return self.header.get("config", {})

    @property
    def topology(self) -> str:
        return self.header.get("topology", "")

    @property
    def provenance(self) -> Dict:
        return self.header.get("provenance", {})

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        """Parameters under `prefix.` with the prefix stripped."""
        cut = len(prefix) + 1
        return {name[cut:]: value for name, value in self.params.items() if name.startswith(prefix + ".")}


def save_checkpoint(path: str, params: Mapping[str, Union[Tensor, np.ndarray]], header: Dict):
    """Write `params` in iteration order after a sorted-keys JSON header."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack("<I", len(params)))
        for name, value in params.items():
            array = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
            payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            f.write(struct.pack("<Q", len(payload)))
            f.write(payload)


class _Reader:
    """Bounds-checked cursor over the raw file bytes."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointError(f"Чекпоинт {self.path} обрезан (смещение {self.offset})")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Checkpoint:
    """
    Parse and validate a checkpoint file. Wrong magic, another version,
    a payload that disagrees with its dims, truncation and trailing bytes
    all raise CheckpointError.
    """
    if not os.path.exists(path):
        raise CheckpointError(f"Чекпоинт не найден: {path}")
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)

    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path} не является чекпоинтом JMLA")
    version, header_len = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"Версия чекпоинта {version} не поддерживается (ожидалась {VERSION})")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Повреждённый заголовок чекпоинта {path}: {e}") from e

    params: Dict[str, np.ndarray] = {}
    # parameter records
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        (payload_len,) = reader.unpack("<Q")
        if payload_len != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"Параметр {name}: длина данных {payload_len} не соответствует форме {shape}")
        values = np.frombuffer(reader.take(payload_len), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = values
    if reader.offset != len(reader.data):
        raise CheckpointError(f"Лишние байты в конце чекпоинта {path}")
    return Checkpoint(header, params, version)
