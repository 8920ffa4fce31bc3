"""SCPC checkpoint files.

Layout (little-endian)::

    b"SCPC" | u32 version | 32-byte sha256 config digest
    u32 config-json length | config JSON (UTF-8)
    u32 record count
    per record: u16 name length | name | u8 rank | u32 extent * rank | float32 payload

The digest covers only the model architecture (``config["model"]``), so two
checkpoints are interchangeable exactly when their digests match.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SCPC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"config digest mismatch: expected {expected}, checkpoint has {found}")
        self.expected = expected
        self.found = found


def config_digest(model_config: dict) -> str:
    canonical = json.dumps(model_config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    config: dict
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def digest(self) -> str:
        return config_digest(self.config.get("model", {}))

    def subset(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k[len(prefix):], v) for k, v in self.params.items() if k.startswith(prefix))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    config_bytes = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    chunks = [
        MAGIC,
        struct.pack("<I", VERSION),
        bytes.fromhex(ckpt.digest),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        struct.pack("<I", len(ckpt.params)),
    ]
    for name, value in ckpt.params.items():
        arr = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"{self.path}: truncated at byte {len(self.raw)} (needed {self.pos + n})")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_digest: str | None = None, force: bool = False) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if len(raw) < 4 or r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an SCPC checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = r.take(32).hex()
    (config_len,) = r.unpack("<I")
    config = json.loads(r.take(config_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    ckpt = Checkpoint(config, params)
    if ckpt.digest != digest:
        raise CheckpointError(f"{path}: stored digest does not match stored config")
    if expected_digest is not None and expected_digest != digest and not force:
        raise ConfigMismatchError(expected_digest, digest)
    return ckpt
