"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"RBXS" | version | entry count |
    per entry: name length | UTF-8 name | rank | dims... | float32 payload |
    8-byte checksum (leading bytes of SHA-256 over everything before it)

The model configuration is stored next to the binary as ``<path>.config.json``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..model import ModelConfig, RoBoxModel

MAGIC = b"RBXS"
VERSION = 1


class CheckpointError(Exception):
    code = "E_CHECKPOINT"


class FormatError(CheckpointError):
    code = "E_FORMAT"


class ChecksumError(CheckpointError):
    code = "E_CHECKSUM"


class VersionError(CheckpointError):
    code = "E_VERSION"


class ParameterMismatchError(CheckpointError):
    code = "E_MISMATCH"


def config_path(path) -> Path:
    return Path(str(path) + ".config.json")


def encode(model: RoBoxModel) -> bytes:
    params = list(model.named_parameters())
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()[:8]


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise FormatError("not an RBXS checkpoint")
    body, checksum = blob[:-8], blob[-8:]
    if hashlib.sha256(body).digest()[:8] != checksum:
        raise ChecksumError("checkpoint checksum mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            if name in out:
                raise ParameterMismatchError(f"parameter {name} stored twice")
            (rank,) = struct.unpack_from("<I", body, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", body, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated or malformed checkpoint: {exc}") from exc
    if off != len(body):
        raise FormatError("trailing bytes after the last entry")
    return out


def save_checkpoint(model: RoBoxModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(model))
    snap = {"model": model.cfg.to_dict(), **(extra or {})}
    config_path(path).write_text(json.dumps(snap, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, model: RoBoxModel | None = None) -> RoBoxModel:
    """Load into ``model`` (or a fresh model built from the stored config).

    Either every parameter is replaced or none is.
    """
    path = Path(path)
    state = decode(path.read_bytes())
    if model is None:
        cfg_file = config_path(path)
        cfg = ModelConfig.from_dict(json.loads(cfg_file.read_text())["model"]) if cfg_file.exists() else ModelConfig()
        model = RoBoxModel(cfg)
    own = dict(model.named_parameters())
    if set(own) != set(state):
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        raise ParameterMismatchError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, value in state.items():
        if own[name].shape != value.shape:
            raise ParameterMismatchError(f"shape mismatch for {name}: {own[name].shape} vs {value.shape}")
    for name, value in state.items():
        own[name].data = value.copy()
    return model
