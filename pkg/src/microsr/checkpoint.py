"""Versioned binary key-value container for parameters and training state.

Layout (little endian)::

    magic    8 bytes  b"MICROSR\\0"
    version  u32
    count    u32
    count × record:
        name_len u16, name (utf-8), dtype u8, ndim u8, dims u32×ndim,
        nbytes u64, raw data

Record ``__meta__`` (uint8) holds canonical JSON metadata.  Writing is
deterministic, so save → load → save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .numerics import AdamState

MAGIC = b"MICROSR\0"
FORMAT_VERSION = 1
META_KEY = "__meta__"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()[:16]


def write_container(path, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Atomically write ``arrays`` (and optional metadata) to ``path``."""
    records = []
    if meta is not None:
        records.append((META_KEY, np.frombuffer(canonical_json(meta), dtype=np.uint8)))
    records += list(arrays.items())
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    for name, arr in records:
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dtype) not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", _CODES[np.dtype(dtype)], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<Q", len(raw)) + raw)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at offset {self.pos} while reading {what} "
                                  f"(need {n} bytes, {len(self.blob) - self.pos} left)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``; nothing is returned unless the whole file parses."""
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version, count = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"record {i} name length")
        name = r.take(name_len, f"record {i} name").decode()
        code, ndim = r.unpack("<BB", f"{name} header")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: record {name!r} has unknown dtype code {code} at offset {r.pos - 2}")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        (nbytes,) = r.unpack("<Q", f"{name} size")
        dtype = _DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointError(f"{path}: record {name!r} size {nbytes} disagrees with shape {shape}")
        data = np.frombuffer(r.take(nbytes, f"{name} data"), dtype=dtype).reshape(shape).copy()
        if name == META_KEY:
            meta = json.loads(data.tobytes().decode())
        else:
            arrays[name] = data
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes after offset {r.pos}")
    return arrays, meta


@dataclass
class Checkpoint:
    generator: dict[str, np.ndarray]
    discriminator: Optional[dict[str, np.ndarray]] = None
    generator_opt: dict[str, AdamState] = field(default_factory=dict)
    discriminator_opt: dict[str, AdamState] = field(default_factory=dict)
    epoch: int = -1
    phase: str = "init"
    schedule: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def config_hashes(self) -> dict[str, str]:
        return {k: config_hash(v) for k, v in sorted(self.configs.items())}


def _pack_opt(prefix: str, states: Mapping[str, AdamState], arrays: dict, steps: dict) -> None:
    for name, st in sorted(states.items()):
        arrays[f"{prefix}/{name}/m"] = st.first_moment
        arrays[f"{prefix}/{name}/v"] = st.second_moment
        arrays[f"{prefix}/{name}/vmax"] = st.max_second_moment
        steps[name] = st.step_count


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, value in sorted(ckpt.generator.items()):
        arrays[f"gen/{name}"] = value
    for name, value in sorted((ckpt.discriminator or {}).items()):
        arrays[f"disc/{name}"] = value
    gen_steps: dict = {}
    disc_steps: dict = {}
    _pack_opt("gen_opt", ckpt.generator_opt, arrays, gen_steps)
    _pack_opt("disc_opt", ckpt.discriminator_opt, arrays, disc_steps)
    meta = {
        "epoch": ckpt.epoch,
        "phase": ckpt.phase,
        "schedule": ckpt.schedule,
        "configs": ckpt.configs,
        "config_hashes": ckpt.config_hashes,
        "has_discriminator": ckpt.discriminator is not None,
        "gen_opt_steps": gen_steps,
        "disc_opt_steps": disc_steps,
        "extra": ckpt.extra,
    }
    write_container(path, arrays, meta)


def _unpack_opt(prefix: str, arrays: Mapping[str, np.ndarray], steps: Mapping[str, int]) -> dict[str, AdamState]:
    out = {}
    for name, t in steps.items():
        try:
            out[name] = AdamState(arrays[f"{prefix}/{name}/m"], arrays[f"{prefix}/{name}/v"],
                                  arrays[f"{prefix}/{name}/vmax"], int(t))
        except KeyError as exc:
            raise CheckpointError(f"optimizer state for {name!r} incomplete: {exc}") from exc
    return out


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = read_container(path)
    if not meta:
        raise CheckpointError(f"{path}: missing metadata record")
    gen = {k[4:]: v for k, v in arrays.items() if k.startswith("gen/")}
    disc = {k[5:]: v for k, v in arrays.items() if k.startswith("disc/")}
    ckpt = Checkpoint(
        generator=gen,
        discriminator=disc if meta.get("has_discriminator") else None,
        generator_opt=_unpack_opt("gen_opt", arrays, meta.get("gen_opt_steps", {})),
        discriminator_opt=_unpack_opt("disc_opt", arrays, meta.get("disc_opt_steps", {})),
        epoch=int(meta["epoch"]),
        phase=str(meta["phase"]),
        schedule=meta.get("schedule", {}),
        configs=meta.get("configs", {}),
        extra=meta.get("extra", {}),
    )
    if meta.get("config_hashes", {}) != ckpt.config_hashes:
        raise CheckpointError(f"{path}: configuration hash mismatch (metadata corrupted)")
    return ckpt
