"""Binary checkpoint container.

Layout (little-endian)::

    b"GRNT" | u32 version | u32 len | fingerprint (utf-8)
    repeated sections: 4-byte tag | u64 len | payload | u32 crc32(payload)
    final section tag b"END!" with an empty payload

Sections: CONF (config text), WGTS (weights), ADAM (optimizer), SCHD
(scheduler, JSON), META (epoch, RNG state, bookkeeping; JSON). Tensor
records are ``u16 name_len | name | u8 rank | rank x u32 dims | float32 data``.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

__all__ = ["MAGIC", "VERSION", "Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"GRNT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    config_text: str
    weights: dict[str, np.ndarray]
    adam: dict = field(default_factory=dict)
    scheduler: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def _unpack_tensors(payload: bytes, section: str) -> dict[str, np.ndarray]:
    view = memoryview(payload)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"section {section}: record runs past the end of the section")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(bytes(take(4 * size)), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = data
    if pos != len(view):
        raise CheckpointError(f"section {section}: {len(view) - pos} trailing bytes")
    return out


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    adam = dict(ckpt.adam)
    moments = {}
    for key in ("m", "v"):
        for name, arr in adam.pop(key, {}).items():
            moments[f"{key}/{name}"] = arr
    adam_header = json.dumps(adam, sort_keys=True).encode("utf-8")
    adam_payload = struct.pack("<I", len(adam_header)) + adam_header + _pack_tensors(moments)

    fp = ckpt.fingerprint.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<I", ckpt.version),
        struct.pack("<I", len(fp)),
        fp,
        _section(b"CONF", ckpt.config_text.encode("utf-8")),
        _section(b"WGTS", _pack_tensors(ckpt.weights)),
        _section(b"ADAM", adam_payload),
        _section(b"SCHD", json.dumps(ckpt.scheduler, sort_keys=True).encode("utf-8")),
        _section(b"META", json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")),
        _section(b"END!", b""),
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path: Union[str, Path], expected_fingerprint: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version, fplen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12 + fplen
    if pos > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    fingerprint = blob[12:pos].decode("utf-8", errors="replace")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise CheckpointError(
            f"{path}: checkpoint was written for config {fingerprint}, but the current config is {expected_fingerprint}"
        )

    sections: dict[str, bytes] = {}
    while True:
        if pos + 12 > len(blob):
            raise CheckpointError(f"{path}: truncated file (section header at byte {pos})")
        tag = blob[pos:pos + 4].decode("ascii", errors="replace")
        (length,) = struct.unpack("<Q", blob[pos + 4:pos + 12])
        start, end = pos + 12, pos + 12 + length
        if end + 4 > len(blob):
            raise CheckpointError(f"{path}: truncated file (section {tag} declares {length} bytes)")
        payload = blob[start:end]
        (crc,) = struct.unpack("<I", blob[end:end + 4])
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: section {tag} is corrupt (checksum mismatch)")
        pos = end + 4
        if tag == "END!":
            break
        sections[tag] = payload
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} unexpected bytes after the end marker")
    missing = {"CONF", "WGTS", "ADAM", "SCHD", "META"} - set(sections)
    if missing:
        raise CheckpointError(f"{path}: missing sections {sorted(missing)}")

    try:
        adam_payload = sections["ADAM"]
        (hlen,) = struct.unpack("<I", adam_payload[:4])
        adam = json.loads(adam_payload[4:4 + hlen].decode("utf-8"))
        moments = _unpack_tensors(adam_payload[4 + hlen:], "ADAM")
        adam["m"] = {k[2:]: v for k, v in moments.items() if k.startswith("m/")}
        adam["v"] = {k[2:]: v for k, v in moments.items() if k.startswith("v/")}
        return Checkpoint(
            fingerprint=fingerprint,
            config_text=sections["CONF"].decode("utf-8"),
            weights=_unpack_tensors(sections["WGTS"], "WGTS"),
            adam=adam,
            scheduler=json.loads(sections["SCHD"].decode("utf-8")),
            meta=json.loads(sections["META"].decode("utf-8")),
            version=version,
        )
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed section contents ({exc})") from exc
