"""OMNF1 checkpoint files.

Layout: the 5 magic bytes ``OMNF1``, then records of

    name_len  u64 LE
    name      UTF-8, name_len bytes
    rank      u64 LE
    dims      rank x u64 LE
    payload   prod(dims) x f32 LE

ending with a record whose ``name_len`` is 0. Nothing may follow the
terminator.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"OMNF1"
STAGE_CODES = {None: 0, "pretrain": 1, "sft": 2}
_U64 = struct.Struct("<Q")


def encode_records(records: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    for name, value in records.items():
        if not name:
            raise CheckpointFormatError("record names must be non-empty")
        raw = name.encode("utf-8")
        arr = np.asarray(value)
        out += _U64.pack(len(raw)) + raw + _U64.pack(arr.ndim)
        for dim in arr.shape:
            out += _U64.pack(dim)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += _U64.pack(0)
    return bytes(out)


def decode_records(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:len(MAGIC)]!r}; expected {MAGIC!r}")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointFormatError(f"truncated checkpoint at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    records: dict[str, np.ndarray] = {}
    while True:
        (name_len,) = _U64.unpack(take(8))
        if name_len == 0:
            break
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"record name is not UTF-8: {exc}") from None
        if name in records:
            raise CheckpointFormatError(f"duplicate record {name!r}")
        (rank,) = _U64.unpack(take(8))
        if rank > 16:
            raise CheckpointFormatError(f"record {name!r} has implausible rank {rank}")
        dims = [_U64.unpack(take(8))[0] for _ in range(rank)]
        count = int(np.prod(dims, dtype=np.uint64)) if dims else 1
        if count * 4 > len(blob) - pos:
            raise CheckpointFormatError(f"record {name!r} payload runs past end of file")
        records[name] = np.frombuffer(take(count * 4), dtype="<f4").reshape(dims).copy()
    if pos != len(blob):
        raise CheckpointFormatError(f"{len(blob) - pos} trailing bytes after terminator")
    return records


def fingerprint(architecture: Mapping) -> bytes:
    """SHA-256 of the canonical JSON form of an architecture description."""
    text = json.dumps(architecture, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).digest()


@dataclass
class Checkpoint:
    """Parameters, AdamW moments and run metadata.

    Arrays are held as float32, the on-disk precision, so that
    save -> load -> save is byte-identical.
    """

    params: dict[str, np.ndarray]
    moments_m: dict[str, np.ndarray] = field(default_factory=dict)
    moments_v: dict[str, np.ndarray] = field(default_factory=dict)
    fingerprint: bytes = b"\0" * 32
    step: int = 0
    stage: str | None = None
    history: list[dict] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.stage not in STAGE_CODES:
            raise CheckpointFormatError(f"unknown stage {self.stage!r}")
        if len(self.fingerprint) != 32:
            raise CheckpointFormatError("fingerprint must be 32 bytes")
        for group in (self.params, self.moments_m, self.moments_v):
            for k in group:
                group[k] = np.asarray(group[k], dtype=np.float32)

    def to_records(self) -> dict[str, np.ndarray]:
        rec: dict[str, np.ndarray] = {}
        for prefix, group in (("param/", self.params), ("opt/m/", self.moments_m),
                              ("opt/v/", self.moments_v)):
            for name in sorted(group):
                rec[prefix + name] = group[name]
        rec["meta/step"] = np.array([self.step], dtype=np.float32)
        rec["meta/stage"] = np.array([STAGE_CODES[self.stage]], dtype=np.float32)
        rec["meta/fingerprint"] = np.frombuffer(self.fingerprint, dtype=np.uint8).astype(np.float32)
        return rec

    @classmethod
    def from_records(cls, rec: Mapping[str, np.ndarray]) -> "Checkpoint":
        groups: dict[str, dict[str, np.ndarray]] = {"param/": {}, "opt/m/": {}, "opt/v/": {}}
        meta = {}
        for name, value in rec.items():
            for prefix, group in groups.items():
                if name.startswith(prefix):
                    group[name[len(prefix):]] = value
                    break
            else:
                if not name.startswith("meta/"):
                    raise CheckpointFormatError(f"unknown record {name!r}")
                meta[name[5:]] = value
        missing = {"step", "stage", "fingerprint"} - set(meta)
        if missing:
            raise CheckpointFormatError(f"missing metadata records: {sorted(missing)}")
        codes = {v: k for k, v in STAGE_CODES.items()}
        stage_code = int(meta["stage"][0])
        if stage_code not in codes:
            raise CheckpointFormatError(f"unknown stage code {stage_code}")
        fp = meta["fingerprint"]
        if fp.shape != (32,):
            raise CheckpointFormatError("fingerprint record must hold 32 values")
        return cls(groups["param/"], groups["opt/m/"], groups["opt/v/"],
                   bytes(fp.astype(np.uint8)), int(meta["step"][0]), codes[stage_code])

    def to_bytes(self) -> bytes:
        return encode_records(self.to_records())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        return cls.from_records(decode_records(blob))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
