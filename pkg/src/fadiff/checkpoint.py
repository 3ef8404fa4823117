"""Named-tensor checkpoint container.

Layout::

    b"FADCKPT\\0"                  8-byte magic
    u32 little-endian              format version
    u64 little-endian              manifest length in bytes
    manifest                       UTF-8 JSON
    payload                        concatenated little-endian float32 tensors

The manifest carries the model kind, arbitrary metadata (config snapshot,
schedule arrays) and a tensor index of ``{name, dtype, shape, offset,
nbytes}`` plus the payload length and SHA-256, so truncation or corruption is
detected before any tensor is materialised.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np
import torch

from .fileio import atomic_write_bytes

MAGIC = b"FADCKPT\0"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class TensorRecord:
    name: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype="<f4")

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class Checkpoint:
    kind: str
    meta: Dict[str, Any] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def add_module(self, module: torch.nn.Module, prefix: str = "") -> None:
        for name, value in module.state_dict().items():
            self.tensors[prefix + name] = value.detach().cpu().numpy().astype("<f4")

    def module_state(self, prefix: str = "") -> Dict[str, torch.Tensor]:
        return {name[len(prefix):]: torch.from_numpy(arr.copy())
                for name, arr in self.tensors.items() if name.startswith(prefix)}

    def to_bytes(self) -> bytes:
        index = []
        chunks = []
        offset = 0
        for name in sorted(self.tensors):
            rec = TensorRecord(name, self.tensors[name])
            raw = rec.data.tobytes()
            index.append({"name": name, "dtype": "float32", "shape": list(rec.shape),
                          "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        payload = b"".join(chunks)
        manifest = {
            "kind": self.kind,
            "format_version": FORMAT_VERSION,
            "meta": self.meta,
            "tensors": index,
            "payload_nbytes": len(payload),
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
        mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)) + mbytes + payload

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "Checkpoint":
        if len(blob) < _HEADER.size:
            raise CheckpointError(f"{source}: truncated header")
        magic, version, mlen = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{source}: unsupported format version {version}")
        start = _HEADER.size
        if len(blob) < start + mlen:
            raise CheckpointError(f"{source}: truncated manifest")
        try:
            manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{source}: corrupt manifest ({exc})") from exc
        payload = blob[start + mlen:]
        if len(payload) != manifest["payload_nbytes"]:
            raise CheckpointError(
                f"{source}: payload is {len(payload)} bytes, manifest says "
                f"{manifest['payload_nbytes']}")
        if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
            raise CheckpointError(f"{source}: payload checksum mismatch")
        tensors = {}
        for entry in manifest["tensors"]:
            if entry["dtype"] != "float32":
                raise CheckpointError(f"{source}: unsupported dtype {entry['dtype']}")
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * 4
            lo = entry["offset"]
            if n != entry["nbytes"] or lo + n > len(payload):
                raise CheckpointError(f"{source}: tensor {entry['name']} overruns payload")
            tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4,
                                                   offset=lo).reshape(shape).copy()
        return cls(kind=manifest["kind"], meta=manifest["meta"], tensors=tensors)

    def save(self, path: Path) -> None:
        atomic_write_bytes(Path(path), self.to_bytes())

    @classmethod
    def load(cls, path: Path, kind: str | None = None) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        ckpt = cls.from_bytes(path.read_bytes(), source=str(path))
        if kind is not None and ckpt.kind != kind:
            raise CheckpointError(f"{path}: expected a '{kind}' checkpoint, got '{ckpt.kind}'")
        return ckpt


def state_checksum(state: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over sorted tensor names and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
