"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"SSMECGCK"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header, keys sorted, compact separators
    offset 20+H          array payload, float64 little-endian, C order

The header holds ``meta`` (free-form JSON: configs, epoch, seed, metric
history) and ``arrays``: a list of ``{"name", "shape", "offset"}`` entries in
payload order, where ``offset`` counts bytes from the start of the payload.
Float32 parameters widen to float64 losslessly, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SSMECGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix.``, with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def state_dict(self, prefix: str, dtype=torch.float32) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()).to(dtype) for k, v in self.section(prefix).items()}

    def add_module(self, prefix: str, module: torch.nn.Module) -> None:
        for k, v in module.state_dict().items():
            self.arrays[f"{prefix}.{k}"] = v.detach().cpu().double().numpy().copy()

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self.arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            chunks.append(a.tobytes())
            offset += a.nbytes
        header = json.dumps({"arrays": entries, "meta": self.meta},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", data[8:20])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
        payload = memoryview(data)[20 + hlen:]
        arrays = {}
        for e in header["arrays"]:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
            arrays[e["name"]] = arr.reshape(e["shape"]).copy()
        return cls(arrays, header["meta"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
