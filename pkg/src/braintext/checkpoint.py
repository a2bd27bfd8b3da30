"""Single-file JSON checkpoint container.

Tensors are stored as row-major little-endian float32 payloads in base64,
keyed by parameter name, together with an echo of the effective run
configuration, a phase provenance string, and a content hash over the
payloads. Nothing time-dependent is stored, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1
KIND = "braintext-checkpoint"


class CheckpointError(ValueError):
    pass


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _payload(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def content_hash(tensors: dict[str, np.ndarray]) -> str:
    """SHA-256 over (name, shape, payload) in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        h.update(name.encode("utf-8"))
        h.update(b"\0")
        h.update(_json_bytes(list(arr.shape)))
        h.update(b"\0")
        h.update(_payload(arr))
    return h.hexdigest()


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    phase: str
    extra: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        return content_hash(self.tensors)


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict, phase: str, extra=None):
    record = {
        "format_version": FORMAT_VERSION,
        "kind": KIND,
        "phase": phase,
        "config": config,
        "extra": extra or {},
        "tensors": {
            name: {
                "shape": list(np.asarray(arr).shape),
                "dtype": "<f4",
                "data": base64.b64encode(_payload(np.asarray(arr))).decode("ascii"),
            }
            for name, arr in tensors.items()
        },
        "content_hash": content_hash(tensors),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
        f.write("\n")


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as f:
        try:
            record = json.load(f)
        except json.JSONDecodeError as e:
            raise CheckpointError(f"not a checkpoint file: {e}") from e
    if record.get("kind") != KIND:
        raise CheckpointError(f"unexpected kind {record.get('kind')!r}")
    if record.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {record.get('format_version')!r}, "
            f"this build reads {FORMAT_VERSION}"
        )
    tensors = {}
    for name, spec in record["tensors"].items():
        if spec["dtype"] != "<f4":
            raise CheckpointError(f"tensor {name}: unsupported dtype {spec['dtype']!r}")
        raw = base64.b64decode(spec["data"])
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        expected = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(f"tensor {name}: payload size does not match shape")
        tensors[name] = arr.reshape(spec["shape"])
    found = content_hash(tensors)
    if found != record["content_hash"]:
        raise CheckpointError(
            f"content hash mismatch: file says {record['content_hash'][:12]}..., "
            f"payloads give {found[:12]}..."
        )
    return Checkpoint(
        tensors=tensors,
        config=record["config"],
        phase=record["phase"],
        extra=record.get("extra", {}),
    )
