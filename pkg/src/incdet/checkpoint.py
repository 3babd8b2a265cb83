"""Binary detector checkpoints.

Layout: 8-byte magic, little-endian uint32 format version, uint32 header
length, a UTF-8 JSON header (architecture config, class ids, parameter
count, dtype, provenance) and the flat parameter vector as raw
little-endian floats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .detector import Detector, DetectorConfig

MAGIC = b"INCDETCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def params_digest(det: Detector) -> str:
    theta = det.flat_params().numpy()
    return hashlib.sha256(theta.astype(theta.dtype.newbyteorder("<")).tobytes()).hexdigest()


def checkpoint_bytes(det: Detector, extra: dict | None = None) -> bytes:
    theta = det.flat_params().numpy()
    dtype = np.dtype(det.config.dtype).newbyteorder("<")
    header = {
        "config": det.config.to_dict(),
        "class_ids": list(det.class_ids),
        "n_params": int(theta.size),
        "dtype": det.config.dtype,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(raw)) + raw + theta.astype(dtype).tobytes()


def save_checkpoint(det: Detector, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(det, extra))


def checkpoint_from_bytes(blob: bytes) -> tuple[Detector, dict]:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a detector checkpoint (bad magic)")
    version, n_header = struct.unpack("<II", blob[8:16])
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {VERSION})")
    if 16 + n_header > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[16 : 16 + n_header].decode("utf-8"))
        cfg = DetectorConfig.from_dict(header["config"])
        n_params = int(header["n_params"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header ({exc})") from exc
    if list(cfg.class_ids) != list(header.get("class_ids", [])):
        raise CheckpointError("class id list disagrees with architecture config")
    dtype = np.dtype(cfg.dtype).newbyteorder("<")
    body = blob[16 + n_header :]
    if len(body) != n_params * dtype.itemsize:
        raise CheckpointError(f"parameter block holds {len(body)} bytes, header declares {n_params} {cfg.dtype} values")
    det = Detector(cfg)
    expected = sum(p.numel() for p in det.parameters())
    if expected != n_params:
        raise CheckpointError(f"architecture has {expected} parameters, checkpoint {n_params}")
    det.set_flat_params(np.frombuffer(body, dtype=dtype).astype(cfg.dtype))
    return det, header.get("extra", {})


def load_checkpoint(path) -> Detector:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return checkpoint_from_bytes(path.read_bytes())[0]
