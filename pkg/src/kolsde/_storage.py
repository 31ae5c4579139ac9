"""Binary container shared by parameter checkpoints and reference tables:
a JSON header followed by a flat little-endian float64 payload."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"KSDE1\n"


def write_array(path, header: dict, array: np.ndarray) -> None:
    payload = np.ascontiguousarray(array, dtype="<f8")
    head = dict(header)
    head["shape"] = list(payload.shape)
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def read_array(path) -> tuple[dict, np.ndarray]:
    with open(Path(path), "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a kolsde container")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    return header, data.reshape(header["shape"])
