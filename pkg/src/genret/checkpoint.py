"""Train-state checkpoint file.

Layout (little-endian):
    bytes 0-5  magic b"GRDCK1"
    u32        length of the canonical-JSON config echo
    ...        config echo, UTF-8 (sorted keys, no whitespace)
    groups     repeated until EOF:
                   u32 name length, name UTF-8,
                   u32 element count, count * f32 values

Group order is fixed: model parameters in construction order, then per
parameter the optimizer moments (opt.<name>.exp_avg / .exp_avg_sq /
.step), then progress counters (progress.layer / .phase / .epoch).
Values are stored single precision regardless of compute precision.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"GRDCK1"


class CheckpointFormatError(Exception):
    pass


def canonical_json(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def write_checkpoint(path, config: dict, groups: list[tuple[str, np.ndarray]]) -> None:
    out = bytearray()
    out += MAGIC
    echo = canonical_json(config).encode("utf-8")
    out += struct.pack("<I", len(echo))
    out += echo
    for name, values in groups:
        name_bytes = name.encode("utf-8")
        flat = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
        out += struct.pack("<I", len(name_bytes))
        out += name_bytes
        out += struct.pack("<I", flat.size)
        out += flat.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic {blob[:6]!r}")
    off = 6
    (echo_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off : off + echo_len].decode("utf-8"))
    off += echo_len
    groups: dict[str, np.ndarray] = {}
    while off < len(blob):
        if off + 4 > len(blob):
            raise CheckpointFormatError(f"{path}: truncated group header")
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + 4 * count > len(blob):
            raise CheckpointFormatError(f"{path}: truncated group {name!r}")
        groups[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).copy()
        off += 4 * count
    return config, groups
