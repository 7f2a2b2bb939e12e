"""Binary checkpoint container.

Layout: 8-byte little-endian unsigned header length, UTF-8 JSON header
(sorted keys, compact), then the payload arrays as little-endian float64,
row-major, in header order. ``header["shapes"]`` lists the array shapes.
"""
import json
import struct

import numpy as np

_LEN = struct.Struct("<Q")
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def dumps(header, arrays):
    header = dict(header)
    header["shapes"] = [list(a.shape) for a in arrays]
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_LEN.pack(len(raw)), raw]
    parts.extend(np.ascontiguousarray(a, dtype=_F64).tobytes() for a in arrays)
    return b"".join(parts)


def loads(blob):
    """Return ``(header, arrays, bytes_consumed)``."""
    if len(blob) < _LEN.size:
        raise CheckpointError("truncated checkpoint")
    (n,) = _LEN.unpack_from(blob, 0)
    start = _LEN.size + n
    try:
        header = json.loads(blob[_LEN.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from exc
    arrays = []
    off = start
    for shape in header.get("shapes", []):
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(blob):
            raise CheckpointError("truncated checkpoint payload")
        arrays.append(np.frombuffer(blob, dtype=_F64, count=count, offset=off).reshape(shape).astype(np.float64))
        off = end
    return header, arrays, off
