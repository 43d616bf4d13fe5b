"""Binary checkpoint container.

Layout: ``MSPC | u8 version | u32 header-length | JSON header | u32 tensor-count``
followed by ``u16 name-length | name | MSPT tensor`` records.  The JSON header is
written with sorted keys, so identical state always produces identical bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .. import tensor as T

MAGIC = b"MSPC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(header, arrays):
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(head)), head, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(T.to_bytes(np.asarray(arrays[name])))
    return b"".join(parts)


def decode(buf):
    try:
        return _decode(buf)
    except CheckpointError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def _decode(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 9
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + n].decode("utf-8")
        t, pos = T.from_bytes(buf, pos + 2 + n)
        arrays[name] = t.data
    if pos != len(buf):
        raise CheckpointError("trailing bytes after the last tensor")
    return header, arrays


def save(path, header, arrays):
    data = encode(header, arrays)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
