"""Versioned binary checkpoint container.

Layout (little-endian):

    magic     4s   b"FCK1"
    version   u16
    meta_len  u32, then UTF-8 JSON (sorted keys) for everything scalar:
              kind, step, architecture, run config, RNG state
    n_arrays  u32
    per array: name_len u16, name, dtype_code u8, ndim u8,
               dims u32 * ndim, raw little-endian data
    sha256    32 bytes over all preceding bytes

The trailing digest makes loads fail loudly on any corruption, and its
first 16 bytes identify the exact weights inside compressed streams.
Arrays serialize in sorted name order, so identical state always
produces identical bytes (and an identical hash).
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, UnsupportedVersion

MAGIC = b"FCK1"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i4", 3: "<i8", 4: "<u4"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    kind: str
    step: int
    meta: dict
    arrays: dict
    content_hash: bytes

    @property
    def arch_hash(self):
        """16-byte weight identity embedded in compressed streams."""
        return self.content_hash[:16]


def serialize(*, kind, step, meta, arrays):
    meta_full = dict(meta)
    meta_full["kind"] = str(kind)
    meta_full["step"] = int(step)
    meta_blob = json.dumps(meta_full, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(meta_blob)), meta_blob,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        base = arr.dtype.newbyteorder("<")
        if base not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        arr = arr.astype(base, copy=False)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _CODES[base], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def deserialize(blob):
    if len(blob) < 42:
        raise CheckpointError(f"checkpoint too short ({len(blob)} bytes)")
    body, digest = blob[:-32], blob[-32:]
    actual = hashlib.sha256(body).digest()
    if digest != actual:
        raise CheckpointError("checkpoint digest mismatch")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {body[:4]!r}")
    version, meta_len = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}, expected {VERSION}")
    pos = 10
    try:
        meta = json.loads(body[pos:pos + meta_len].decode())
        pos += meta_len
        (n_arrays,) = struct.unpack_from("<I", body, pos)
        pos += 4
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode()
            pos += name_len
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            if code not in _DTYPES:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dt = np.dtype(_DTYPES[code])
            count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            nbytes = count * dt.itemsize
            if pos + nbytes > len(body):
                raise CheckpointError(f"{name}: truncated array data")
            arrays[name] = np.frombuffer(body, dtype=dt, count=count,
                                         offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint: {e}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes in checkpoint")
    return Checkpoint(kind=meta.pop("kind"), step=meta.pop("step"), meta=meta,
                      arrays=arrays, content_hash=actual)


def save_checkpoint(path, *, kind, step, meta, arrays):
    blob = serialize(kind=kind, step=step, meta=meta, arrays=arrays)
    with open(path, "wb") as f:
        f.write(blob)
    return hashlib.sha256(blob[:-32]).digest()


def load_checkpoint(path):
    with open(path, "rb") as f:
        return deserialize(f.read())


def rng_state_to_json(gen):
    """Generator state as JSON-safe data (PCG64 ints are arbitrary size)."""
    state = gen.bit_generator.state
    return json.loads(json.dumps(state))


def rng_from_json(state):
    if state["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported bit generator {state['bit_generator']}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
