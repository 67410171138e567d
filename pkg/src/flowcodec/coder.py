"""Compressed stream container and symbol-grid coding.

Stream layout (little-endian):

    magic      4s   b"FCS1"
    version    u16
    flags      u16  bit 0: frequency tables embedded
                    bit 1: unquantized debug payload (raw float32 code)
    orig_h/w   u32  image size before padding
    pad_h/w    u32  image size fed to the transform
    y_h/w/c    u16  code tensor geometry
    reserved   u16
    arch_hash  16s  identifies the checkpoint the stream was coded with
    [tables]   u32 length + blob        (only with flag bit 0)
    payload    u64 length + bytes
    crc32      u32 over everything above

Everything after the fixed header is length-prefixed, the CRC covers
the whole stream, and decoding rejects trailing bytes, so corruption
and truncation are detected before any symbol is interpreted.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import rangecoder
from .entropy import CdfTable
from .errors import CorruptStream, ShapeError, TruncatedStream, UnsupportedVersion

MAGIC = b"FCS1"
VERSION = 1
FLAG_TABLES = 1
FLAG_RAW_FLOAT = 2

_HEADER = struct.Struct("<4sHHIIIIHHHH16s")


@dataclass
class StreamInfo:
    version: int
    flags: int
    orig_size: tuple
    padded_size: tuple
    y_shape: tuple
    arch_hash: bytes
    tables_blob: bytes
    payload: bytes

    @property
    def self_describing(self):
        return bool(self.flags & FLAG_TABLES)

    @property
    def raw_float(self):
        return bool(self.flags & FLAG_RAW_FLOAT)

    @property
    def header_bytes(self):
        """Stream bytes that are not entropy-coded payload."""
        return _HEADER.size + (4 + len(self.tables_blob) if self.self_describing else 0) + 8 + 4


def pack_stream(*, orig_size, padded_size, y_shape, arch_hash, payload,
                tables_blob=None, raw_float=False):
    """Assemble a stream; returns bytes."""
    if len(arch_hash) != 16:
        raise ShapeError("arch_hash must be 16 bytes")
    flags = 0
    if tables_blob is not None:
        flags |= FLAG_TABLES
    if raw_float:
        flags |= FLAG_RAW_FLOAT
    yh, yw, yc = y_shape
    head = _HEADER.pack(MAGIC, VERSION, flags,
                        orig_size[0], orig_size[1],
                        padded_size[0], padded_size[1],
                        yh, yw, yc, 0, arch_hash)
    parts = [head]
    if tables_blob is not None:
        parts.append(struct.pack("<I", len(tables_blob)))
        parts.append(tables_blob)
    parts.append(struct.pack("<Q", len(payload)))
    parts.append(payload)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def unpack_stream(blob):
    """Validate and split a stream; returns StreamInfo."""
    if len(blob) < _HEADER.size + 12:
        raise TruncatedStream(f"stream too short ({len(blob)} bytes)")
    (magic, version, flags, oh, ow, ph, pw, yh, yw, yc, _res,
     arch_hash) = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptStream(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"stream version {version}, expected {VERSION}")
    crc_stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    crc_actual = zlib.crc32(blob[:-4])
    if crc_stored != crc_actual:
        raise CorruptStream(f"crc mismatch: stored {crc_stored:#x}, actual {crc_actual:#x}")
    pos = _HEADER.size
    tables_blob = b""
    if flags & FLAG_TABLES:
        if pos + 4 > len(blob) - 4:
            raise TruncatedStream("stream ends inside table length")
        (tlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + tlen > len(blob) - 4:
            raise TruncatedStream("stream ends inside tables")
        tables_blob = blob[pos:pos + tlen]
        pos += tlen
    if pos + 8 > len(blob) - 4:
        raise TruncatedStream("stream ends inside payload length")
    (plen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if pos + plen > len(blob) - 4:
        raise TruncatedStream(f"payload declares {plen} bytes, "
                              f"{len(blob) - 4 - pos} available")
    payload = blob[pos:pos + plen]
    pos += plen
    if pos + 4 != len(blob):
        raise CorruptStream(f"{len(blob) - pos - 4} trailing bytes after payload")
    return StreamInfo(version=version, flags=flags, orig_size=(oh, ow),
                      padded_size=(ph, pw), y_shape=(yh, yw, yc),
                      arch_hash=arch_hash, tables_blob=tables_blob,
                      payload=payload)


def _flatten_tables(table):
    starts = np.zeros(table.channels + 1, dtype=np.int64)
    for c in range(table.channels):
        starts[c + 1] = starts[c] + len(table.cdfs[c])
    flat = (np.concatenate(table.cdfs).astype(np.uint32) if table.channels
            else np.zeros(0, dtype=np.uint32))
    return flat, starts


def encode_grid(symbols, table):
    """Entropy-code an (h, w, C) int32 grid channel-major; returns payload."""
    h, w, c = symbols.shape
    if c != table.channels:
        raise ShapeError(f"grid has {c} channels, tables have {table.channels}")
    if symbols.size == 0:
        return b""
    flat_syms = np.ascontiguousarray(symbols.transpose(2, 0, 1).reshape(-1))
    starts = np.arange(c + 1, dtype=np.int64) * (h * w)
    cdf_flat, cdf_starts = _flatten_tables(table)
    return rangecoder.encode_channels(flat_syms, starts, cdf_flat, cdf_starts,
                                      table.offsets)


def decode_grid(payload, table, h, w):
    """Inverse of encode_grid; returns the (h, w, C) int32 grid."""
    c = table.channels
    if h * w * c == 0:
        return np.zeros((h, w, c), dtype=np.int32)
    counts = np.full(c, h * w, dtype=np.int64)
    cdf_flat, cdf_starts = _flatten_tables(table)
    flat = rangecoder.decode_channels(payload, counts, cdf_flat, cdf_starts,
                                      table.offsets)
    return flat.reshape(c, h, w).transpose(1, 2, 0)


def compress_code(symbols, *, orig_size, padded_size, arch_hash, table,
                  include_tables=False):
    """Symbol grid -> complete stream bytes."""
    payload = encode_grid(symbols, table)
    return pack_stream(orig_size=orig_size, padded_size=padded_size,
                       y_shape=symbols.shape, arch_hash=arch_hash,
                       payload=payload,
                       tables_blob=table.to_bytes() if include_tables else None)


def compress_code_raw(y_data, *, orig_size, padded_size, arch_hash):
    """Unquantized debug stream: the float32 code tensor stored verbatim."""
    y32 = np.ascontiguousarray(y_data, dtype="<f4")
    return pack_stream(orig_size=orig_size, padded_size=padded_size,
                       y_shape=y32.shape, arch_hash=arch_hash,
                       payload=y32.tobytes(), raw_float=True)


def decompress_code(blob, table=None):
    """Stream bytes -> (StreamInfo, code array).

    Quantized streams return an int32 grid; raw-float debug streams
    return the stored float32 tensor.  For quantized streams the tables
    come from the stream itself when embedded, else from the caller.
    """
    info = unpack_stream(blob)
    yh, yw, yc = info.y_shape
    if info.raw_float:
        expect = yh * yw * yc * 4
        if len(info.payload) != expect:
            raise CorruptStream(f"raw payload is {len(info.payload)} bytes, "
                                f"expected {expect}")
        code = np.frombuffer(info.payload, dtype="<f4").reshape(yh, yw, yc).copy()
        return info, code
    if info.self_describing:
        table, consumed = CdfTable.from_bytes(info.tables_blob)
        if consumed != len(info.tables_blob):
            raise CorruptStream("trailing bytes in table blob")
    if table is None:
        raise CorruptStream("stream has no embedded tables and none supplied")
    if table.channels != yc:
        raise CorruptStream(f"tables cover {table.channels} channels, "
                            f"stream carries {yc}")
    return info, decode_grid(info.payload, table, yh, yw)
