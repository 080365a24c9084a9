"""Binary container used by stream and model-state files.

Layout: magic bytes, u16 LE format version, u32 LE header length, a canonical
key-sorted JSON header, raw little-endian payload blocks, and a CRC-32 trailer
over everything before it. Headers are self-describing so files can be
inspected without loading payloads.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import FormatError


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic: bytes, version: int, header: dict, payloads) -> None:
    """Write header + float64 payload blocks atomically (temp then rename)."""
    import os

    body = bytearray()
    body += magic
    body += struct.pack("<H", version)
    header_bytes = canonical_json(header)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    for arr in payloads:
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(body))
    os.replace(tmp, path)


def read_header(path, magic: bytes, expect_version: int) -> tuple[dict, int]:
    """Read and validate only the header; returns (header, payload offset)."""
    with open(path, "rb") as f:
        prefix = f.read(len(magic) + 6)
        if len(prefix) < len(magic) + 6:
            raise FormatError(f"{path}: truncated container", offset=len(prefix))
        if prefix[: len(magic)] != magic:
            raise FormatError(
                f"{path}: bad magic {prefix[:len(magic)]!r}, expected {magic!r}",
                offset=0,
            )
        (version,) = struct.unpack_from("<H", prefix, len(magic))
        if version != expect_version:
            raise FormatError(
                f"{path}: format version {version}, this build reads {expect_version}",
                offset=len(magic),
            )
        (header_len,) = struct.unpack_from("<I", prefix, len(magic) + 2)
        header_bytes = f.read(header_len)
        if len(header_bytes) < header_len:
            raise FormatError(f"{path}: truncated header", offset=len(prefix))
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(
                f"{path}: header is not valid JSON ({exc})", offset=len(prefix)
            ) from exc
    return header, len(prefix) + header_len


def read_container(path, magic: bytes, expect_version: int) -> tuple[dict, bytes]:
    """Read header and payload bytes, verifying the CRC-32 trailer."""
    header, payload_off = read_header(path, magic, expect_version)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < payload_off + 4:
        raise FormatError(f"{path}: missing checksum trailer", offset=len(raw))
    body, (stored,) = raw[:-4], struct.unpack("<I", raw[-4:])
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(
            f"{path}: CRC-32 mismatch (stored {stored:#010x}, "
            f"computed {actual:#010x})",
            offset=len(raw) - 4,
        )
    return header, body[payload_off:]


def take_f64(buf: bytes, offset: int, shape) -> tuple[np.ndarray, int]:
    """Slice a little-endian float64 block of the given shape out of buf."""
    count = int(np.prod(shape, dtype=np.int64))
    nbytes = count * 8
    if offset + nbytes > len(buf):
        raise FormatError(
            f"payload block of {nbytes} bytes overruns container", offset=offset
        )
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return arr.reshape(shape).astype(np.float64), offset + nbytes
