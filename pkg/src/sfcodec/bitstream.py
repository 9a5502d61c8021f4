"""The ``.sfc`` scalable container.

Layout (multi-byte fixed fields little-endian, varints LEB128)::

    magic "SFC1" | version u8 | flags u8 | H varint | W varint
    | base length varint | base payload
    | [enhancement length varint | enhancement payload]   (flags bit 0)
    | CRC-32C u32 over everything before it

Header bytes (everything except the two payloads) are attributed to the
total rate only, never to a single layer.
"""

from __future__ import annotations

from dataclasses import dataclass

from .entropy import crc32c, read_varint, split_checksum, write_varint
from .errors import BadMagicError, DecodeError, TruncatedError, VersionError

MAGIC = b"SFC1"
VERSION = 1
FLAG_ENHANCEMENT = 0x01
MAX_DIM = 1 << 16
MAX_BLOCK = 1 << 32
EXTENSION = ".sfc"


@dataclass(frozen=True)
class Demuxed:
    base: bytes
    enhancement: bytes | None
    dims: tuple[int, int]


def mux(base_payload, enhancement_payload=None, dims=(0, 0)):
    if base_payload is None:
        raise ValueError("base payload is required")
    h, w = (int(d) for d in dims)
    if not (0 < h <= MAX_DIM and 0 < w <= MAX_DIM):
        raise ValueError(f"image dims {h}x{w} outside 1..{MAX_DIM}")
    for name, block in (("base", base_payload), ("enhancement", enhancement_payload)):
        if block is not None and len(block) >= MAX_BLOCK:
            raise ValueError(f"{name} block of {len(block)} bytes exceeds the container limit")
    flags = FLAG_ENHANCEMENT if enhancement_payload is not None else 0
    out = bytearray(MAGIC) + bytes([VERSION, flags]) + write_varint(h) + write_varint(w)
    out += write_varint(len(base_payload)) + bytes(base_payload)
    if enhancement_payload is not None:
        out += write_varint(len(enhancement_payload)) + bytes(enhancement_payload)
    return bytes(out) + crc32c(out).to_bytes(4, "little")


def _parse_header(data):
    if len(data) < 6:
        if not MAGIC.startswith(bytes(data[:4])):
            raise BadMagicError("not an .sfc stream")
        raise TruncatedError("stream shorter than its header")
    if bytes(data[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:4])!r}")
    if data[4] != VERSION:
        raise VersionError(f"unsupported container version {data[4]}")
    flags = data[5]
    if flags & ~FLAG_ENHANCEMENT:
        raise DecodeError(f"unknown flag bits 0x{flags:02x}")
    h, pos = read_varint(data, 6)
    w, pos = read_varint(data, pos)
    if not (0 < h <= MAX_DIM and 0 < w <= MAX_DIM):
        raise DecodeError(f"image dims {h}x{w} outside 1..{MAX_DIM}")
    return flags, (h, w), pos


def _read_block(data, pos, end, name):
    n, pos = read_varint(data, pos)
    if pos + n > end:
        raise TruncatedError(f"{name} block overruns the stream")
    return pos, pos + n


def _blocks(data, check=True):
    """Offsets of every field; verifies the global checksum when ``check``."""
    data = bytes(data)
    flags, dims, pos = _parse_header(data)
    if check:
        split_checksum(data)
    end = len(data) - 4
    b0, b1 = _read_block(data, pos, end, "base")
    enh = None
    if flags & FLAG_ENHANCEMENT:
        enh = _read_block(data, b1, end, "enhancement")
        stop = enh[1]
    else:
        stop = b1
    if stop != end:
        raise DecodeError(f"{end - stop} unexpected bytes before the checksum")
    return flags, dims, (b0, b1), enh


def demux(data):
    """Exact inverse of :func:`mux`; enhancement is ``None`` when absent."""
    _, dims, (b0, b1), enh = _blocks(data)
    data = bytes(data)
    return Demuxed(data[b0:b1], data[enh[0] : enh[1]] if enh else None, dims)


def read_base_layer(data):
    """Base payload and dims without reading past the base block.

    The global checksum is not consulted (that would mean hashing the
    enhancement bytes); the base payload carries its own CRC-32C, verified
    when it is entropy-decoded.
    """
    view = memoryview(data)
    head = bytes(view[: min(len(view), 32)])
    _, dims, pos = _parse_header(head)
    n, pos = read_varint(head, pos)
    if pos + n > len(view) - 4:
        raise TruncatedError("base block overruns the stream")
    return bytes(view[pos : pos + n]), dims


def has_enhancement(data):
    return bool(_parse_header(bytes(data[:32]))[0] & FLAG_ENHANCEMENT)


def strip_enhancement(data):
    """Base-only stream: drop the enhancement block, clear the flag, re-checksum."""
    d = demux(data)
    return mux(d.base, None, d.dims)


def layer_bytes(data):
    """``(base, enhancement, header)`` byte counts; they sum to ``len(data)``."""
    _, _, (b0, b1), enh = _blocks(data)
    e = enh[1] - enh[0] if enh else 0
    return b1 - b0, e, len(data) - (b1 - b0) - e


def bpp(data, dims=None, layer="total"):
    """``8 * bytes / (H * W)``; the header counts toward ``total`` only."""
    _, hdr_dims, _, _ = _blocks(data)
    h, w = dims or hdr_dims
    base, enh, header = layer_bytes(data)
    n = {"base": base, "enhancement": enh, "total": base + enh + header}
    if layer not in n:
        raise ValueError(f"unknown layer {layer!r}")
    return 8.0 * n[layer] / (h * w)


def layout(data):
    """List of ``(field, offset, length, value)`` rows describing a stream."""
    data = bytes(data)
    flags, (h, w), _, _ = _blocks(data)
    rows = [("magic", 0, 4, MAGIC.decode()), ("version", 4, 1, data[4]), ("flags", 5, 1, f"0x{flags:02x}")]
    pos = 6
    for name, value in (("height", h), ("width", w)):
        _, nxt = read_varint(data, pos)
        rows.append((name, pos, nxt - pos, value))
        pos = nxt
    names = ["base"] + (["enhancement"] if flags & FLAG_ENHANCEMENT else [])
    for name in names:
        n, nxt = read_varint(data, pos)
        rows.append((f"{name} length", pos, nxt - pos, n))
        rows.append((f"{name} payload", nxt, n, data[nxt : nxt + min(n, 8)].hex() + ("..." if n > 8 else "")))
        pos = nxt + n
    rows.append(("crc32c", pos, 4, f"0x{int.from_bytes(data[pos:pos + 4], 'little'):08x}"))
    return rows


def dump(data):
    lines = [f"{'field':<20} {'offset':>8} {'length':>8}  value"]
    lines += [f"{f:<20} {o:>8} {n:>8}  {v}" for f, o, n, v in layout(data)]
    h, w = demux(data).dims
    lines.append(
        "bpp: base %.6f  enhancement %.6f  total %.6f"
        % tuple(bpp(data, (h, w), l) for l in ("base", "enhancement", "total"))
    )
    return "\n".join(lines)
