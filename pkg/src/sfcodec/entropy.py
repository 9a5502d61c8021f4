"""Range coder, frequency tables and the byte-level framing helpers.

The coder is the classic 32-bit LZMA-style range coder: ``low`` keeps one
extra carry bit, pending 0xFF bytes are held in a cache until the carry is
resolved, and renormalization happens whenever the range drops below 2**24.
Frequency totals are fixed at 2**16 so every symbol keeps at least 2**8 units
of range.
"""

from __future__ import annotations

import bisect
import math

import crc32c as _crc32c
import numpy as np

from .errors import ChecksumError, DecodeError, TruncatedError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


# ---------------------------------------------------------------------------
# framing helpers


def crc32c(data):
    return _crc32c.crc32c(bytes(data))


def write_varint(value):
    if value < 0:
        raise ValueError("varint must be non-negative")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def read_varint(data, pos):
    """Decode an unsigned LEB128 value at ``pos``; returns ``(value, new_pos)``."""
    result = shift = 0
    while True:
        if pos >= len(data):
            raise TruncatedError("truncated varint")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise DecodeError("varint too long")


def append_checksum(body):
    return bytes(body) + crc32c(body).to_bytes(4, "little")


def split_checksum(data, error=ChecksumError):
    if len(data) < 4:
        raise TruncatedError("stream shorter than its checksum")
    body, tail = data[:-4], data[-4:]
    if crc32c(body) != int.from_bytes(tail, "little"):
        raise error("checksum mismatch")
    return body


# ---------------------------------------------------------------------------
# range coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, start, size, total=TOTAL):
        r = self.range // total
        self.low += r * start
        self.range = r * size
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self):
        # Pick the value inside [low, low + range) with the most trailing zero
        # bytes; the decoder pads with zeros so those bytes can be dropped.
        for nbytes in range(1, 5):
            unit = 1 << (32 - 8 * nbytes)
            v = -(-self.low // unit) * unit
            if v < self.low + self.range:
                self.low = v
                break
        for _ in range(5):
            self._shift_low()
        # The first byte is the initial empty cache and is always zero.
        return bytes(self.out[1:]).rstrip(b"\x00")


class RangeDecoder:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self):
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def target(self, total=TOTAL):
        self._r = self.range // total
        value = self.code // self._r
        if value >= total:
            raise DecodeError("range decoder state out of bounds")
        return value

    def consume(self, start, size):
        self.code -= self._r * start
        self.range = self._r * size
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8


# ---------------------------------------------------------------------------
# frequency tables


def quantize_pmf(pmf, total=TOTAL):
    """Integer frequencies, each >= 1, summing exactly to ``total``."""
    p = np.asarray(pmf, dtype=np.float64)
    n = p.size
    if n == 0 or n > total:
        raise ValueError(f"cannot fit {n} symbols into total {total}")
    p = np.where(np.isfinite(p) & (p > 0), p, 0.0)
    s = p.sum()
    p = p / s if s > 0 else np.full(n, 1.0 / n)
    freqs = 1 + np.floor(p * (total - n)).astype(np.int64)
    rem = total - int(freqs.sum())
    if rem:
        order = np.argsort(-p, kind="stable")
        freqs[order[: rem % n]] += 1
        freqs += rem // n
    return freqs


class FrequencyTable:
    """Integer alphabet ``[offset, offset + len(freqs))`` with optional escape.

    With ``escape=True`` the last frequency slot is an escape symbol; values
    outside the alphabet are coded as escape followed by the zigzagged value
    in two raw 16-bit chunks.
    """

    def __init__(self, freqs, offset, escape=False):
        freqs = [int(f) for f in freqs]
        if any(f < 1 for f in freqs):
            raise ValueError("all frequencies must be >= 1")
        if sum(freqs) != TOTAL:
            raise ValueError(f"frequencies must sum to {TOTAL}, got {sum(freqs)}")
        self.freqs = freqs
        self.cum = [0]
        for f in freqs:
            self.cum.append(self.cum[-1] + f)
        self.offset = int(offset)
        self.escape = escape
        self.size = len(freqs) - (1 if escape else 0)

    @classmethod
    def from_pmf(cls, pmf, offset, escape=False):
        pmf = list(pmf)
        if escape:
            pmf.append(1.0 / TOTAL)
        return cls(quantize_pmf(pmf), offset, escape)

    @property
    def low(self):
        return self.offset

    @property
    def high(self):
        return self.offset + self.size - 1

    def probabilities(self):
        return np.asarray(self.freqs, dtype=np.float64) / TOTAL

    def encode(self, enc, value):
        idx = value - self.offset
        if 0 <= idx < self.size:
            enc.encode(self.cum[idx], self.freqs[idx])
            return
        if not self.escape:
            raise ValueError(
                f"symbol {value} outside alphabet [{self.low}, {self.high}]"
            )
        esc = self.size
        enc.encode(self.cum[esc], self.freqs[esc])
        z = (value << 1) ^ (value >> 63)
        if z >> 32:
            raise ValueError(f"escaped value {value} too large")
        enc.encode(z >> 16, 1)
        enc.encode(z & 0xFFFF, 1)

    def decode(self, dec):
        t = dec.target()
        idx = bisect.bisect_right(self.cum, t) - 1
        dec.consume(self.cum[idx], self.freqs[idx])
        if idx < self.size:
            return idx + self.offset
        hi = dec.target()
        dec.consume(hi, 1)
        lo = dec.target()
        dec.consume(lo, 1)
        z = (hi << 16) | lo
        return (z >> 1) ^ -(z & 1)


def encode_symbols(values, tables):
    """Range-code ``values[i]`` with ``tables[i]``."""
    enc = RangeEncoder()
    for v, t in zip(values, tables):
        t.encode(enc, int(v))
    return enc.finish()


def decode_symbols(data, tables):
    dec = RangeDecoder(data)
    return [t.decode(dec) for t in tables]


def shannon_bits(values, tables):
    """Ideal code length in bits of ``values`` under the quantized tables."""
    bits = 0.0
    for v, t in zip(values, tables):
        idx = int(v) - t.offset
        if 0 <= idx < t.size:
            bits -= math.log2(t.freqs[idx] / TOTAL)
        else:
            bits += 32 - math.log2(t.freqs[t.size] / TOTAL)
    return bits


# ---------------------------------------------------------------------------
# symbol model for the clipped feature latent


class SymbolModel:
    """Add-one smoothed frequency tables over ``[-r_clip, r_clip]``.

    ``tables`` holds one table per latent dimension, or a single shared table.
    Codes longer than the table count cycle through the tables.
    """

    def __init__(self, counts, r_clip, model_id=0):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim == 1:
            counts = counts[None]
        self.r_clip = int(r_clip)
        self.alphabet = 2 * self.r_clip + 1
        if counts.shape[1] != self.alphabet:
            raise ValueError(f"counts need {self.alphabet} columns, got {counts.shape[1]}")
        if not 0 <= model_id < 256:
            raise ValueError("model id must fit one byte")
        self.model_id = model_id
        self.counts = counts
        self.tables = [
            FrequencyTable(quantize_pmf(row + 1), -self.r_clip) for row in counts
        ]

    @property
    def shared(self):
        return len(self.tables) == 1

    def smoothed_probabilities(self):
        c = self.counts + 1
        return c / c.sum(axis=1, keepdims=True)

    def tables_for(self, n):
        k = len(self.tables)
        return [self.tables[i % k] for i in range(n)]

    def state_dict(self):
        return {"counts": self.counts.tolist(), "r_clip": self.r_clip, "model_id": self.model_id}

    @classmethod
    def from_state_dict(cls, d):
        return cls(d["counts"], d["r_clip"], d["model_id"])


def fit_symbol_model(codes, r_clip=20, shared=False, model_id=0):
    """Count symbol occurrences per dimension (or pooled) with add-one smoothing."""
    codes = [np.asarray(c, dtype=np.int64).ravel() for c in codes]
    if not codes:
        raise ValueError("cannot fit a symbol model on an empty collection")
    r = int(r_clip)
    a = 2 * r + 1
    if shared:
        flat = np.concatenate(codes)
        if flat.size and (flat.min() < -r or flat.max() > r):
            raise ValueError("codes exceed the clip range")
        counts = np.bincount(flat + r, minlength=a)[None]
    else:
        lengths = {c.size for c in codes}
        if len(lengths) != 1:
            raise ValueError("per-dimension model needs equal-length codes")
        mat = np.stack(codes)
        if mat.size and (mat.min() < -r or mat.max() > r):
            raise ValueError("codes exceed the clip range")
        counts = np.stack([np.bincount(col + r, minlength=a) for col in mat.T])
    return SymbolModel(counts, r, model_id)


def entropy_encode(code, model):
    """Framed base-layer payload: id byte, varint length, coded bytes, CRC-32C."""
    values = [int(v) for v in np.asarray(code, dtype=np.int64).ravel()]
    payload = encode_symbols(values, model.tables_for(len(values)))
    body = bytes([model.model_id]) + write_varint(len(values)) + payload
    return append_checksum(body)


def read_base_header(data):
    """Return ``(model_id, length)`` after verifying the payload checksum."""
    body = split_checksum(bytes(data))
    if not body:
        raise TruncatedError("empty base payload")
    n, pos = read_varint(body, 1)
    return body[0], n, body[pos:]


def entropy_decode(data, model, length=None):
    model_id, n, payload = read_base_header(data)
    if model_id != model.model_id:
        raise DecodeError(f"payload model id {model_id} != symbol model id {model.model_id}")
    if length is not None and n != length:
        raise DecodeError(f"payload holds {n} symbols, expected {length}")
    return np.asarray(decode_symbols(payload, model.tables_for(n)), dtype=np.int64)
