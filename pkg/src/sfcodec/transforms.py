"""Deterministic signal transforms shared by the learned modules.

Images are float32 tensors laid out channels-first, ``(C, H, W)`` or batched
``(N, C, H, W)``. The Hadamard/SATD functions only look at the last two axes,
so any leading shape works.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

SATD_BLOCK = 8


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _hadamard(n, normalized):
    h = scipy.linalg.hadamard(n).astype(np.float64)
    if normalized:
        h /= math.sqrt(n)
    return h


def hadamard_matrix(n, normalized=False, dtype=torch.float32, device=None):
    if not _is_pow2(n):
        raise ValueError(f"Hadamard order must be a power of two, got {n}")
    return torch.as_tensor(_hadamard(n, normalized), dtype=dtype, device=device)


def hadamard_block_transform(block, normalized=False):
    """Return ``H @ block @ H.T`` over the last two axes.

    With ``normalized=False`` the matrix has +/-1 entries. With
    ``normalized=True`` each factor is scaled by ``1/sqrt(B)``, which makes the
    transform orthonormal and an involution (Sylvester H is symmetric).
    """
    t = _as_tensor(block)
    if t.ndim < 2 or t.shape[-1] != t.shape[-2]:
        raise ValueError(f"expected square blocks, got shape {tuple(t.shape)}")
    h = hadamard_matrix(t.shape[-1], normalized, dtype=t.dtype, device=t.device)
    out = h @ t @ h.T
    return out if isinstance(block, torch.Tensor) else out.numpy()


def satd(a, b, block=SATD_BLOCK):
    """Mean-per-sample sum of absolute Hadamard coefficients of ``a - b``.

    The difference is split per channel into ``block x block`` tiles (partial
    edge tiles are zero padded), each tile goes through the normalized
    Hadamard transform, and the absolute coefficients are summed and divided
    by ``a.numel()`` (unpadded sample count, all channels and batch entries).
    Differentiable almost everywhere.
    """
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"satd shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if ta.ndim < 2:
        raise ValueError("satd needs at least two spatial axes")
    if not _is_pow2(block):
        raise ValueError(f"block size must be a power of two, got {block}")
    d = ta - tb
    count = d.numel()
    h, w = d.shape[-2:]
    ph, pw = (-h) % block, (-w) % block
    if ph or pw:
        d = F.pad(d, (0, pw, 0, ph))
    lead = d.shape[:-2]
    hb, wb = d.shape[-2] // block, d.shape[-1] // block
    tiles = d.reshape(*lead, hb, block, wb, block).transpose(-3, -2)
    hm = hadamard_matrix(block, True, dtype=d.dtype, device=d.device)
    coeffs = hm @ tiles @ hm.T
    total = coeffs.abs().sum() / max(count, 1)
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return total
    return float(total)


def _as_4d(x):
    if x.ndim == 4:
        return x, None
    if x.ndim == 3:
        return x.unsqueeze(0), 3
    if x.ndim == 2:
        return x[None, None], 2
    raise ValueError(f"expected 2-4 dims, got {x.ndim}")


def _restore(x, nd):
    if nd == 3:
        return x[0]
    if nd == 2:
        return x[0, 0]
    return x


def downsample2(x):
    t, nd = _as_4d(_as_tensor(x))
    out = F.interpolate(t, scale_factor=0.5, mode="bilinear", align_corners=False)
    return _restore(out, nd)


def upsample2(x):
    t, nd = _as_4d(_as_tensor(x))
    out = F.interpolate(t, scale_factor=2.0, mode="bilinear", align_corners=False)
    return _restore(out, nd)


def resize(x, size, mode="bicubic"):
    """Resize to ``size`` (int or (h, w)); bicubic uses antialiasing when shrinking."""
    t, nd = _as_4d(_as_tensor(x))
    if isinstance(size, int):
        size = (size, size)
    if tuple(t.shape[-2:]) == tuple(size):
        return _restore(t, nd)
    kw = {}
    if mode in ("bilinear", "bicubic"):
        kw = {"align_corners": False, "antialias": size[0] < t.shape[-2]}
    out = F.interpolate(t, size=size, mode=mode, **kw)
    return _restore(out, nd)


def pyramid_build(x, levels=3):
    """Gaussian levels (coarsest first) plus Laplacian detail bands.

    ``details[i]`` is what must be added to ``upsample2(levels[i])`` to get
    ``levels[i + 1]``.
    """
    t = _as_tensor(x)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = t.shape[-2:]
    f = 2 ** (levels - 1)
    if h % f or w % f:
        raise ValueError(f"size {h}x{w} not divisible by {f} for {levels} levels")
    gauss = [t]
    for _ in range(levels - 1):
        gauss.append(downsample2(gauss[-1]))
    gauss.reverse()
    details = [fine - upsample2(coarse) for coarse, fine in zip(gauss[:-1], gauss[1:])]
    return gauss, details


def pyramid_collapse(levels, details):
    if len(details) != len(levels) - 1:
        raise ValueError(
            f"pyramid has {len(levels)} levels but {len(details)} detail bands"
        )
    out = _as_tensor(levels[0])
    for d in details:
        out = upsample2(out) + _as_tensor(d)
    return out


@dataclass(frozen=True)
class NormalizationSideInfo:
    r_min: float
    r_max: float

    def __post_init__(self):
        if not (math.isfinite(self.r_min) and math.isfinite(self.r_max)):
            raise ValueError("side info must be finite")
        if self.r_min > self.r_max:
            raise ValueError(f"r_min {self.r_min} > r_max {self.r_max}")

    @property
    def degenerate(self):
        return self.r_min == self.r_max

    def to_bytes(self):
        return struct.pack("<ff", self.r_min, self.r_max)

    @classmethod
    def from_bytes(cls, data):
        if len(data) != 8:
            raise ValueError(f"side info needs 8 bytes, got {len(data)}")
        lo, hi = struct.unpack("<ff", data)
        return cls(lo, hi)


def _f32(v):
    return struct.unpack("<f", struct.pack("<f", float(v)))[0]


def minmax_normalize(resi):
    """Map a residual to [0, 1] with its own min and max.

    The extrema are rounded to float32 first so that the decoder, which only
    sees the serialized side info, inverts with the exact same numbers. A
    constant residual maps to zeros with side info ``(c, c)``.
    """
    t = _as_tensor(resi).to(torch.float32)
    if not torch.isfinite(t).all():
        raise ValueError("residual contains non-finite values")
    side = NormalizationSideInfo(_f32(t.min()), _f32(t.max()))
    if side.degenerate:
        norm = torch.zeros_like(t)
    else:
        norm = ((t - side.r_min) / (side.r_max - side.r_min)).clamp(0.0, 1.0)
    return (norm if isinstance(resi, torch.Tensor) else norm.numpy()), side


def minmax_denormalize(norm, side):
    t = _as_tensor(norm).to(torch.float32)
    out = t * (side.r_max - side.r_min) + side.r_min
    return out if isinstance(norm, torch.Tensor) else out.numpy()
