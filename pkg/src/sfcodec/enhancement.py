"""Enhancement layer: scale-hyperprior coding of the min-max normalized residual.

The main latent ``y`` is coded under a zero-mean Gaussian whose scale comes
from the decoded hyper latent ``z``; ``z`` itself is coded under a learned,
fully factorized per-channel density. Both use the shared range coder with
tables frozen by :meth:`ResidualCodec.update_tables`.

The transforms work relative to the normalized value of a zero residual,
``-r_min / (r_max - r_min)``, which the decoder knows from the side info, so
the synthesis only learns deviations from ``x_base`` and an all-zero latent
decodes near ``x_base`` rather than to an average residual. An all-zero
latent is sent as two empty blocks: its scales would never be used.
"""

from __future__ import annotations

import logging
import math
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EnhancementConfig
from .entropy import (
    TOTAL,
    FrequencyTable,
    append_checksum,
    decode_symbols,
    encode_symbols,
    quantize_pmf,
    read_varint,
    split_checksum,
    write_varint,
)
from .errors import DecodeError, TruncatedError
from .layers import GDN, conv, deconv, init_weights
from .transforms import NormalizationSideInfo, minmax_denormalize, minmax_normalize, satd

log = logging.getLogger(__name__)


class FactorizedDensity(nn.Module):
    """Per-channel univariate density defined through a monotone cumulative MLP."""

    def __init__(self, channels, filters=(3, 3, 3), init_scale=10.0):
        super().__init__()
        dims = (1, *filters, 1)
        scale = init_scale ** (1 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cdf(self, x):
        # x: (C, 1, n)
        h = x
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            h = torch.matmul(F.softplus(m), h) + b
            if i < len(self.factors):
                h = h + torch.tanh(self.factors[i]) * torch.tanh(h)
        return h

    def likelihood(self, z):
        """Probability mass of the unit bin around each value of ``z`` (N, C, H, W)."""
        n, c = z.shape[:2]
        v = z.transpose(0, 1).reshape(c, 1, -1)
        lower = self.logits_cdf(v - 0.5)
        upper = self.logits_cdf(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        lik = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        return lik.reshape(c, n, *z.shape[2:]).transpose(0, 1)


def gaussian_likelihood(y, scales):
    """Mass of N(0, scale) over the unit bin centred on ``y``."""
    v = y.abs()
    upper = 0.5 * torch.erfc(-(0.5 - v) / (scales * math.sqrt(2)))
    lower = 0.5 * torch.erfc(-(-0.5 - v) / (scales * math.sqrt(2)))
    return upper - lower


def _gaussian_pmf(scale, tail):
    from scipy.stats import norm

    edges = np.arange(-tail, tail + 2, dtype=np.float64) - 0.5
    cdf = norm.cdf(edges / scale)
    pmf = np.diff(cdf)
    esc = max(1.0 - pmf.sum(), 0.0)
    return pmf, esc


class ResidualCodec(nn.Module):
    def __init__(self, cfg: EnhancementConfig, channels=3):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.channels = channels
        a = cfg.analysis
        layers, ch = [], channels
        for i, (k, f, s) in enumerate(a):
            layers.append(conv(ch, f, k, s))
            if i < len(a) - 1:
                layers.append(GDN(f))
            ch = f
        self.g_a = nn.Sequential(*layers)
        outs = [f for _, f, _ in a[:-1]][::-1] + [channels]
        layers, ch = [], a[-1][1]
        for i, ((k, _, s), f) in enumerate(zip(a[::-1], outs)):
            layers.append(deconv(ch, f, k, s))
            if i < len(a) - 1:
                layers.append(GDN(f, inverse=True))
            ch = f
        self.g_s = nn.Sequential(*layers)
        h = cfg.hyper_analysis
        layers, ch = [], a[-1][1]
        for i, (k, f, s) in enumerate(h):
            layers.append(conv(ch, f, k, s))
            if i < len(h) - 1:
                layers.append(nn.ReLU())
            ch = f
        self.h_a = nn.Sequential(*layers)
        outs = [f for _, f, _ in h[:-1]][::-1] + [a[-1][1]]
        layers, ch = [], h[-1][1]
        for i, ((k, _, s), f) in enumerate(zip(h[::-1], outs)):
            layers.append(deconv(ch, f, k, s) if s > 1 else conv(ch, f, k, s))
            if i < len(h) - 1:
                layers.append(nn.ReLU())
            ch = f
        self.h_s = nn.Sequential(*layers)
        init_weights(self)
        self.density = FactorizedDensity(cfg.num_hyper_channels)
        self.register_buffer(
            "scale_table",
            torch.exp(torch.linspace(math.log(cfg.scale_bound), math.log(cfg.scale_max), cfg.num_scales)),
        )
        self.z_tables = None
        self.y_tables = None

    @property
    def downsampling(self):
        return int(np.prod([s for _, _, s in self.cfg.analysis]))

    @property
    def hyper_downsampling(self):
        return int(np.prod([s for _, _, s in self.cfg.hyper_analysis]))

    def scales(self, z_hat):
        return F.softplus(self.h_s(z_hat)).clamp_min(self.cfg.scale_bound)

    def forward(self, x, generator=None, zero_level=0.0):
        """Training pass with additive uniform noise; returns ``(x_hat, likelihoods)``."""
        y = self.g_a(x - zero_level)
        z = self.h_a(y.abs())
        z_t = z + torch.rand(z.shape, generator=generator) - 0.5
        y_t = y + torch.rand(y.shape, generator=generator) - 0.5
        z_lik = self.density.likelihood(z_t)
        y_lik = gaussian_likelihood(y_t, self.scales(z_t))
        return self.g_s(y_t) + zero_level, {"y": y_lik, "z": z_lik}

    def infer(self, x, zero_level=0.0):
        """Rounded-latent pass (what the decoder reproduces)."""
        y = self.g_a(x - zero_level)
        z_hat = torch.round(self.h_a(y.abs()))
        y_hat = torch.round(y)
        y_lik = gaussian_likelihood(y_hat, self.scales(z_hat))
        z_lik = self.density.likelihood(z_hat)
        return self.g_s(y_hat) + zero_level, {"y": y_lik, "z": z_lik}

    # -- coding tables ------------------------------------------------------

    @torch.no_grad()
    def update_tables(self):
        """Freeze integer frequency tables for coding; call after training."""
        t = self.cfg.tail
        grid = torch.arange(-t, t + 1, dtype=torch.float32)
        c = self.cfg.num_hyper_channels
        v = grid.view(1, 1, -1).expand(c, 1, -1)
        lower = self.density.logits_cdf(v - 0.5)
        upper = self.density.logits_cdf(v + 0.5)
        sign = -torch.sign(lower + upper)
        pmf = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()[:, 0].double().numpy()
        self.z_tables = [_table_from(p, max(1.0 - p.sum(), 0.0), -t) for p in pmf]
        self.y_tables = []
        for s in self.scale_table.double().numpy():
            tail = int(min(max(math.ceil(6 * s), 1), 4096))
            p, esc = _gaussian_pmf(s, tail)
            self.y_tables.append(_table_from(p, esc, -tail))

    def tables_state(self):
        return {
            "z": [(t.freqs, t.offset) for t in self.z_tables],
            "y": [(t.freqs, t.offset) for t in self.y_tables],
        }

    def load_tables_state(self, state):
        self.z_tables = [FrequencyTable(f, o, escape=True) for f, o in state["z"]]
        self.y_tables = [FrequencyTable(f, o, escape=True) for f, o in state["y"]]

    def scale_indexes(self, scales):
        idx = torch.searchsorted(self.scale_table, scales.contiguous())
        return idx.clamp_max(len(self.scale_table) - 1)


def _table_from(pmf, esc, offset):
    p = list(np.maximum(pmf, 0.0)) + [max(esc, 1.0 / TOTAL)]
    return FrequencyTable(quantize_pmf(p), offset, escape=True)


def rd_loss(x_norm, x_norm_hat, likelihoods, rate_weight, bound=1e-9):
    """``rate_weight * bits_per_pixel + SATD(x_norm, x_norm_hat)``; returns ``(loss, bpp, dist)``."""
    n, _, h, w = x_norm.shape
    bits = sum(-torch.log2(l.clamp_min(bound)).sum() for l in likelihoods.values())
    bpp = bits / (n * h * w)
    dist = satd(x_norm, x_norm_hat)
    return rate_weight * bpp + dist, bpp, dist


# ---------------------------------------------------------------------------
# payload


class EnhancementPayload:
    def __init__(self, model_id, latent_hw, side, hyper_bytes, main_bytes):
        self.model_id = model_id
        self.latent_hw = tuple(latent_hw)
        self.side = side
        self.hyper_bytes = bytes(hyper_bytes)
        self.main_bytes = bytes(main_bytes)

    def to_bytes(self):
        if not 0 <= self.model_id < 1 << 16:
            raise ValueError("model id must fit two bytes")
        body = bytearray(struct.pack("<H", self.model_id))
        body += write_varint(self.latent_hw[0]) + write_varint(self.latent_hw[1])
        body += self.side.to_bytes()
        for block in (self.hyper_bytes, self.main_bytes):
            body += write_varint(len(block)) + block
        return append_checksum(body)

    @classmethod
    def from_bytes(cls, data):
        body = split_checksum(bytes(data))
        try:
            if len(body) < 2:
                raise TruncatedError("enhancement payload too short")
            (model_id,) = struct.unpack_from("<H", body, 0)
            h, pos = read_varint(body, 2)
            w, pos = read_varint(body, pos)
            side = NormalizationSideInfo.from_bytes(body[pos : pos + 8])
            pos += 8
            blocks = []
            for _ in range(2):
                n, pos = read_varint(body, pos)
                if pos + n > len(body):
                    raise TruncatedError("enhancement block overruns payload")
                blocks.append(body[pos : pos + n])
                pos += n
        except (ValueError, struct.error) as exc:
            raise DecodeError(f"malformed enhancement payload: {exc}") from None
        if pos != len(body):
            raise DecodeError("trailing bytes in enhancement payload")
        return cls(model_id, (h, w), side, *blocks)

    def __eq__(self, other):
        return isinstance(other, EnhancementPayload) and self.to_bytes() == other.to_bytes()


def zero_level(side):
    """Normalized value of a zero residual (0 for the degenerate constant case)."""
    if side.degenerate:
        return 0.0
    return -side.r_min / (side.r_max - side.r_min)


@torch.no_grad()
def compress_residual(model, x_norm, level=0.0):
    """``(C, H, W)`` normalized residual -> ``(latent_hw, hyper_bytes, main_bytes, y_hat)``."""
    if model.z_tables is None:
        raise ValueError("call update_tables() before coding")
    x = x_norm[None]
    y = model.g_a(x - level)
    z_hat = torch.round(model.h_a(y.abs()))
    y_hat = torch.round(y)
    idx = model.scale_indexes(model.scales(z_hat))
    zc = z_hat[0].to(torch.int64)
    z_vals = zc.flatten().tolist()
    z_tabs = [model.z_tables[c] for c in range(zc.shape[0]) for _ in range(zc[0].numel())]
    y_vals = y_hat[0].to(torch.int64).flatten().tolist()
    y_tabs = [model.y_tables[i] for i in idx[0].flatten().tolist()]
    return tuple(y.shape[-2:]), encode_symbols(z_vals, z_tabs), encode_symbols(y_vals, y_tabs), y_hat


@torch.no_grad()
def decompress_residual(model, latent_hw, hyper_bytes, main_bytes):
    h, w = latent_hw
    f = model.hyper_downsampling
    if h % f or w % f:
        raise DecodeError(f"latent size {h}x{w} not divisible by {f}")
    zc, zh, zw = model.cfg.num_hyper_channels, h // f, w // f
    z_tabs = [model.z_tables[c] for c in range(zc) for _ in range(zh * zw)]
    z_hat = torch.tensor(decode_symbols(hyper_bytes, z_tabs), dtype=torch.float32).view(1, zc, zh, zw)
    idx = model.scale_indexes(model.scales(z_hat))
    y_tabs = [model.y_tables[i] for i in idx[0].flatten().tolist()]
    yc = model.cfg.num_latent_channels
    y_hat = torch.tensor(decode_symbols(main_bytes, y_tabs), dtype=torch.float32).view(1, yc, h, w)
    return y_hat


def encode_enhancement(x, x_base, model, model_id=0):
    """Code ``x - x_base`` after per-image min-max normalization."""
    if x.shape != x_base.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_base.shape)}")
    d = model.downsampling * model.hyper_downsampling
    if x.shape[-1] % d or x.shape[-2] % d:
        raise ValueError(f"image size must be a multiple of {d}")
    norm, side = minmax_normalize(x - x_base)
    if side.degenerate:
        # a constant residual is fully described by the side info
        f = model.downsampling
        return EnhancementPayload(model_id, (x.shape[-2] // f, x.shape[-1] // f), side, b"", b"")
    hw, zb, yb, y_hat = compress_residual(model, norm, zero_level(side))
    if not torch.any(y_hat):
        # an all-zero latent needs no scales: send neither block
        zb = yb = b""
    return EnhancementPayload(model_id, hw, side, zb, yb)


@torch.no_grad()
def synthesize_residual(model, payload):
    """Decoded residual in the image domain (before adding ``x_base``)."""
    if payload.side.degenerate:
        h, w = (n * model.downsampling for n in payload.latent_hw)
        return minmax_denormalize(torch.zeros(model.channels, h, w), payload.side)
    if not payload.hyper_bytes and not payload.main_bytes:
        y_hat = torch.zeros(1, model.cfg.num_latent_channels, *payload.latent_hw)
    else:
        y_hat = decompress_residual(model, payload.latent_hw, payload.hyper_bytes, payload.main_bytes)
    norm_hat = (model.g_s(y_hat)[0] + zero_level(payload.side)).clamp(0.0, 1.0)
    return minmax_denormalize(norm_hat, payload.side)


def decode_enhancement(payload, x_base, model, model_id=None):
    if isinstance(payload, (bytes, bytearray)):
        payload = EnhancementPayload.from_bytes(payload)
    if model_id is not None and payload.model_id != model_id:
        raise DecodeError(f"payload was coded with model {payload.model_id}, not {model_id}")
    resi = synthesize_residual(model, payload)
    if resi.shape != x_base.shape:
        raise DecodeError(f"decoded residual shape {tuple(resi.shape)} != base {tuple(x_base.shape)}")
    return (x_base + resi).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# training


def normalized_residuals(images, bases):
    """Stacked normalized residuals and their ``(N, 1, 1, 1)`` zero levels."""
    out, levels = [], []
    for x, b in zip(images, bases):
        n, s = minmax_normalize(x - b)
        out.append(n)
        levels.append(zero_level(s))
    return torch.stack(out), torch.tensor(levels, dtype=torch.float32).view(-1, 1, 1, 1)


def evaluate_enhancement(model, images, bases, model_id=0):
    """Actual coded bpp and PSNR of ``x_rec`` over a set of images."""
    from .evaluation import ms_ssim, psnr

    bpps, psnrs, ssims = [], [], []
    for x, b in zip(images, bases):
        payload = encode_enhancement(x, b, model, model_id)
        rec = decode_enhancement(payload.to_bytes(), b, model)
        bpps.append(8 * len(payload.to_bytes()) / (x.shape[-1] * x.shape[-2]))
        psnrs.append(psnr(rec, x))
        ssims.append(ms_ssim(rec, x))
    return {"bpp": float(np.mean(bpps)), "psnr": float(np.mean(psnrs)), "ms_ssim": float(np.mean(ssims))}


def train_enhancement_model(images, bases, cfg: EnhancementConfig, val=None, progress=None):
    """Train one rate point; returns ``(model, log)`` with coding tables frozen."""
    if len(images) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = ResidualCodec(cfg, images.shape[1])
    norms, levels = normalized_residuals(images, bases)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        sums = np.zeros(3)
        batches = 0
        for idx in torch.randperm(len(norms), generator=gen).split(cfg.batch_size):
            x = norms[idx]
            x_hat, lik = model(x, gen, levels[idx])
            loss, bpp, dist = rd_loss(x, x_hat, lik, cfg.rate_weight, cfg.likelihood_bound)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [float(loss.detach()), float(bpp.detach()), float(dist.detach())]
            batches += 1
        row = dict(zip(("epoch", "loss", "bpp", "satd"), [epoch, *(sums / batches)]))
        history.append(row)
        log.info("enhancement epoch %d (rate_weight=%g): %s", epoch, cfg.rate_weight, row)
        if progress:
            progress(row)
    model.eval()
    model.update_tables()
    if val is not None:
        history.append({"validation": evaluate_enhancement(model, *val)})
    return model, history


def train_enhancement(images, bases, cfg: EnhancementConfig, rate_weights, val=None, progress=None):
    """One model per rate weight; warns when the validation rate is not monotone."""
    import dataclasses

    family = []
    for rw in rate_weights:
        sub = dataclasses.replace(cfg, rate_weight=rw)
        family.append(train_enhancement_model(images, bases, sub, val, progress))
    if val is not None:
        from .evaluation import count_inversions

        rates = [h[-1]["validation"]["bpp"] for _, h in family]
        inv = count_inversions(rate_weights, rates, increasing=False)
        if inv:
            log.warning("validation bpp not monotone in rate_weight (%d inversions)", inv)
    return family
