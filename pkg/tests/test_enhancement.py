import numpy as np
import pytest
import torch
from scipy.stats import norm

from sfcodec.config import toy_config
from sfcodec.enhancement import (
    EnhancementPayload,
    FactorizedDensity,
    ResidualCodec,
    compress_residual,
    decode_enhancement,
    decompress_residual,
    encode_enhancement,
    gaussian_likelihood,
    rd_loss,
    synthesize_residual,
    train_enhancement_model,
    zero_level,
)
from sfcodec.errors import ChecksumError, DecodeError
from sfcodec.transforms import NormalizationSideInfo, minmax_denormalize, minmax_normalize, satd


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = ResidualCodec(toy_config().enhancement).eval()
    m.update_tables()
    return m


@pytest.fixture
def pair():
    g = torch.Generator().manual_seed(5)
    x = torch.rand(3, 64, 64, generator=g)
    base = (x + 0.1 * torch.randn(3, 64, 64, generator=g)).clamp(0, 1)
    return x, base


def test_gaussian_likelihood_matches_scipy():
    y = torch.tensor([0.0, 1.0, -2.0, 5.0], dtype=torch.float64)
    s = torch.tensor([0.5, 1.0, 2.0, 0.11], dtype=torch.float64)
    expect = norm.cdf((y + 0.5) / s) - norm.cdf((y - 0.5) / s)
    np.testing.assert_allclose(gaussian_likelihood(y, s).numpy(), expect, atol=1e-12)


def test_factorized_density_normalizes():
    d = FactorizedDensity(4)
    grid = torch.arange(-200, 201, dtype=torch.float32).view(1, 1, -1, 1).expand(1, 4, -1, 1)
    mass = d.likelihood(grid).sum(dim=2).squeeze()
    assert torch.allclose(mass, torch.ones(4), atol=1e-3)


def test_rd_loss_term_oracles():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    xh = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    lik = {"y": torch.rand(2, 8, 2, 2, generator=g, dtype=torch.float64), "z": torch.rand(2, 4, 1, 1, generator=g, dtype=torch.float64)}
    loss, bpp, dist = rd_loss(x, xh, lik, 0.01)
    bits = sum(-np.log2(v.numpy()).sum() for v in lik.values())
    assert float(bpp) == pytest.approx(bits / (2 * 16 * 16), rel=1e-9)
    assert float(dist) == pytest.approx(satd(x.numpy(), xh.numpy()), rel=1e-6)
    assert float(loss) == pytest.approx(0.01 * bits / 512 + satd(x.numpy(), xh.numpy()), rel=1e-6)
    ones = {"y": torch.ones(1, 1, 1, 1)}
    assert float(rd_loss(x[:1], x[:1], ones, 1.0)[0]) == 0.0
    zeros = {"y": torch.zeros(1, 1, 1, 1)}
    assert float(rd_loss(x[:1], x[:1], zeros, 1.0, bound=1e-9)[1]) == pytest.approx(-np.log2(1e-9) / 256)


def test_latents_transported_losslessly(model, pair):
    x, base = pair
    norm_, side = minmax_normalize(x - base)
    hw, zb, yb, y_hat = compress_residual(model, norm_, zero_level(side))
    assert torch.equal(decompress_residual(model, hw, zb, yb), y_hat)


def test_payload_roundtrip_and_additivity(model, pair):
    x, base = pair
    p = encode_enhancement(x, base, model, model_id=3)
    q = EnhancementPayload.from_bytes(p.to_bytes())
    assert q == p and q.model_id == 3 and q.side == p.side
    resi = synthesize_residual(model, q)
    rec = decode_enhancement(p.to_bytes(), base, model)
    unclamped = base + resi
    inside = (unclamped >= 0) & (unclamped <= 1)
    assert torch.allclose((rec - base)[inside], resi[inside], atol=1e-6)
    assert torch.equal(rec, decode_enhancement(p.to_bytes(), base, model))


def test_zero_residual_returns_base_exactly(model, pair):
    _, base = pair
    p = encode_enhancement(base, base, model)
    assert p.side.degenerate and p.side.r_min == 0.0
    assert torch.equal(decode_enhancement(p, base, model), base)
    # only the side info is sent
    assert len(p.to_bytes()) < 64


def test_errors(model, pair):
    x, base = pair
    with pytest.raises(ValueError):
        encode_enhancement(x, base[:, :32], model)
    data = bytearray(encode_enhancement(x, base, model, 1).to_bytes())
    with pytest.raises(DecodeError):
        decode_enhancement(bytes(data), base, model, model_id=2)
    data[3] ^= 0xFF
    with pytest.raises(ChecksumError):
        decode_enhancement(bytes(data), base, model)
    with pytest.raises(DecodeError):
        EnhancementPayload.from_bytes(b"\x00" * 6)
    fresh = ResidualCodec(toy_config().enhancement)
    with pytest.raises(ValueError):
        encode_enhancement(x, base, fresh)


def test_training_is_deterministic_and_rate_tracks_weight():
    cfg = toy_config().enhancement
    cfg.epochs = 2
    g = torch.Generator().manual_seed(0)
    x = torch.rand(8, 3, 64, 64, generator=g)
    base = (x + 0.1 * torch.randn(8, 3, 64, 64, generator=g)).clamp(0, 1)
    cfg.rate_weight = 1.0
    _, h1 = train_enhancement_model(x, base, cfg)
    _, h2 = train_enhancement_model(x, base, cfg)
    assert h1[0] == h2[0]
    cfg.rate_weight = 1e-4
    _, h3 = train_enhancement_model(x, base, cfg)
    assert h3[-1]["bpp"] > h1[-1]["bpp"]


def test_zero_latent_sends_empty_blocks(model, pair):
    x, base = pair
    norm_, side = minmax_normalize(x - base)
    hw, _, _, _ = compress_residual(model, norm_, zero_level(side))
    empty = EnhancementPayload(0, hw, side, b"", b"")
    with torch.no_grad():
        expect = (model.g_s(torch.zeros(1, model.cfg.num_latent_channels, *hw))[0] + zero_level(side)).clamp(0, 1)
    assert torch.allclose(synthesize_residual(model, empty), minmax_denormalize(expect, side))
    assert len(EnhancementPayload.from_bytes(empty.to_bytes()).main_bytes) == 0
    # an analysis transform that outputs zeros makes the encoder drop both blocks
    import copy

    silent = copy.deepcopy(model)
    torch.nn.init.zeros_(silent.g_a[-1].weight)
    torch.nn.init.zeros_(silent.g_a[-1].bias)
    p = encode_enhancement(x, base, silent)
    assert p.hyper_bytes == b"" and p.main_bytes == b""
    assert torch.equal(decode_enhancement(p, base, silent), (base + synthesize_residual(silent, empty)).clamp(0, 1))
