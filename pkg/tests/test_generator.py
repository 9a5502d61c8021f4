import numpy as np
import pytest
import torch

from gradcheck import finite_difference_check
from sfcodec.config import paper_config, toy_config
from sfcodec.extractor import FaceExtractor
from sfcodec.generator import TextureGenerator, generate, generator_loss, learning_rate, rec_base, target_pyramid, train_generator
from sfcodec.layers import bicubic_downsample
from sfcodec.transforms import satd, upsample2


@pytest.fixture(scope="module")
def setup():
    cfg = toy_config()
    torch.manual_seed(0)
    head = FaceExtractor(cfg.extractor).transform
    return cfg, head


def test_level_sizes(setup):
    cfg, head = setup
    levels = rec_base(torch.randn(2, 16), TextureGenerator(cfg.generator, head))
    assert [l.shape[-1] for l in levels] == [32, 64]
    single = rec_base(torch.randn(16), TextureGenerator(cfg.generator, head))
    assert single[-1].shape == (3, 64, 64)
    assert paper_config().generator.level_sizes() == [64, 128, 256]
    with pytest.raises(ValueError):
        rec_base(torch.randn(2, 7), TextureGenerator(cfg.generator, head))


def test_zero_details_give_bilinear_chain(setup):
    cfg, head = setup
    g = TextureGenerator(cfg.generator, head)
    for st in g.stages:
        torch.nn.init.zeros_(st.project.weight)
        torch.nn.init.zeros_(st.project.bias)
    f = torch.randn(3, 16)
    with torch.no_grad():
        expect = upsample2(upsample2(head(f)))
        assert torch.allclose(rec_base(f, g)[-1], expect, atol=1e-6)


def test_deterministic_and_bounded(setup):
    cfg, head = setup
    g = TextureGenerator(cfg.generator, head).eval()
    f = torch.randn(4, 16)
    assert torch.equal(generate(g, f), generate(g, f))
    out = generate(g, 1e6 * torch.randn(4, 16))
    assert torch.isfinite(out).all() and out.min() >= 0 and out.max() <= 1


def test_loss_is_sum_of_level_satd():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 64, 64, generator=g, dtype=torch.float64)
    levels = [torch.rand(2, 3, s, s, generator=g, dtype=torch.float64) for s in (16, 32, 64)]
    expect = sum(float(satd(l, bicubic_downsample(x, l.shape[-1]).clamp(0, 1))) for l in levels[:-1]) + float(satd(levels[-1], x))
    assert float(generator_loss(levels, x)) == pytest.approx(expect, abs=1e-6)
    assert float(generator_loss(target_pyramid(x, [16, 32, 64]), x)) == 0.0


def test_generator_loss_gradient():
    g = torch.Generator().manual_seed(2)
    x = torch.rand(1, 3, 16, 16, generator=g, dtype=torch.float64)
    levels = [torch.rand(1, 3, s, s, generator=g) for s in (8, 16)]
    assert finite_difference_check(lambda a, b: generator_loss([a, b], x), levels) < 1e-3


def test_learning_rate_schedule():
    g = paper_config().generator
    assert learning_rate(0, g) == pytest.approx(1e-4)
    assert learning_rate(5, g) == pytest.approx(9e-5)
    assert learning_rate(10**4, g) == pytest.approx(1e-5)


def test_training_loss_decreases_and_is_reproducible(setup):
    cfg, head = setup
    gcfg = cfg.generator
    gcfg.epochs = 3
    g = torch.Generator().manual_seed(0)
    x = torch.rand(8, 3, 64, 64, generator=g)
    f = torch.randn(8, 16, generator=g)
    _, h1 = train_generator(x, f, gcfg, head)
    _, h2 = train_generator(x, f, gcfg, head)
    assert h1[0]["loss"] == h2[0]["loss"]
    assert h1[-1]["loss"] < h1[0]["loss"]
    with pytest.raises(ValueError):
        train_generator(x, f, gcfg, None)
    with pytest.raises(ValueError):
        train_generator(x[:, :, :32, :32], f, gcfg, head)


def test_base_texture_beats_mean_image(toy_run):
    from sfcodec.evaluation import psnr
    from sfcodec.feature_codec import reconstruct
    from sfcodec.pipeline import _split, features_of

    m = toy_run.models
    train, test = _split(toy_run.ws, "train"), _split(toy_run.ws, "test")
    x = test.images
    x_base = generate(m.generator, reconstruct(m.codec, features_of(x, m.extractor)))
    mean = train.images.mean(0, keepdim=True).expand_as(x)
    assert float(satd(x_base, x)) < float(satd(mean, x))
    assert np.mean([psnr(b, t) for b, t in zip(x_base, x)]) > np.mean([psnr(b, t) for b, t in zip(mean, x)])
