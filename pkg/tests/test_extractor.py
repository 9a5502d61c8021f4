import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gradcheck import finite_difference_check
from sfcodec.config import toy_config
from sfcodec.extractor import (
    FaceExtractor,
    cross_entropy_sum,
    extract,
    feature_structure_transform,
    make_thumbnail,
    multitask_loss,
    train_extractor,
    verification_logits,
)
from sfcodec.transforms import satd


@pytest.fixture
def cfg():
    c = toy_config().extractor
    c.epochs = 2
    c.num_classes = 3
    return c


def test_shapes(cfg):
    m = FaceExtractor(cfg)
    x = torch.rand(2, 3, 64, 64)
    f = extract(x, m)
    assert f.shape == (2, 16)
    assert extract(x[0], m).shape == (16,)
    assert feature_structure_transform(f, m).shape == (2, 3, 16, 16)
    assert feature_structure_transform(f[0], m).shape == (3, 16, 16)
    assert verification_logits(f, m).shape == (2, 3)
    with pytest.raises(ValueError):
        extract(torch.rand(2, 3, 32, 32), m)
    with pytest.raises(ValueError):
        verification_logits(torch.rand(2, 5), m)


def test_transform_output_in_unit_range(cfg):
    m = FaceExtractor(cfg)
    out = m.transform(1e4 * torch.randn(4, 16))
    assert out.min() >= 0 and out.max() <= 1 and torch.isfinite(out).all()


def multitask_oracle(logits, labels, x_trans, x_s, lambda_s):
    lg = logits.detach().double().numpy()
    lg = lg - lg.max(1, keepdims=True)
    logp = lg - np.log(np.exp(lg).sum(1, keepdims=True))
    ce = -sum(max(logp[i, y], np.log(1e-12)) for i, y in enumerate(labels.tolist()))
    return ce + lambda_s * satd(x_s.detach().numpy(), x_trans.detach().numpy())


def test_multitask_loss_matches_oracle():
    g = torch.Generator().manual_seed(0)
    for _ in range(10):
        logits = torch.randn(5, 4, generator=g, dtype=torch.float64) * 3
        labels = torch.randint(0, 4, (5,), generator=g)
        xt = torch.rand(5, 3, 16, 16, generator=g, dtype=torch.float64)
        xs = torch.rand(5, 3, 16, 16, generator=g, dtype=torch.float64)
        got = float(multitask_loss(logits, labels, xt, xs, 50.0))
        assert got == pytest.approx(multitask_oracle(logits, labels, xt, xs, 50.0), rel=1e-6, abs=1e-6)
    assert float(multitask_loss(logits, labels, xt, xs, 0.0)) == pytest.approx(float(cross_entropy_sum(logits, labels)))
    assert float(multitask_loss(logits, labels, xt, xs, 2.0, classification=False)) == pytest.approx(2 * float(satd(xs, xt)))


def test_cross_entropy_floor():
    logits = torch.tensor([[0.0, 1000.0]])
    assert float(cross_entropy_sum(logits, torch.tensor([0]))) == pytest.approx(-np.log(1e-12))


def test_multitask_loss_gradient():
    g = torch.Generator().manual_seed(1)
    labels = torch.tensor([0, 2])
    logits = torch.randn(2, 3, generator=g)
    xt = torch.rand(2, 3, 8, 8, generator=g)
    xs = torch.rand(2, 3, 8, 8, generator=g)
    worst = finite_difference_check(lambda a, b: multitask_loss(a, labels, b, xs.double(), 50.0), [logits, xt])
    assert worst < 1e-3


def test_training_reduces_loss_and_is_deterministic(cfg):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(12, 3, 64, 64, generator=g)
    y = torch.tensor([0, 1, 2] * 4)
    _, h1 = train_extractor(x, y, cfg)
    _, h2 = train_extractor(x, y, cfg)
    assert h1[0]["train_loss"] == h2[0]["train_loss"]
    with pytest.raises(ValueError):
        train_extractor(x[:0], y[:0], cfg)
    with pytest.raises(ValueError):
        train_extractor(x, torch.zeros(12, dtype=torch.long), cfg)
