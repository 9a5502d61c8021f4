import pytest
import torch

from sfcodec.layers import GDN, conv, deconv, gdn, gdn_inverse, igdn


def test_gdn_formula():
    x = torch.tensor([[1.0, 2.0]])
    beta = torch.tensor([1.0, 2.0])
    gamma = torch.tensor([[0.5, 0.1], [0.2, 0.3]])
    expect = torch.tensor([[1 / (1 + 0.5 + 0.4) ** 0.5, 2 / (2 + 0.2 + 1.2) ** 0.5]])
    assert torch.allclose(gdn(x, beta, gamma), expect)


@pytest.mark.parametrize("diagonal", [True, False])
def test_gdn_inverse_is_exact(diagonal):
    torch.manual_seed(0)
    beta = torch.rand(6, dtype=torch.float64) + 0.5
    gamma = torch.rand(6, 6, dtype=torch.float64) * 0.1
    if diagonal:
        gamma = torch.diag(torch.diagonal(gamma))
    x = torch.randn(4, 6, dtype=torch.float64)
    assert torch.allclose(gdn_inverse(gdn(x, beta, gamma), beta, gamma), x, atol=1e-8)


def test_igdn_is_exact_only_without_coupling():
    beta = torch.ones(3)
    x = torch.randn(5, 3)
    assert torch.allclose(igdn(gdn(x, beta, torch.zeros(3, 3)), beta, torch.zeros(3, 3)), x, atol=1e-6)
    assert not torch.allclose(igdn(gdn(x, beta, 0.5 * torch.ones(3, 3)), beta, 0.5 * torch.ones(3, 3)), x, atol=1e-3)


def test_gdn_param_checks():
    with pytest.raises(ValueError):
        gdn(torch.ones(1, 2), torch.zeros(2), torch.zeros(2, 2))
    with pytest.raises(ValueError):
        gdn(torch.ones(1, 2), torch.ones(2), -torch.ones(2, 2))


def test_gdn_module_shapes():
    m = GDN(4)
    assert m(torch.randn(2, 4)).shape == (2, 4)
    assert GDN(4, inverse=True)(torch.randn(2, 4, 5, 5)).shape == (2, 4, 5, 5)


@pytest.mark.parametrize("k,s", [(3, 1), (5, 2), (4, 2), (3, 2)])
def test_conv_deconv_exact_scaling(k, s):
    x = torch.randn(1, 2, 16, 16)
    assert conv(2, 3, k, s)(x).shape[-1] == 16 // s
    assert deconv(2, 3, k, s)(x).shape[-1] == 16 * s
