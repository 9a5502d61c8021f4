"""Building blocks: divisive normalization and descriptor-driven conv stacks."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def _pool(x, beta, gamma, dim):
    xt = x.movedim(dim, -1)
    norm = torch.sqrt(beta + (xt * xt) @ gamma.T)
    return norm.movedim(-1, dim)


def _check_params(beta, gamma):
    if (beta <= 0).any():
        raise ValueError("GDN beta must be strictly positive")
    if (gamma < 0).any():
        raise ValueError("GDN gamma must be non-negative")


def gdn(x, beta, gamma, dim=-1):
    """``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j**2)`` along ``dim``."""
    _check_params(beta, gamma)
    return x / _pool(x, beta, gamma, dim)


def igdn(x, beta, gamma, dim=-1):
    """Multiplicative counterpart used in synthesis transforms.

    This is the usual one-step approximation: the pool is evaluated at the
    input, so ``igdn(gdn(x)) != x`` unless ``gamma == 0``. Use
    :func:`gdn_inverse` for the exact inverse.
    """
    _check_params(beta, gamma)
    return x * _pool(x, beta, gamma, dim)


def gdn_inverse(y, beta, gamma, dim=-1, iters=500, tol=1e-10):
    """Exact inverse of :func:`gdn` by fixed-point iteration on ``x = y * pool(x)``.

    Diagonal ``gamma`` has the closed form ``x**2 = beta y**2 / (1 - gamma y**2)``.
    """
    _check_params(beta, gamma)
    if torch.count_nonzero(gamma - torch.diag(torch.diagonal(gamma))) == 0:
        yt = y.movedim(dim, -1)
        g = torch.diagonal(gamma)
        x = yt * torch.sqrt(beta / (1 - g * yt * yt))
        return x.movedim(-1, dim)
    x = y.clone()
    for _ in range(iters):
        nxt = y * _pool(x, beta, gamma, dim)
        if (nxt - x).abs().max() < tol:
            return nxt
        x = nxt
    return x


class GDN(nn.Module):
    """Channel-wise GDN over dim 1; works for ``(N, C)`` and ``(N, C, H, W)``.

    beta and gamma are stored as square roots so they stay positive.
    """

    def __init__(self, channels, inverse=False, beta_min=1e-6, gamma_init=0.1):
        super().__init__()
        self.inverse = inverse
        self.beta_min = beta_min
        self.beta_sqrt = nn.Parameter(torch.ones(channels))
        self.gamma_sqrt = nn.Parameter(torch.sqrt(gamma_init * torch.eye(channels)))

    @property
    def beta(self):
        return self.beta_sqrt.pow(2) + self.beta_min

    @property
    def gamma(self):
        return self.gamma_sqrt.pow(2)

    def forward(self, x):
        pool = _pool(x, self.beta, self.gamma, 1)
        return x * pool if self.inverse else x / pool


def same_padding(kernel):
    return (kernel - 1) // 2


def conv(in_ch, out_ch, kernel, stride):
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=same_padding(kernel))


def deconv(in_ch, out_ch, kernel, stride):
    """Transposed conv whose output is exactly ``stride`` times the input size."""
    pad = -(-(kernel - stride) // 2)
    out_pad = 2 * pad - (kernel - stride)
    return nn.ConvTranspose2d(
        in_ch, out_ch, kernel, stride=stride, padding=pad, output_padding=out_pad
    )


def init_weights(module):
    """Glorot-uniform weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def bicubic_downsample(x, size):
    if tuple(x.shape[-2:]) == (size, size):
        return x
    return F.interpolate(x, size=(size, size), mode="bicubic", align_corners=False, antialias=True)
