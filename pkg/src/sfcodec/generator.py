"""Base-layer texture generation: feature -> thumbnail -> Laplacian pyramid synthesis.

Each pyramid stage bilinearly doubles the previous level and adds a learned
detail image predicted from that upsampled level and the stage's hidden
feature maps.
"""

from __future__ import annotations

import copy
import logging

import torch
import torch.nn as nn

from .config import GeneratorConfig
from .layers import bicubic_downsample, conv, init_weights
from .transforms import satd, upsample2

log = logging.getLogger(__name__)


class DetailStage(nn.Module):
    def __init__(self, in_hidden, spec):
        super().__init__()
        layers = []
        ch = 3 + in_hidden
        for k, f, s in spec[:-1]:
            layers += [conv(ch, f, k, s), nn.ReLU()]
            ch = f
        self.body = nn.Sequential(*layers)
        k, f, s = spec[-1]
        self.project = conv(ch, f, k, s)
        self.out_hidden = ch

    def forward(self, up_img, up_hidden):
        h = self.body(torch.cat([up_img, up_hidden], dim=1))
        return self.project(h), h


class TextureGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig, transform_head):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.transform = copy.deepcopy(transform_head)
        self.transform.requires_grad_(False)
        self.stem = conv(3, cfg.hidden_channels, 3, 1)
        stages = []
        hidden = cfg.hidden_channels
        for spec in cfg.stage_specs:
            stage = DetailStage(hidden, spec)
            stages.append(stage)
            hidden = stage.out_hidden
        self.stages = nn.ModuleList(stages)
        init_weights(self.stem)
        init_weights(self.stages)
        for st in self.stages:
            # small initial details: start from the plain bilinear chain
            nn.init.normal_(st.project.weight, std=1e-3)

    def forward(self, f):
        x = self.transform(f)
        h = torch.relu(self.stem(x))
        levels = []
        for stage in self.stages:
            up = upsample2(x)
            detail, h_new = stage(up, upsample2(h))
            x = (up + detail).clamp(0.0, 1.0)
            h = h_new
            levels.append(x)
        return levels


def rec_base(f_rec, model):
    """List of textures, coarsest first; the last entry is the base-layer texture."""
    d = model.transform.fc.in_features
    if f_rec.shape[-1] != d:
        raise ValueError(f"feature dimension {f_rec.shape[-1]} != {d}")
    single = f_rec.ndim == 1
    levels = model(f_rec[None] if single else f_rec)
    return [l[0] for l in levels] if single else levels


def target_pyramid(x, sizes):
    """Bicubic-downsampled ground truth per level; the finest level is ``x`` itself."""
    return [x if s == x.shape[-1] else bicubic_downsample(x, s).clamp(0.0, 1.0) for s in sizes]


def generator_loss(levels, x):
    """Sum over levels of SATD between each generated level and the ground truth at that size."""
    targets = target_pyramid(x, [l.shape[-1] for l in levels])
    total = levels[0].new_zeros(())
    for out, tgt in zip(levels, targets):
        total = total + satd(out, tgt)
    return total


def learning_rate(epoch, cfg: GeneratorConfig):
    """Staircase exponential decay with a floor."""
    lr = cfg.lr_initial * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
    return max(cfg.lr_floor, lr)


@torch.no_grad()
def generate(model, f_rec, batch_size=64):
    model.eval()
    outs = [model(f_rec[i : i + batch_size])[-1] for i in range(0, len(f_rec), batch_size)]
    return torch.cat(outs)


def train_generator(images, f_rec, cfg: GeneratorConfig, transform_head, val=None, progress=None):
    """Train the pyramid stages on frozen features; returns ``(model, log)``.

    ``f_rec`` are the decoded base-layer features for ``images``.
    """
    if transform_head is None:
        raise ValueError("generator needs the fine-tuned feature-structure transform")
    if len(images) != len(f_rec) or len(images) == 0:
        raise ValueError("images and features must be nonempty and aligned")
    if images.shape[-1] != cfg.output_size:
        raise ValueError(f"images must be {cfg.output_size}px, got {images.shape[-1]}")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = TextureGenerator(cfg, transform_head)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr_initial)
    history = []
    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        total, batches = 0.0, 0
        for idx in torch.randperm(len(images), generator=gen).split(cfg.batch_size):
            loss = generator_loss(model(f_rec[idx]), images[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        row = {"epoch": epoch, "lr": lr, "loss": total / batches}
        if val is not None:
            vx, vf = val
            with torch.no_grad():
                model.eval()
                row["val_loss"] = float(generator_loss(model(vf), vx))
        history.append(row)
        log.info("generator epoch %d: %s", epoch, row)
        if progress:
            progress(row)
    model.eval()
    return model, history
