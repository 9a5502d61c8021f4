"""Multi-task face feature extractor.

One backbone produces the embedding; two heads hang off it: a softmax
identity classifier and a deconvolutional feature-structure transform that
paints a small thumbnail of the face from the embedding alone.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ExtractorConfig
from .layers import bicubic_downsample, conv, deconv, init_weights
from .transforms import satd

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


class TransformHead(nn.Module):
    """Feature vector -> ``(3, transform_size, transform_size)`` image in [0, 1]."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        stride = int(np.prod([s for _, _, s in cfg.transform_head]))
        self.seed_size = cfg.transform_size // stride
        self.seed_channels = cfg.transform_seed_channels
        self.fc = nn.Linear(cfg.embed_dim, self.seed_channels * self.seed_size**2)
        layers = []
        ch = self.seed_channels
        for i, (k, f, s) in enumerate(cfg.transform_head):
            layers.append(deconv(ch, f, k, s))
            if i < len(cfg.transform_head) - 1:
                layers.append(nn.ReLU())
            ch = f
        self.body = nn.Sequential(*layers)

    def forward(self, f):
        h = F.relu(self.fc(f)).view(-1, self.seed_channels, self.seed_size, self.seed_size)
        return self.body(h).clamp(0.0, 1.0)


class FaceExtractor(nn.Module):
    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers = []
        ch = cfg.channels
        for k, f, s in cfg.backbone:
            layers += [conv(ch, f, k, s), nn.BatchNorm2d(f), nn.ReLU()]
            ch = f
        self.backbone = nn.Sequential(*layers)
        self.embed = nn.Linear(ch, cfg.embed_dim)
        self.classifier = nn.Linear(cfg.embed_dim, cfg.num_classes)
        self.transform = TransformHead(cfg)
        init_weights(self)
        # start mid-range so the output clamp passes gradients
        nn.init.constant_(self.transform.body[-1].bias, 0.5)

    def forward(self, x):
        h = self.backbone(x).mean(dim=(2, 3))
        return self.embed(h)


def _check_images(x, cfg):
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[1] != cfg.channels or tuple(x.shape[-2:]) != (cfg.input_size,) * 2:
        raise ValueError(
            f"expected images of shape (N, {cfg.channels}, {cfg.input_size}, {cfg.input_size}), "
            f"got {tuple(x.shape)}"
        )
    return x


@torch.no_grad()
def extract(images, model):
    """Embeddings in inference mode; a single ``(C, H, W)`` image gives a 1-D vector."""
    single = images.ndim == 3
    x = _check_images(images, model.cfg)
    was = model.training
    model.eval()
    f = model(x)
    model.train(was)
    return f[0] if single else f


def verification_logits(f, model):
    if f.shape[-1] != model.cfg.embed_dim:
        raise ValueError(f"feature dimension {f.shape[-1]} != {model.cfg.embed_dim}")
    return model.classifier(f)


def feature_structure_transform(f, model):
    single = f.ndim == 1
    out = model.transform(f.unsqueeze(0) if single else f)
    return out[0] if single else out


def make_thumbnail(images, size):
    """Bicubic downsample to the transform-head size (the SATD target)."""
    return bicubic_downsample(images, size).clamp(0.0, 1.0)


def cross_entropy_sum(logits, labels):
    """Batch-summed cross-entropy with the log probability floored at ``log(1e-12)``."""
    logp = F.log_softmax(logits, dim=-1).clamp(min=float(np.log(LOG_EPS)))
    return -logp.gather(-1, labels.view(-1, 1)).sum()


def multitask_loss(logits, labels, x_trans, x_s, lambda_s, classification=True):
    """Identity cross-entropy plus ``lambda_s`` times SATD between thumbnail and transform.

    ``classification=False`` drops the first term (pure SATD regression);
    ``lambda_s=0`` drops the second.
    """
    loss = x_trans.new_zeros(())
    if classification:
        loss = loss + cross_entropy_sum(logits, labels)
    if lambda_s:
        loss = loss + lambda_s * satd(x_s, x_trans)
    return loss


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def evaluate_extractor(model, images, labels, batch_size=None):
    """Mean per-batch multitask loss and accuracy, inference mode."""
    cfg = model.cfg
    batch_size = batch_size or cfg.batch_size
    model.eval()
    total, correct, batches = 0.0, 0, 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x, y = images[i : i + batch_size], labels[i : i + batch_size]
            f = model(x)
            logits = model.classifier(f)
            loss = multitask_loss(logits, y, model.transform(f), make_thumbnail(x, cfg.transform_size), cfg.lambda_s)
            total += float(loss)
            batches += 1
            correct += int((logits.argmax(-1) == y).sum())
    return total / batches, correct / len(images)


def train_extractor(images, labels, cfg: ExtractorConfig, val=None, classification=True, progress=None):
    """Adam at a fixed learning rate; returns ``(model, log)``.

    ``images`` is ``(N, C, H, W)`` in [0, 1], ``labels`` are ints in
    ``[0, num_classes)``. ``log`` holds one dict per epoch with the mean
    training loss (and validation loss/accuracy when ``val`` is given).
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if classification and len(torch.unique(labels)) < 2:
        raise ValueError("need at least two identities to train the classifier")
    if int(labels.max()) >= cfg.num_classes or int(labels.min()) < 0:
        raise ValueError("labels out of range for num_classes")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = FaceExtractor(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    thumbs = make_thumbnail(images, cfg.transform_size)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        total, batches = 0.0, 0
        for idx in _batches(len(images), cfg.batch_size, gen):
            f = model(images[idx])
            loss = multitask_loss(
                model.classifier(f), labels[idx], model.transform(f), thumbs[idx], cfg.lambda_s, classification
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        row = {"epoch": epoch, "train_loss": total / batches}
        if val is not None:
            row["val_loss"], row["val_accuracy"] = evaluate_extractor(model, *val)
        history.append(row)
        log.info("extractor epoch %d: %s", epoch, row)
        if progress:
            progress(row)
    model.eval()
    return model, history
