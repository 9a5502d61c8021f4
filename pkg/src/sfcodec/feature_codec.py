"""Learned compressor for the base-layer feature vector.

Fully-connected analysis/synthesis cascades with GDN/IGDN activations, clipped
quantization (uniform noise while training, rounding at inference), an l1
rate proxy, and range coding under a per-dimension symbol model.
"""

from __future__ import annotations

import copy
import logging

import numpy as np
import torch
import torch.nn as nn

from .config import FeatureCodecConfig
from .entropy import entropy_decode, entropy_encode, fit_symbol_model
from .layers import GDN, init_weights
from .transforms import satd

log = logging.getLogger(__name__)


def _cascade(dims, gdn, inverse):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if gdn and i < len(dims) - 2:
            layers.append(GDN(b, inverse=inverse))
    return nn.Sequential(*layers)


class FeatureCodec(nn.Module):
    def __init__(self, cfg: FeatureCodecConfig, transform_head=None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = [cfg.feature_dim, *cfg.layer_widths]
        self.encoder = _cascade(dims, cfg.use_gdn, inverse=False)
        self.decoder = _cascade(dims[::-1], cfg.use_gdn, inverse=True)
        init_weights(self)
        # Fine-tuned copy of the extractor's feature-structure transform.
        self.transform = copy.deepcopy(transform_head) if transform_head is not None else None
        self.symbol_model = None


def _check_dim(x, n, what):
    if x.shape[-1] != n:
        raise ValueError(f"{what} dimension {x.shape[-1]} != {n}")


def enc_base(f_raw, model):
    _check_dim(f_raw, model.cfg.feature_dim, "feature")
    return model.encoder(f_raw)


def dec_base(code, model):
    _check_dim(code, model.cfg.latent_dim, "latent")
    return model.decoder(torch.as_tensor(code, dtype=torch.float32))


def round_half_away(x):
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def quantize(latent, r_clip=20.0, mode="infer", generator=None, noise_half_width=0.5):
    """Clip to ``[-r_clip, r_clip]``, then add uniform noise (train) or round (infer).

    Gradients flow through the clip for in-range entries only. Inference
    rounds half away from zero and returns an integer tensor.
    """
    clipped = latent.clamp(-r_clip, r_clip)
    if mode == "train":
        noise = torch.rand(clipped.shape, generator=generator, dtype=clipped.dtype)
        return clipped + (noise * 2 - 1) * noise_half_width
    if mode != "infer":
        raise ValueError(f"unknown quantization mode {mode!r}")
    return round_half_away(clipped).to(torch.int64)


def feature_codec_loss(f_raw, f_rec, c_fea, x_s=None, x_trans=None, lambda_1=0.0, lambda_2=0.0):
    """Feature MSE + ``lambda_1`` * l1(latent) + ``lambda_2`` * SATD(thumbnail, transform).

    The first two terms are summed over dimensions and averaged over the
    batch. Returns ``(total, terms)`` where ``terms`` holds each unweighted
    term as a float.
    """
    if f_raw.ndim == 1:
        f_raw, f_rec, c_fea = f_raw[None], f_rec[None], c_fea[None]
    mse = (f_raw - f_rec).pow(2).sum(-1).mean()
    rate = c_fea.abs().sum(-1).mean()
    tex = satd(x_s, x_trans) if x_s is not None else mse.new_zeros(())
    total = mse + lambda_1 * rate + lambda_2 * tex
    terms = {"mse": float(mse.detach()), "l1": float(rate.detach()), "satd": float(tex.detach())}
    return total, terms


def codec_forward(model, f_raw, mode="train", generator=None):
    """Run encoder, quantizer and decoder; returns ``(latent, quantized, f_rec)``."""
    cfg = model.cfg
    y = enc_base(f_raw, model)
    q = quantize(y, cfg.r_clip, mode, generator, cfg.noise_half_width)
    f_rec = dec_base(q.float(), model)
    return y, q, f_rec


@torch.no_grad()
def encode_codes(model, features):
    was = model.training
    model.eval()
    _, q, _ = codec_forward(model, features, "infer")
    model.train(was)
    return q


@torch.no_grad()
def reconstruct(model, features):
    """Inference-mode ``dec_base(quantize(enc_base(f)))``."""
    return dec_base(encode_codes(model, features).float(), model)


def encode_feature(model, f):
    """One feature vector -> framed base-layer payload bytes."""
    if model.symbol_model is None:
        raise ValueError("feature codec has no fitted symbol model")
    return entropy_encode(encode_codes(model, f[None])[0].numpy(), model.symbol_model)


@torch.no_grad()
def decode_feature(model, payload):
    code = entropy_decode(payload, model.symbol_model, model.cfg.latent_dim)
    return dec_base(torch.from_numpy(code).float()[None], model)[0]


def fit_codec_symbol_model(model, features, model_id=0):
    codes = encode_codes(model, features).numpy()
    model.symbol_model = fit_symbol_model(
        list(codes), int(model.cfg.r_clip), shared=model.cfg.shared_symbol_model, model_id=model_id
    )
    return model.symbol_model


def evaluate_codec(model, features, thumbs=None):
    """Inference-mode metrics: coded bytes per feature, MSE, relative l2 error."""
    with torch.no_grad():
        f_rec = reconstruct(model, features)
    out = {
        "mse": float((features - f_rec).pow(2).sum(-1).mean()),
        "rel_l2": float(((features - f_rec).norm(dim=-1) / features.norm(dim=-1).clamp_min(1e-12)).mean()),
    }
    if model.symbol_model is not None:
        sizes = [len(encode_feature(model, f)) for f in features]
        out["bytes"] = float(np.mean(sizes))
    if thumbs is not None and model.transform is not None:
        with torch.no_grad():
            out["satd"] = float(satd(thumbs, model.transform(f_rec)))
    return out


def train_feature_codec(features, thumbs, cfg: FeatureCodecConfig, transform_head=None, model_id=0, val=None, progress=None):
    """Train on frozen extractor features; returns ``(model, log)``.

    ``thumbs`` are the bicubic thumbnails the fine-tuned transform targets.
    The symbol model is fitted on the training codes at the end.
    """
    if len(features) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = FeatureCodec(cfg, transform_head)
    params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    use_tex = cfg.lambda_2 > 0 and model.transform is not None
    if model.transform is not None:
        model.transform.requires_grad_(cfg.finetune_transform and use_tex)
        if cfg.finetune_transform and use_tex:
            params += list(model.transform.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        sums, batches = {}, 0
        for idx in torch.randperm(len(features), generator=gen).split(cfg.batch_size):
            f = features[idx]
            y, q, f_rec = codec_forward(model, f, "train", gen)
            c = q if cfg.l1_on_noisy else y
            if use_tex:
                loss, terms = feature_codec_loss(f, f_rec, c, thumbs[idx], model.transform(f_rec), cfg.lambda_1, cfg.lambda_2)
            else:
                loss, terms = feature_codec_loss(f, f_rec, c, lambda_1=cfg.lambda_1)
            opt.zero_grad()
            loss.backward()
            opt.step()
            terms["loss"] = float(loss.detach())
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        history.append(row)
        log.info("feature codec epoch %d: %s", epoch, row)
        if progress:
            progress(row)
    model.eval()
    fit_codec_symbol_model(model, features, model_id)
    if val is not None:
        history.append({"validation": evaluate_codec(model, *val)})
    return model, history
