"""Staged training, checkpoints, encode/decode entry points and evaluation.

A workspace directory holds everything one experiment produces::

    manifest.json  pairs.txt  config.json  registry.json
    checkpoints/<kind>-<sha256 prefix>.pt
    logs/<stage>.json  curves/*.csv|png  records/*.json

``registry.json`` maps each stage to its content-addressed checkpoints and the
hashes of the predecessors they were trained against, so a stage refuses to
run (or load) when its inputs are missing or were altered.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import bitstream
from .config import (
    EnhancementConfig,
    ExtractorConfig,
    FeatureCodecConfig,
    GeneratorConfig,
    config_to_dict,
    load_config,
    save_config,
    sub_config_from_dict,
)
from .data import DatasetManifest, Pair, ingest, load_image, load_split, make_pairs, pair_lookup, read_pairs, write_pairs
from .entropy import SymbolModel, read_base_header
from .errors import ConfigError, DataError, DecodeError, DependencyError
from .evaluation import RatePoint, count_inversions, mean_metric, ms_ssim, psnr, rate_curve, resolve_pairs, saturation_point, verification_accuracy
from .extractor import FaceExtractor, TransformHead, extract, make_thumbnail, train_extractor
from .enhancement import EnhancementPayload, ResidualCodec, decode_enhancement, encode_enhancement, train_enhancement_model
from .feature_codec import FeatureCodec, decode_feature, evaluate_codec, reconstruct, train_feature_codec
from .generator import TextureGenerator, generate, train_generator
from .transforms import resize

log = logging.getLogger(__name__)

STAGES = ("extractor", "feature_codec", "generator", "enhancement")
CHECKPOINT_FORMAT = "sfc-checkpoint"
CHECKPOINT_VERSION = 1
OUTPUT_ENV = "SFC_OUTPUT"


def default_workspace():
    return Path(os.environ.get(OUTPUT_ENV, "runs/default"))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, kind, config, state_dict, extras=None):
    """Write a versioned checkpoint named by its content hash; returns ``(path, sha256)``."""
    buf = io.BytesIO()
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": kind,
            "config": dataclasses.asdict(config),
            "state_dict": state_dict,
            "extras": extras or {},
        },
        buf,
    )
    data = buf.getvalue()
    digest = hashlib.sha256(data).hexdigest()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{kind}-{digest[:16]}.pt"
    path.write_bytes(data)
    return path, digest


def load_checkpoint(path, kind=None, sha256=None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DependencyError(kind or "checkpoint", f"cannot read checkpoint {path}: {exc}") from None
    if sha256 is not None and hashlib.sha256(data).hexdigest() != sha256:
        raise DependencyError(kind or "checkpoint", f"checkpoint {path} does not match its recorded hash")
    ck = torch.load(io.BytesIO(data), weights_only=False)
    if ck.get("format") != CHECKPOINT_FORMAT or ck.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    if kind is not None and ck["kind"] != kind:
        raise ConfigError(f"{path} holds a {ck['kind']} checkpoint, expected {kind}")
    return ck


def _extractor_cfg(ck):
    return sub_config_from_dict(ExtractorConfig, ck["extras"]["extractor_config"])


def build_extractor(ck):
    model = FaceExtractor(sub_config_from_dict(ExtractorConfig, ck["config"]))
    model.load_state_dict(ck["state_dict"])
    return model.eval()


def build_feature_codec(ck):
    head = TransformHead(_extractor_cfg(ck))
    model = FeatureCodec(sub_config_from_dict(FeatureCodecConfig, ck["config"]), head)
    model.load_state_dict(ck["state_dict"])
    model.symbol_model = SymbolModel.from_state_dict(ck["extras"]["symbol_model"])
    return model.eval()


def build_generator(ck):
    head = TransformHead(_extractor_cfg(ck))
    model = TextureGenerator(sub_config_from_dict(GeneratorConfig, ck["config"]), head)
    model.load_state_dict(ck["state_dict"])
    return model.eval()


def build_enhancement(ck):
    model = ResidualCodec(sub_config_from_dict(EnhancementConfig, ck["config"]))
    model.load_state_dict(ck["state_dict"])
    model.load_tables_state(ck["extras"]["tables"])
    return model.eval()


# ---------------------------------------------------------------------------
# workspace


class Workspace:
    def __init__(self, root=None, config=None):
        self.root = Path(root) if root is not None else default_workspace()
        self._config = config

    def path(self, *parts):
        return self.root.joinpath(*parts)

    @property
    def config(self):
        if self._config is None:
            p = self.path("config.json")
            if not p.exists():
                raise ConfigError(f"no config in workspace {self.root}; run ingest with --config first")
            self._config = load_config(p)
        return self._config

    def save_config(self, cfg):
        self.root.mkdir(parents=True, exist_ok=True)
        save_config(cfg, self.path("config.json"))
        self._config = cfg

    def manifest(self):
        p = self.path("manifest.json")
        if not p.exists():
            raise DataError(f"no manifest in {self.root}; run ingest first")
        return DatasetManifest.load(p)

    def pairs(self):
        return read_pairs(self.path("pairs.txt"))

    def registry(self):
        p = self.path("registry.json")
        return json.loads(p.read_text()) if p.exists() else {}

    def _write_registry(self, reg):
        self.path("registry.json").write_text(json.dumps(reg, indent=1))

    def register(self, stage, entry):
        reg = self.registry()
        reg[stage] = entry
        # anything downstream was trained against the old version
        for later in STAGES[STAGES.index(stage) + 1 :]:
            reg.pop(later, None)
        self._write_registry(reg)

    def require(self, stage):
        """Registry entry of ``stage``; its predecessors must be registered too."""
        reg = self.registry()
        for s in STAGES[: STAGES.index(stage) + 1]:
            if s not in reg:
                raise DependencyError(s, f"stage {s!r} has no checkpoint in {self.root}; train it first")
        return reg[stage]

    def checkpoint(self, stage, index=None):
        entry = self.require(stage)
        item = entry["models"][entry["chosen"] if index is None else index]
        return load_checkpoint(self.path(item["path"]), stage, item["sha256"])

    def write_log(self, stage, payload):
        self.path("logs").mkdir(parents=True, exist_ok=True)
        self.path("logs", f"{stage}.json").write_text(json.dumps(payload, indent=1, default=float))

    def read_log(self, stage):
        return json.loads(self.path("logs", f"{stage}.json").read_text())


def write_record(ws, command, extra=None):
    """Reproducibility record: argv, config, seed and every checkpoint hash."""
    ws.path("records").mkdir(parents=True, exist_ok=True)
    reg = ws.registry()
    cfg = ws._config
    record = {
        "command": command,
        "argv": sys.argv,
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seed": cfg.seed if cfg else None,
        "config": config_to_dict(cfg) if cfg else None,
        "checkpoints": {s: [m["sha256"] for m in e["models"]] for s, e in reg.items()},
        "manifest_hash": ws.manifest().content_hash if ws.path("manifest.json").exists() else None,
        "versions": {"python": platform.python_version(), "torch": torch.__version__, "numpy": np.__version__},
        **(extra or {}),
    }
    name = f"{time.strftime('%Y%m%d-%H%M%S')}-{command}-{time.time_ns() % 10**6:06d}.json"
    path = ws.path("records", name)
    path.write_text(json.dumps(record, indent=1, default=str))
    return path


# ---------------------------------------------------------------------------
# ingest and data access


def ingest_workspace(ws, dataset_root, cfg):
    """Build the manifest and the test-split pairs file for a dataset."""
    ws.save_config(cfg)
    manifest = ingest(dataset_root, cfg.split_ratios, cfg.seed)
    manifest.save(ws.path("manifest.json"))
    folds = make_pairs(manifest, "test", pairs_per_fold=max(2, cfg.num_pairs // 10), folds=10, seed=cfg.seed)
    write_pairs(ws.path("pairs.txt"), folds)
    return manifest


_SPLIT_CACHE = {}


def _split(ws, name):
    manifest = ws.manifest()
    key = (manifest.content_hash, name, ws.config.image_size)
    if key not in _SPLIT_CACHE:
        _SPLIT_CACHE[key] = load_split(manifest, name, ws.config.image_size)
    return _SPLIT_CACHE[key]


def _extractor_input(images, cfg):
    s = cfg.input_size
    return images if images.shape[-1] == s else resize(images, (s, s)).clamp(0.0, 1.0)


@torch.no_grad()
def features_of(images, extractor):
    return extract(_extractor_input(images, extractor.cfg), extractor)


# ---------------------------------------------------------------------------
# stages


def _entry(ws, paths_hashes, chosen, parents, **info):
    models = [{"path": str(p.relative_to(ws.root)), "sha256": h} for p, h in paths_hashes]
    return {"models": models, "chosen": chosen, "parents": parents, **info}


def _parents(ws, stage):
    reg = ws.registry()
    return {s: [m["sha256"] for m in reg[s]["models"]] for s in STAGES[: STAGES.index(stage)] if s in reg}


def _stage_extractor(ws, cfg, sweep):
    train = _split(ws, "train")
    ecfg = dataclasses.replace(cfg.extractor, num_classes=len(train.identities), seed=cfg.seed)
    model, history = train_extractor(_extractor_input(train.images, ecfg), train.labels, ecfg)
    ph = save_checkpoint(ws.path("checkpoints"), "extractor", ecfg, model.state_dict())
    acc = verification(ws, features_of(_split(ws, "test").images, model))
    ws.register("extractor", _entry(ws, [ph], 0, {}, uncompressed_accuracy=acc.accuracy, uncompressed_auc=acc.auc))
    return {"history": history, "uncompressed_accuracy": acc.accuracy, "uncompressed_auc": acc.auc}


def _stage_feature_codec(ws, cfg, sweep):
    ext_ck = ws.checkpoint("extractor")
    extractor = build_extractor(ext_ck)
    train, val, test = (_split(ws, s) for s in ("train", "val", "test"))
    f_tr, f_va, f_te = (features_of(s.images, extractor) for s in (train, val, test))
    size = extractor.cfg.transform_size
    thumbs = make_thumbnail(train.images, size)
    pairs = cfg.lambda_pairs() if sweep else [(cfg.feature_codec.lambda_1, cfg.feature_codec.lambda_2)]
    if len(pairs) > 255:
        raise ConfigError("at most 255 feature-codec operating points fit the payload id byte")
    saved, points, logs = [], [], []
    for i, (l1, l2) in enumerate(pairs):
        fcfg = dataclasses.replace(cfg.feature_codec, lambda_1=l1, lambda_2=l2, seed=cfg.seed)
        model, history = train_feature_codec(
            f_tr, thumbs, fcfg, extractor.transform, model_id=i, val=(f_va, make_thumbnail(val.images, size))
        )
        extras = {"symbol_model": model.symbol_model.state_dict(), "extractor_config": ext_ck["config"]}
        saved.append(save_checkpoint(ws.path("checkpoints"), "feature_codec", fcfg, model.state_dict(), extras))
        ev = evaluate_codec(model, f_te)
        bpp = 8 * ev["bytes"] / (test.images.shape[-1] * test.images.shape[-2])
        acc = verification(ws, reconstruct(model, f_te))
        points.append(RatePoint(bpp, "accuracy", acc.accuracy, "base", i))
        logs.append({"lambda_1": l1, "lambda_2": l2, "history": history, "test": ev, "bpp": bpp, "accuracy": acc.accuracy, "auc": acc.auc})
    chosen = saturation_point(points, cfg.saturation_epsilon).operating_point_id if len(points) > 1 else 0
    ws.register(
        "feature_codec",
        _entry(ws, saved, chosen, _parents(ws, "feature_codec"), operating_points=[dataclasses.asdict(p) for p in points]),
    )
    return {"operating_points": logs, "chosen": chosen}


def _base_textures(ws, images, extractor, codec, generator):
    return generate(generator, reconstruct(codec, features_of(images, extractor)))


def _stage_generator(ws, cfg, sweep):
    extractor = build_extractor(ws.checkpoint("extractor"))
    fc_ck = ws.checkpoint("feature_codec")
    codec = build_feature_codec(fc_ck)
    train, val = _split(ws, "train"), _split(ws, "val")
    f_tr = reconstruct(codec, features_of(train.images, extractor))
    f_va = reconstruct(codec, features_of(val.images, extractor))
    gcfg = dataclasses.replace(cfg.generator, seed=cfg.seed)
    model, history = train_generator(train.images, f_tr, gcfg, codec.transform, val=(val.images, f_va))
    extras = {"extractor_config": fc_ck["extras"]["extractor_config"]}
    ph = save_checkpoint(ws.path("checkpoints"), "generator", gcfg, model.state_dict(), extras)
    ws.register("generator", _entry(ws, [ph], 0, _parents(ws, "generator")))
    return {"history": history}


def _stage_enhancement(ws, cfg, sweep):
    extractor = build_extractor(ws.checkpoint("extractor"))
    codec = build_feature_codec(ws.checkpoint("feature_codec"))
    generator = build_generator(ws.checkpoint("generator"))
    train, val = _split(ws, "train"), _split(ws, "val")
    b_tr = _base_textures(ws, train.images, extractor, codec, generator)
    b_va = _base_textures(ws, val.images, extractor, codec, generator)
    weights = cfg.rate_weight_sweep if sweep else [cfg.enhancement.rate_weight]
    saved, logs = [], []
    for i, rw in enumerate(weights):
        ecfg = dataclasses.replace(cfg.enhancement, rate_weight=rw, seed=cfg.seed)
        model, history = train_enhancement_model(train.images, b_tr, ecfg, val=(val.images, b_va))
        extras = {"tables": model.tables_state(), "model_id": i}
        saved.append(save_checkpoint(ws.path("checkpoints"), "enhancement", ecfg, model.state_dict(), extras))
        logs.append({"rate_weight": rw, "history": history[:-1], "validation": history[-1]["validation"]})
    if len(weights) > 1:
        inv = count_inversions(weights, [l["validation"]["bpp"] for l in logs], increasing=False)
        if inv:
            log.warning("validation bpp is not monotone in rate_weight (%d inversions)", inv)
    ws.register("enhancement", _entry(ws, saved, 0, _parents(ws, "enhancement"), rate_weights=list(weights)))
    return {"operating_points": logs}


_STAGE_FNS = {
    "extractor": _stage_extractor,
    "feature_codec": _stage_feature_codec,
    "generator": _stage_generator,
    "enhancement": _stage_enhancement,
}


def run_stage(stage, ws, sweep=False):
    """Train one stage against its registered predecessors; returns the metrics log."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    cfg = ws.config
    i = STAGES.index(stage)
    if i:
        ws.require(STAGES[i - 1])
    torch.manual_seed(cfg.seed)
    t0 = time.time()
    metrics = _STAGE_FNS[stage](ws, cfg, sweep)
    metrics["seconds"] = time.time() - t0
    ws.write_log(stage, metrics)
    log.info("stage %s finished in %.1fs", stage, metrics["seconds"])
    return metrics


def run_all(ws, sweep=True):
    return {s: run_stage(s, ws, sweep=sweep) for s in STAGES}


# ---------------------------------------------------------------------------
# verification on the pairs file


def verification(ws, test_features):
    """10-fold accuracy of features aligned with the test split's image order."""
    test = _split(ws, "test")
    index = {p: i for i, p in enumerate(test.paths)}
    pa, pb, same = resolve_pairs(ws.pairs(), pair_lookup(ws.manifest(), "test"))
    try:
        ia, ib = [index[p] for p in pa], [index[p] for p in pb]
    except KeyError as exc:
        raise DataError(f"pair image {exc.args[0]} is not in the test split") from None
    f = test_features.numpy()
    return verification_accuracy(f[ia], f[ib], same, folds=len(ws.pairs()))


# ---------------------------------------------------------------------------
# encode / decode


@dataclass
class Models:
    extractor: FaceExtractor
    codecs: list
    chosen_codec: int
    generator: TextureGenerator | None = None
    enhancement: list = field(default_factory=list)

    @property
    def codec(self):
        return self.codecs[self.chosen_codec]

    def codec_for(self, payload):
        model_id, _, _ = read_base_header(payload)
        for c in self.codecs:
            if c.symbol_model.model_id == model_id:
                return c
        raise DecodeError(f"no feature codec with model id {model_id}")

    def enhancement_for(self, model_id):
        if not 0 <= model_id < len(self.enhancement):
            raise DependencyError("enhancement", f"no enhancement model with id {model_id}")
        return self.enhancement[model_id]


def load_models(ws, need=("extractor", "feature_codec", "generator", "enhancement")):
    reg = ws.registry()
    extractor = build_extractor(ws.checkpoint("extractor"))
    entry = ws.require("feature_codec")
    codecs = [build_feature_codec(ws.checkpoint("feature_codec", i)) for i in range(len(entry["models"]))]
    models = Models(extractor, codecs, entry["chosen"])
    if "generator" in need:
        models.generator = build_generator(ws.checkpoint("generator"))
    if "enhancement" in need:
        n = len(ws.require("enhancement")["models"])
        models.enhancement = [build_enhancement(ws.checkpoint("enhancement", i)) for i in range(n)]
    elif "enhancement" in reg and "generator" in need:
        n = len(reg["enhancement"]["models"])
        models.enhancement = [build_enhancement(ws.checkpoint("enhancement", i)) for i in range(n)]
    return models


def read_image(path, size):
    return load_image(path, size)


def encode_image(x, models, base_only=False, operating_point=0):
    """``(3, H, W)`` image -> ``.sfc`` bytes."""
    from .feature_codec import encode_feature

    f = features_of(x[None], models.extractor)[0]
    base = encode_feature(models.codec, f)
    enh = None
    if not base_only:
        if models.generator is None or not models.enhancement:
            raise DependencyError("enhancement", "full-mode encoding needs the generator and an enhancement model")
        x_base = generate(models.generator, decode_feature(models.codec, base)[None])[0]
        enh = encode_enhancement(x, x_base, models.enhancement_for(operating_point), operating_point).to_bytes()
    return bitstream.mux(base, enh, x.shape[-2:])


def decode_features(stream, models):
    """Base-layer feature from a stream; never reads the enhancement block."""
    base, _ = bitstream.read_base_layer(stream)
    return decode_feature(models.codec_for(base), base)


def decode_image(stream, models):
    """Full reconstruction; falls back to ``x_base`` (with a warning) for base-only streams."""
    d = bitstream.demux(stream)
    if models.generator is None:
        raise DependencyError("generator", "image decoding needs the generator checkpoint")
    f = decode_feature(models.codec_for(d.base), d.base)
    x_base = generate(models.generator, f[None])[0]
    if x_base.shape[-2:] != tuple(d.dims):
        raise DecodeError(f"stream dims {d.dims} do not match the generator output {tuple(x_base.shape[-2:])}")
    if d.enhancement is None:
        warnings.warn("stream has no enhancement layer; returning the base texture", stacklevel=2)
        return x_base
    payload = EnhancementPayload.from_bytes(d.enhancement)
    return decode_enhancement(payload, x_base, models.enhancement_for(payload.model_id))


# ---------------------------------------------------------------------------
# evaluation and rate curves


def evaluate(ws, limit=None):
    """Base rate-accuracy and total rate-distortion curves on the test split."""
    cfg = ws.config
    models = load_models(ws)
    test = _split(ws, "test")
    images = test.images if limit is None else test.images[:limit]
    f_te = features_of(test.images, models.extractor)
    hw = images.shape[-1] * images.shape[-2]
    out_dir = ws.path("curves")
    uncompressed = verification(ws, f_te).accuracy

    def base_point(i):
        codec = models.codecs[i]
        ev = evaluate_codec(codec, f_te)
        acc = verification(ws, reconstruct(codec, f_te))
        return [RatePoint(8 * ev["bytes"] / hw, "accuracy", acc.accuracy, "base", i), RatePoint(8 * ev["bytes"] / hw, "AUC", acc.auc, "base", i)]

    base_points, sat = rate_curve(
        range(len(models.codecs)), base_point, out_dir, "base_rate_accuracy", cfg.saturation_epsilon
    ) if len(models.codecs) > 1 else (base_point(0), None)

    per_image = {}

    def enh_point(i):
        bpps, ps, ss, bps = [], [], [], []
        for j, x in enumerate(images):
            s = encode_image(x, models, operating_point=i)
            rec = decode_image(s, models)
            bpps.append(bitstream.bpp(s, layer="total"))
            ps.append(psnr(rec, x))
            ss.append(ms_ssim(rec, x))
        per_image[i] = ps
        b = float(np.mean(bpps))
        return [RatePoint(b, "PSNR", float(np.mean(ps)), "total", i), RatePoint(b, "MS-SSIM", float(np.mean(ss)), "total", i)]

    x_base = generate(models.generator, reconstruct(models.codec, features_of(images, models.extractor)))
    base_psnr = mean_metric(psnr, x_base, images)
    base_ssim = mean_metric(ms_ssim, x_base, images)
    n_enh = len(models.enhancement)
    if n_enh > 1:
        enh_points, _ = rate_curve(range(n_enh), enh_point, out_dir, "total_rate_distortion")
    else:
        enh_points = enh_point(0)
    base_each = [psnr(b, x) for b, x in zip(x_base, images)]
    per_image_gain = {i: float(np.min(np.subtract(ps, base_each))) for i, ps in per_image.items()}
    result = {
        "uncompressed_accuracy": uncompressed,
        "saturation_point": dataclasses.asdict(sat) if sat else None,
        "base_points": [dataclasses.asdict(p) for p in base_points],
        "total_points": [dataclasses.asdict(p) for p in enh_points],
        "base_only_psnr": base_psnr,
        "base_only_ms_ssim": base_ssim,
        "worst_per_image_psnr_gain": per_image_gain,
        "rate_weights": ws.registry()["enhancement"].get("rate_weights"),
    }
    for name in ("PSNR", "MS-SSIM"):
        pts = [p for p in enh_points if p.metric_name == name]
        inv = count_inversions([p.bpp for p in pts], [p.metric_value for p in pts])
        result[f"{name}_inversions"] = inv
        if inv:
            log.warning("%s is not monotone in total bpp (%d inversions)", name, inv)
    ws.write_log("eval", result)
    return result
