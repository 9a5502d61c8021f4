import json

import numpy as np
import pytest

from sfcodec.config import (
    PAPER_LAMBDA1_RANGE,
    PAPER_LAMBDA2_RANGE,
    PAPER_RATE_WEIGHT_RANGE,
    config_from_dict,
    config_schema,
    config_to_dict,
    load_config,
    paper_config,
    save_config,
    toy_config,
)
from sfcodec.errors import ConfigError
from sfcodec.generator import learning_rate


def test_default_constants_snapshot():
    cfg = paper_config()
    assert cfg.extractor.lambda_s == 50
    assert cfg.feature_codec.r_clip == 20.0
    assert cfg.feature_codec.noise_half_width == 0.5
    for lr in (cfg.extractor.learning_rate, cfg.feature_codec.learning_rate, cfg.enhancement.learning_rate, cfg.generator.lr_initial):
        assert lr == 1e-4
    g = cfg.generator
    assert (g.lr_decay, g.lr_decay_every, g.lr_floor) == (0.9, 5, 1e-5)
    assert [learning_rate(e, g) for e in (0, 4, 5, 10)] == pytest.approx([1e-4, 1e-4, 9e-5, 8.1e-5])
    assert learning_rate(500, g) == 1e-5
    assert (min(cfg.lambda1_sweep), max(cfg.lambda1_sweep)) == PAPER_LAMBDA1_RANGE == (1e-8, 1e-4)
    assert (min(cfg.lambda2_sweep), max(cfg.lambda2_sweep)) == pytest.approx(PAPER_LAMBDA2_RANGE)
    assert PAPER_LAMBDA2_RANGE == (1e-7, 7e-2)
    assert (min(cfg.rate_weight_sweep), max(cfg.rate_weight_sweep)) == PAPER_RATE_WEIGHT_RANGE == (1e-4, 1e-1)
    assert cfg.image_size == 256 and cfg.extractor.input_size == 160 and cfg.extractor.transform_size == 32
    assert cfg.generator.level_sizes() == [64, 128, 256]


def test_toy_geometry():
    cfg = toy_config()
    assert cfg.image_size == 64 and cfg.extractor.transform_size == 16 and cfg.extractor.embed_dim == 16
    assert cfg.generator.output_size == 64
    assert len(cfg.lambda1_sweep) >= 4 and len(cfg.rate_weight_sweep) >= 4


def test_roundtrip_json_and_yaml(tmp_path):
    cfg = toy_config()
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    import yaml

    (tmp_path / "c.yaml").write_text(yaml.safe_dump(config_to_dict(cfg)))
    assert load_config(tmp_path / "c.yaml") == cfg


def test_unknown_keys_fail_fast():
    d = config_to_dict(toy_config())
    d["bogus"] = 1
    with pytest.raises(ConfigError):
        config_from_dict(d)
    d = config_to_dict(toy_config())
    d["generator"]["bogus"] = 1
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_inconsistent_sizes_rejected():
    d = config_to_dict(toy_config())
    d["image_size"] = 128
    with pytest.raises(ConfigError):
        config_from_dict(d)
    d = config_to_dict(toy_config())
    d["enhancement"]["rate_weight"] = 0
    with pytest.raises(ConfigError):
        config_from_dict(d)
    d = config_to_dict(toy_config())
    d["generator"]["stage_specs"][0][-1] = [3, 4, 1]
    with pytest.raises(ConfigError):
        config_from_dict(d)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_schema_is_published():
    schema = config_schema()
    assert "properties" in schema and "rate_weight_sweep" in schema["properties"]
    json.dumps(schema)


def test_lambda_pairs():
    cfg = toy_config()
    assert [p[0] for p in cfg.lambda_pairs()] == cfg.lambda1_sweep
    assert len(paper_config().lambda_pairs()) == 5
