import json
import time
import warnings

import pytest
import torch

from conftest import tiny_config
from sfcodec import bitstream
from sfcodec.cli import main
from sfcodec.data import load_image
from sfcodec.errors import DependencyError
from sfcodec.pipeline import (
    STAGES,
    Workspace,
    decode_features,
    decode_image,
    encode_image,
    ingest_workspace,
    load_checkpoint,
    run_stage,
    write_record,
)


@pytest.fixture(scope="module")
def image(tiny_run):
    path = sorted(p for p in tiny_run.corpus.rglob("*.png"))[0]
    return path, load_image(path, tiny_run.ws.config.image_size)


def test_stage_order_is_enforced(tmp_path, tiny_corpus):
    ws = Workspace(tmp_path / "ws")
    ingest_workspace(ws, tiny_corpus, tiny_config())
    with pytest.raises(DependencyError) as exc:
        run_stage("generator", ws)
    assert exc.value.stage == "extractor" and "extractor" in str(exc.value)
    run_stage("extractor", ws)
    with pytest.raises(DependencyError) as exc:
        run_stage("generator", ws)
    assert "feature_codec" in str(exc.value)
    with pytest.raises(DependencyError):
        run_stage("enhancement", ws)


def test_retraining_invalidates_downstream(tmp_path, tiny_run):
    import shutil

    ws = Workspace(tmp_path / "copy")
    shutil.copytree(tiny_run.ws.root, ws.root)
    assert set(ws.registry()) == set(STAGES)
    run_stage("generator", ws)
    assert "enhancement" not in ws.registry()


def test_checkpoint_hash_is_checked(tmp_path, tiny_run):
    entry = tiny_run.ws.require("generator")
    item = entry["models"][entry["chosen"]]
    bad = tmp_path / "g.pt"
    data = bytearray(tiny_run.ws.path(item["path"]).read_bytes())
    data[-10] ^= 0xFF
    bad.write_bytes(bytes(data))
    with pytest.raises(DependencyError):
        load_checkpoint(bad, "generator", item["sha256"])


def test_encode_is_deterministic_and_layered(tiny_run, image):
    _, x = image
    m = tiny_run.models
    full = encode_image(x, m)
    assert full == encode_image(x, m)
    base_only = encode_image(x, m, base_only=True)
    assert len(base_only) < len(full)
    assert bitstream.strip_enhancement(full) == base_only
    other = encode_image(x, m, operating_point=1)
    assert bitstream.demux(other).base == bitstream.demux(full).base


def test_feature_decode_ignores_enhancement_bytes(tiny_run, image):
    _, x = image
    m = tiny_run.models
    full = encode_image(x, m)
    f = decode_features(full, m)
    assert torch.equal(f, decode_features(bitstream.strip_enhancement(full), m))
    # a stream damaged or cut inside the enhancement block still yields the feature
    base, enh, header = bitstream.layer_bytes(full)
    cut = full[: len(full) - enh // 2]
    assert torch.equal(f, decode_features(cut, m))
    damaged = bytearray(full)
    damaged[-8] ^= 0xFF
    assert torch.equal(f, decode_features(bytes(damaged), m))


def test_feature_decode_time_is_independent_of_enhancement_size(tiny_run, image):
    _, x = image
    m = tiny_run.models
    base = bitstream.demux(encode_image(x, m, base_only=True)).base
    small = bitstream.mux(base, None, (64, 64))
    big = bitstream.mux(base, bytes(10**5), (64, 64))

    def clock(stream):
        best = float("inf")
        for _ in range(7):
            t = time.perf_counter()
            for _ in range(20):
                decode_features(stream, m)
            best = min(best, time.perf_counter() - t)
        return best

    clock(small)
    assert clock(big) / clock(small) < 1.2


def test_image_decode(tiny_run, image):
    _, x = image
    m = tiny_run.models
    rec = decode_image(encode_image(x, m), m)
    assert rec.shape == x.shape and rec.min() >= 0 and rec.max() <= 1
    with pytest.warns(UserWarning, match="no enhancement"):
        base = decode_image(encode_image(x, m, base_only=True), m)
    assert base.shape == x.shape


def test_reproducibility_record(tiny_run):
    path = write_record(tiny_run.ws, "test", {"note": 1})
    rec = json.loads(path.read_text())
    assert rec["seed"] == tiny_run.ws.config.seed
    assert set(rec["checkpoints"]) == set(STAGES)
    assert rec["manifest_hash"] == tiny_run.ws.manifest().content_hash
    assert rec["note"] == 1


def test_cli_roundtrip_and_exit_codes(tmp_path, tiny_run, image, capsys):
    path, _ = image
    w = ["-w", str(tiny_run.ws.root)]
    out = tmp_path / "a.sfc"
    assert main(w + ["encode", str(path), "-o", str(out)]) == 0
    assert main(w + ["dump", str(out)]) == 0
    assert "crc32c" in capsys.readouterr().out
    assert main(w + ["decode", str(out), "--feature"]) == 0
    feature = json.loads(capsys.readouterr().out)
    assert len(feature) == tiny_run.ws.config.feature_codec.feature_dim
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert main(w + ["decode", str(out), "-o", str(tmp_path / "a.png")]) == 0
    assert (tmp_path / "a.png").exists()

    # 2: config, 3: dependency, 4: data, 5: decode
    assert main(["-w", str(tmp_path / "empty"), "train", "extractor"]) == 2
    fresh = Workspace(tmp_path / "fresh")
    ingest_workspace(fresh, tiny_run.corpus, tiny_config())
    assert main(["-w", str(fresh.root), "train", "generator"]) == 3
    assert main(w + ["encode", str(tmp_path / "missing.png")]) == 4
    bad = tmp_path / "bad.sfc"
    bad.write_bytes(b"JUNK" + out.read_bytes()[4:])
    assert main(w + ["decode", str(bad)]) == 5
