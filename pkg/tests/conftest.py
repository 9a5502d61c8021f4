import dataclasses
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from sfcodec.config import toy_config
from sfcodec.pipeline import Workspace, evaluate, ingest_workspace, load_models, run_all
from sfcodec.synthetic import make_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config():
    """One-epoch everything on an 8-identity corpus: plumbing only, no quality."""
    cfg = toy_config(split_ratios=(2.0, 1.0, 1.0), num_pairs=40)
    cfg.extractor.epochs = 1
    cfg.feature_codec.epochs = 2
    cfg.generator.epochs = 1
    cfg.enhancement.epochs = 1
    cfg.lambda1_sweep = [1e-1, 1e-3]
    cfg.rate_weight_sweep = [1e-1, 1e-3]
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "corpus"
    make_corpus(root, identities=8, images_per_identity=6, size=64, seed=3)
    return root


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_corpus):
    ws = Workspace(tmp_path_factory.mktemp("tiny_ws"))
    ingest_workspace(ws, tiny_corpus, tiny_config())
    run_all(ws, sweep=True)
    return SimpleNamespace(ws=ws, models=load_models(ws), corpus=tiny_corpus)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The full staged toy pipeline: 16 synthetic identities, 10 of them for training."""
    root = tmp_path_factory.mktemp("toy")
    make_corpus(root / "corpus", identities=16, images_per_identity=50, size=64, seed=0)
    ws = Workspace(root / "ws")
    t0 = time.time()
    ingest_workspace(ws, root / "corpus", toy_config())
    metrics = run_all(ws, sweep=True)
    result = evaluate(ws)
    seconds = time.time() - t0
    return SimpleNamespace(ws=ws, metrics=metrics, eval=result, seconds=seconds, models=load_models(ws))


def pytest_collection_modifyitems(items):
    for item in items:
        if "toy_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
