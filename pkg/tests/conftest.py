"""Shared fixtures: a tiny VGG, a tiny synthetic dataset and a pipeline config around them."""
import json
from pathlib import Path

import numpy as np
import pytest

from prunedistill.architectures import vgg
from prunedistill.checkpoint import MaskedCheckpoint
from prunedistill.config import PipelineConfig
from prunedistill.data import DataConfig, load_dataset

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"

TINY_DATA = {
    "kind": "synthetic",
    "classes": 3,
    "channels": 3,
    "height": 8,
    "width": 8,
    "per_class": 20,
    "test_per_class": 5,
    "noise_std": 0.2,
}


def tiny_config_dict(out) -> dict:
    return {
        "provenance": "test fixture",
        "seed": 0,
        "out": str(out),
        "arch": {"builder": "vgg", "channels": [4, "M", 8, "M"], "name": "tiny"},
        "data": dict(TINY_DATA),
        "train": {"epochs": 2, "batch_size": 16, "lr": 0.05, "lr_drops": [1]},
        "prune": {"iterations": 2, "post_epochs": 1, "post_batch_size": 16, "post_lr": 0.01, "post_lr_drops": []},
        "distill": {"alpha": 0.9, "tau": 4.0, "epochs": 2, "batch_size": 16, "lr": 0.05, "lr_drops": [1]},
        "report": {"seeds": [0], "targets": [0.36]},
    }


@pytest.fixture
def tiny_arch():
    # 8x8 input, two pools: 8 x 2 x 2 features into the classifier
    return vgg([4, "M", 8, "M"], (3, 8, 8), 3, name="tiny")


@pytest.fixture
def tiny_data():
    return load_dataset(DataConfig(**TINY_DATA), split_seed=0)


@pytest.fixture
def tiny_ckpt(tiny_arch):
    return MaskedCheckpoint.fresh(tiny_arch, seed=0)


@pytest.fixture
def tiny_config(tmp_path):
    return PipelineConfig.from_dict(tiny_config_dict(tmp_path / "runs"))


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict(tmp_path / "runs")), encoding="utf-8")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(0)
