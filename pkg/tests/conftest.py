import numpy as np
import pytest
import torch

from hftbev.geometry import BevGridSpec, CameraIntrinsics


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return BevGridSpec(8, 8, 1.0, 1.0, 9.0, ((1.0, 3.0), (3.0, 5.0), (5.0, 9.0)))


@pytest.fixture
def small_intr():
    return CameraIntrinsics(32.0, 32.0, 16.0, 16.0, 1.5, 32, 32)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


TINY_GEN = {
    "splits": "train:6,val:3",
    "intrinsics": {"fx": 32, "fy": 32, "cx": 16, "cy": 16, "image_w": 32, "image_h": 32},
    "grid": {"depth_cells": 16, "lateral_cells": 16, "cell_size": 1.0, "z_min": 1.0, "z_max": 17.0,
             "extents": [[1, 5], [5, 9], [9, 17]]},
}

TINY_MODEL = {"backbone_channels": [8, 8, 8], "pyramid_channels": 8, "bev_channels": 8, "decoder_channels": 8}


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from hftbev.harness.config import load_gen_config
    from hftbev.harness.gendata import generate_dataset

    d = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset(load_gen_config(TINY_GEN), d, seed=0)
    return d


@pytest.fixture
def tiny_run(tiny_data, tmp_path):
    """Small but complete run config as a plain dict."""
    return {
        "data": str(tiny_data), "out": str(tmp_path / "run"), "epochs": 3, "batch_size": 3,
        "optimizer": {"decay_epochs": [1, 2]}, "model": dict(TINY_MODEL),
    }
