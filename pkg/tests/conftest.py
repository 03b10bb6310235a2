import numpy as np
import pytest
import torch

from keygrid.geometry import Frame, PointCloud


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_cloud(rng):
    pts = rng.random((128, 3)) - 0.5
    return PointCloud(torch.as_tensor(pts), id="random-128", frame=Frame.UNIT_CUBE)


def tiny_model_config(**overrides):
    from keygrid.model import ModelConfig

    kw = dict(
        num_points=128,
        num_keypoints=5,
        level_sizes=(128, 48, 24, 12),
        level_widths=(16, 24, 32, 48),
        group_size=8,
        grid_m=8,
    )
    kw.update(overrides)
    return ModelConfig(**kw)
