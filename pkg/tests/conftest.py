"""Shared fixtures: the toy model configuration and small hand-built scenes."""

from __future__ import annotations

import numpy as np
import pytest

from pymlcvnet.Config import ModelConfig
from pymlcvnet.Data import Scene
from pymlcvnet.Geometry import OrientedBox3D, PointCloud


def box(center, size=(1.0, 1.0, 1.0), yaw: float = 0.0) -> OrientedBox3D:
    return OrientedBox3D(np.asarray(center, dtype=np.float64), np.asarray(size, dtype=np.float64), yaw)


def points_inside(rng: np.random.Generator, target: OrientedBox3D, n: int) -> np.ndarray:
    """Uniform points strictly inside a box."""
    local = rng.uniform(-0.45, 0.45, size=(n, 3)) * target.size
    c, s = np.cos(target.yaw), np.sin(target.yaw)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rotation.T + target.center


def toy_scene(seed: int, scene_id: str = 'toy_000', num_points: int = 64) -> Scene:
    """Two objects on a floor patch; every object holds at least 16 points."""
    rng = np.random.default_rng(seed)
    boxes = [box([-0.6, 0.0, 0.4], [0.6, 0.6, 0.8], 0.3), box([0.7, 0.2, 0.45], [0.5, 0.5, 0.9], -1.0)]
    per_object = (num_points - 16) // 2
    floor = np.column_stack([rng.uniform(-1.5, 1.5, 16), rng.uniform(-1.5, 1.5, 16), np.zeros(16)])
    objects = [points_inside(rng, b, per_object) for b in boxes]
    xyz = np.concatenate([floor, *objects])
    if xyz.shape[0] < num_points:
        xyz = np.concatenate([xyz, points_inside(rng, boxes[0], num_points - xyz.shape[0])])
    return Scene(scene_id, PointCloud(xyz), [(boxes[0], 0), (boxes[1], 1)], ['table', 'chair', 'cabinet'], seed)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config() -> ModelConfig:
    return ModelConfig.toy()


@pytest.fixture
def toy_scenes() -> list:
    return [toy_scene(seed, f'toy_{seed:03d}') for seed in range(3)]
