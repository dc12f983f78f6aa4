from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from . import Tensor as T
from .Config import ModelConfig, SAConfig
from .Exceptions import ArgumentError
from .Geometry import PointCloud, ball_query, farthest_point_sample, three_nn_weights
from .Layers import Module, SharedMLP
from .Tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class SeedSet:
    """M seed points (point patches) with D-dimensional features."""
    xyz: np.ndarray
    features: Tensor
    indices: np.ndarray

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def with_features(self, features: Tensor) -> SeedSet:
        return SeedSet(self.xyz, features, self.indices)


class SetAbstraction(Module):
    """
    Sample centers by FPS, group neighbors by ball query, run a shared MLP on the
    center-relative coordinates (concatenated with the grouped features), then
    max-pool each group.
    """

    def __init__(self, cfg: SAConfig, in_channels: int, rng: np.random.Generator):
        self.cfg = cfg
        self.in_channels = in_channels
        self.mlp = SharedMLP(in_channels + 3, cfg.mlp, rng)

    @property
    def out_channels(self) -> int:
        return self.mlp.out_channels

    def group(self, xyz: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        centers = farthest_point_sample(xyz, self.cfg.num_centers, start=0)
        groups = ball_query(xyz, xyz[centers], self.cfg.radius, self.cfg.max_samples)
        return centers, groups

    def __call__(self, xyz: np.ndarray, features: Optional[Tensor], training: bool = False,
                 grouping: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[np.ndarray, Tensor]:
        """
        :param xyz: (N, 3) point coordinates.
        :param features: (N, C) tensor or None for geometry-only input.
        :param grouping: Precomputed (center indices, group indices) to reuse.
        :return: Center indices into `xyz` and the (num_centers, out_channels) pooled features.
        """
        if features is not None and features.shape != (xyz.shape[0], self.in_channels):
            raise ArgumentError(f'SetAbstraction expects features of shape ({xyz.shape[0]}, {self.in_channels}), '
                                f'got {features.shape}.')
        centers, groups = grouping if grouping is not None else self.group(xyz)
        num_centers, samples = groups.shape
        relative = (xyz[groups] - xyz[centers][:, None, :]).reshape(-1, 3)
        grouped = Tensor(relative)
        if features is not None:
            grouped = T.concat([grouped, T.take_rows(features, groups.reshape(-1))], axis=1)
        hidden = self.mlp(grouped, training)
        hidden = T.reshape(hidden, (num_centers, samples, self.out_channels))
        pooled, _ = T.max_reduce(hidden, axis=1)
        return centers, pooled


class FeaturePropagation(Module):
    """Interpolate coarse features onto finer points, concatenate the skip features, apply a shared MLP."""

    def __init__(self, in_channels: int, widths, rng: np.random.Generator):
        self.mlp = SharedMLP(in_channels, widths, rng)

    @property
    def out_channels(self) -> int:
        return self.mlp.out_channels

    @staticmethod
    def interpolation_matrix(src_xyz: np.ndarray, dst_xyz: np.ndarray) -> np.ndarray:
        indices, weights = three_nn_weights(src_xyz, dst_xyz)
        matrix = np.zeros((dst_xyz.shape[0], src_xyz.shape[0]))
        rows = np.repeat(np.arange(dst_xyz.shape[0]), indices.shape[1])
        np.add.at(matrix, (rows, indices.reshape(-1)), weights.reshape(-1))
        return matrix

    def __call__(self, dst_xyz: np.ndarray, src_xyz: np.ndarray, dst_features: Optional[Tensor],
                 src_features: Tensor, training: bool = False) -> Tensor:
        interpolated = T.matmul(Tensor(self.interpolation_matrix(src_xyz, dst_xyz)), src_features)
        if dst_features is not None:
            interpolated = T.concat([interpolated, dst_features], axis=1)
        return self.mlp(interpolated, training)


class Backbone(Module):
    """PointNet++ style extractor: set-abstraction layers down, feature-propagation layers back up to the seeds."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.sa_layers: list[SetAbstraction] = []
        widths = [0]
        for layer_cfg in config.sa_layers:
            layer = SetAbstraction(layer_cfg, widths[-1], rng)
            self.sa_layers.append(layer)
            widths.append(layer.out_channels)
        self.fp_layers: list[FeaturePropagation] = []
        levels = len(config.sa_layers)
        source_width = widths[levels]
        for j, fp_widths in enumerate(config.fp_widths):
            skip_width = widths[levels - 1 - j]
            layer = FeaturePropagation(source_width + skip_width, fp_widths, rng)
            self.fp_layers.append(layer)
            source_width = layer.out_channels

    def __call__(self, xyz: np.ndarray, training: bool = False) -> SeedSet:
        level_xyz = [xyz]
        level_features: list[Optional[Tensor]] = [None]
        level_indices = [np.arange(xyz.shape[0])]
        for layer in self.sa_layers:
            centers, pooled = layer(level_xyz[-1], level_features[-1], training)
            level_indices.append(level_indices[-1][centers])
            level_xyz.append(level_xyz[-1][centers])
            level_features.append(pooled)

        levels = len(self.sa_layers)
        features = level_features[levels]
        for j, layer in enumerate(self.fp_layers):
            dst, src = levels - 1 - j, levels - j
            features = layer(level_xyz[dst], level_xyz[src], level_features[dst], features, training)
        seed_level = levels - len(self.fp_layers)
        return SeedSet(level_xyz[seed_level], features, level_indices[seed_level])


def resample_indices(num_available: int, num_points: int, seed: int) -> np.ndarray:
    """Random subsample without replacement, or pad by resampling with replacement."""
    if num_available == num_points:
        return np.arange(num_points)
    rng = np.random.default_rng(seed)
    if num_available > num_points:
        return np.sort(rng.choice(num_available, size=num_points, replace=False))
    extra = rng.choice(num_available, size=num_points - num_available, replace=True)
    return np.concatenate([np.arange(num_available), extra])


def extract_seeds(cloud: Union[PointCloud, np.ndarray], backbone: Backbone, training: bool = False) -> SeedSet:
    """
    Resample the cloud to the configured size and run the backbone.

    Seed indices refer to rows of the caller's cloud.
    """
    config = backbone.config
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if xyz.shape[0] < config.seed_count:
        raise ArgumentError(f'Cloud has {xyz.shape[0]} points; at least {config.seed_count} are needed '
                            f'to place {config.seed_count} distinct seeds.')
    picked = resample_indices(xyz.shape[0], config.num_points, config.resample_seed)
    if picked.shape[0] != xyz.shape[0]:
        logger.debug(f'Resampled cloud from {xyz.shape[0]} to {config.num_points} points.')
    seeds = backbone(xyz[picked], training)
    return SeedSet(seeds.xyz, seeds.features, picked[seeds.indices])
