"""
The detection head on top of the point backbone.

Pipeline per cloud: seeds -> patch-to-patch attention (PPC) -> Hough voting ->
vote clustering -> cluster encoding -> object-to-object attention (OOC) ->
global scene context fusion (GSC) -> proposal head -> box decoding -> NMS.
Each context module can be switched off in ModelConfig; at initialization all
three are exact identities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import Tensor as T
from .Attention import CGNLBlock, cgnl_forward
from .Backbone import Backbone, SeedSet, extract_seeds
from .Config import ModelConfig
from .Data import Checkpoint, box_record, class_size_priors, load_checkpoint, save_checkpoint
from .Exceptions import ArgumentError, DecodeError, ShapeError
from .Geometry import (TWO_PI, OrientedBox3D, PointCloud, ball_query, farthest_point_sample, nms_3d,
                       normalize_angle, normalize_floor)
from .Layers import Linear, Module, SharedMLP, component_rng
from .Tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

SIZE_RESIDUAL_LIMIT = 5.0


@dataclass
class VoteSet:
    """One vote per seed: voted center (M, 3) and vote feature (M, D')."""
    xyz: Tensor
    features: Tensor
    seed_xyz: np.ndarray

    def __len__(self) -> int:
        return self.xyz.shape[0]


@dataclass
class ClusterSet:
    """
    K clusters of votes.

    centers are copies of the FPS-selected vote positions, members index into the VoteSet.
    """
    centers: np.ndarray
    center_indices: np.ndarray
    members: np.ndarray

    def __len__(self) -> int:
        return self.centers.shape[0]

    def member_features(self, votes: VoteSet, k: int) -> np.ndarray:
        return votes.features.data[self.members[k]]


@dataclass
class Proposal:
    """Raw head outputs for one cluster."""
    objectness: np.ndarray
    center_offset: np.ndarray
    size_logits: np.ndarray
    size_residuals: np.ndarray
    heading_logits: np.ndarray
    heading_residuals: np.ndarray
    class_logits: np.ndarray


@dataclass
class ProposalBatch:
    """Head outputs for all K clusters as tensors, so the loss can differentiate through them."""
    objectness: Tensor
    center_offset: Tensor
    size_logits: Tensor
    size_residuals: Tensor
    heading_logits: Tensor
    heading_residuals: Tensor
    class_logits: Tensor

    def __len__(self) -> int:
        return self.objectness.shape[0]

    def __getitem__(self, k: int) -> Proposal:
        sizes = self.size_logits.shape[1]
        return Proposal(
            objectness=self.objectness.data[k],
            center_offset=self.center_offset.data[k],
            size_logits=self.size_logits.data[k],
            size_residuals=self.size_residuals.data[k].reshape(sizes, 3),
            heading_logits=self.heading_logits.data[k],
            heading_residuals=self.heading_residuals.data[k],
            class_logits=self.class_logits.data[k],
        )


@dataclass
class Detection:
    box: OrientedBox3D
    class_id: int
    score: float
    objectness: float = 1.0

    def to_dict(self, class_names: Sequence[str]) -> Dict[str, Any]:
        return box_record(self.box, class_names[self.class_id], score=self.score)


@dataclass
class DetectorOutputs:
    seeds: SeedSet
    votes: VoteSet
    clusters: ClusterSet
    proposals: ProposalBatch
    floor: float = 0.0


# ----------------------------------------------------------------------------------------------------------------
# Components
# ----------------------------------------------------------------------------------------------------------------

class VotingModule(Module):
    """Shared MLP emitting a 3-d center offset and a D-d feature offset per seed."""

    def __init__(self, channels: int, hidden_widths: Sequence[int], rng: np.random.Generator):
        self.channels = channels
        self.mlp = SharedMLP(channels, [*hidden_widths, 3 + channels], rng, activate_last=False)

    def __call__(self, seeds: SeedSet, training: bool = False) -> VoteSet:
        return vote(seeds, self, training)


class ClusterEncoder(Module):
    def __init__(self, channels: int, widths: Sequence[int], rng: np.random.Generator):
        self.mlp = SharedMLP(3 + channels, widths, rng)

    @property
    def out_channels(self) -> int:
        return self.mlp.out_channels


class GlobalSceneContext(Module):
    """
    Fuses the max-pooled pre-attention cluster and seed features into one scene
    vector and broadcast-adds it to every cluster. The output layer starts at
    zero, so the fusion starts as the identity.
    """

    def __init__(self, cluster_channels: int, seed_channels: int, hidden: int, rng: np.random.Generator):
        self.hidden = Linear(cluster_channels + seed_channels, hidden, rng)
        self.output = Linear(hidden, cluster_channels, rng, zero_init=True)


class ProposalHead(Module):
    def __init__(self, channels: int, widths: Sequence[int], num_sizes: int, num_bins: int, num_classes: int,
                 rng: np.random.Generator):
        self.num_sizes = num_sizes
        self.num_bins = num_bins
        self.num_classes = num_classes
        self.mlp = SharedMLP(channels, [*widths, self.output_width], rng, activate_last=False)

    @property
    def output_width(self) -> int:
        return 2 + 3 + 4 * self.num_sizes + 2 * self.num_bins + self.num_classes

    def split(self, raw: Tensor) -> ProposalBatch:
        offsets = np.cumsum([0, 2, 3, self.num_sizes, 3 * self.num_sizes, self.num_bins, self.num_bins,
                             self.num_classes])
        fields = [raw[:, int(a):int(b)] for a, b in zip(offsets[:-1], offsets[1:])]
        return ProposalBatch(*fields)


class MLCVNet(Module):
    """
    Backbone plus voting head with the three optional context modules.

    Every component draws its initial weights from its own random stream, so the
    components shared by two variants start out identical.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        seed_dim, cluster_dim = config.seed_dim, config.cluster_dim
        self.backbone = Backbone(config, component_rng(seed, 'backbone'))
        self.ppc = CGNLBlock(seed_dim, config.attention_groups, component_rng(seed, 'ppc')) \
            if config.use_ppc else None
        self.voting = VotingModule(seed_dim, config.vote_widths, component_rng(seed, 'voting'))
        self.cluster_encoder = ClusterEncoder(seed_dim, config.cluster_widths, component_rng(seed, 'cluster'))
        self.ooc = CGNLBlock(cluster_dim, config.attention_groups, component_rng(seed, 'ooc')) \
            if config.use_ooc else None
        self.gsc = GlobalSceneContext(cluster_dim, seed_dim, config.gsc_hidden, component_rng(seed, 'gsc')) \
            if config.use_gsc else None
        self.proposal_head = ProposalHead(cluster_dim, config.proposal_widths, config.num_size_classes,
                                          config.num_heading_bins, config.num_classes,
                                          component_rng(seed, 'proposal'))
        self.size_priors = np.asarray(config.size_priors if config.size_priors is not None
                                      else class_size_priors(config.class_names), dtype=np.float64)

    def forward(self, xyz: np.ndarray, training: bool = False) -> DetectorOutputs:
        """Run every stage on an already floor-aligned (N, 3) cloud."""
        seeds = extract_seeds(xyz, self.backbone, training)
        patch_features = seeds.features
        if self.ppc is not None:
            seeds = ppc_apply(seeds, self.ppc)
        votes = self.voting(seeds, training)
        clusters = cluster_votes(votes, self.config.num_clusters, self.config.cluster_radius,
                                 self.config.cluster_samples)
        cluster_features = cluster_encode(votes, clusters, self.cluster_encoder, training)
        attended = ooc_apply(cluster_features, self.ooc) if self.ooc is not None else cluster_features
        if self.gsc is not None:
            attended = gsc_apply(patch_features, cluster_features, attended, self.gsc)
        return DetectorOutputs(seeds, votes, clusters, propose(attended, self.proposal_head, training))

    def checkpoint(self, extra_config: Optional[Dict[str, Any]] = None,
                   extra_tensors: Optional[Dict[str, np.ndarray]] = None) -> Checkpoint:
        config = {'model': self.config.to_dict(), 'seed': self.seed, **(extra_config or {})}
        return Checkpoint(config, {**self.state_dict(), **(extra_tensors or {})})

    def save(self, path: Union[str, Path], **kwargs) -> int:
        return save_checkpoint(path, self.checkpoint(**kwargs))

    @classmethod
    def from_checkpoint(cls, checkpoint: Union[Checkpoint, str, Path]) -> MLCVNet:
        """Rebuild a model from a checkpoint; tensors outside the model (optimizer moments) are ignored."""
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = load_checkpoint(checkpoint)
        if 'model' not in checkpoint.config:
            raise ArgumentError('Checkpoint config has no model section.')
        model = cls(ModelConfig.from_dict(checkpoint.config['model']), seed=checkpoint.config.get('seed', 0))
        names = {name for name, _ in model.named_parameters()} | {name for name, _ in model.named_buffers()}
        model.load_state_dict({k: v for k, v in checkpoint.tensors.items() if k in names})
        return model


# ----------------------------------------------------------------------------------------------------------------
# Stages
# ----------------------------------------------------------------------------------------------------------------

def ppc_apply(seeds: SeedSet, block: CGNLBlock) -> SeedSet:
    return seeds.with_features(cgnl_forward(seeds.features, block))


def vote(seeds: SeedSet, module: VotingModule, training: bool = False) -> VoteSet:
    """vote.xyz = seed.xyz + offset, vote.features = seed.features + feature offset."""
    if seeds.features.shape[1] != module.channels:
        raise ShapeError('vote', seeds.features.shape, (len(seeds), module.channels))
    out = module.mlp(seeds.features, training)
    xyz = T.add(Tensor(seeds.xyz), out[:, :3])
    features = T.add(seeds.features, out[:, 3:])
    return VoteSet(xyz, features, seeds.xyz)


def cluster_votes(votes: VoteSet, k: int, radius: float = 0.3, max_samples: int = 16) -> ClusterSet:
    if not 1 <= k <= len(votes):
        raise ArgumentError(f'cluster_votes: K={k} must be in [1, {len(votes)}].')
    xyz = votes.xyz.data
    center_indices = farthest_point_sample(xyz, k, start=0)
    centers = xyz[center_indices].copy()
    members = ball_query(xyz, centers, radius, max_samples)
    return ClusterSet(centers, center_indices, members)


def cluster_encode(votes: VoteSet, clusters: ClusterSet, encoder: ClusterEncoder, training: bool = False) -> Tensor:
    """
    Max over members of MLP(vote.xyz - center, vote.features); one row per cluster.

    :return: (K, D'') cluster feature map.
    """
    members = np.asarray(clusters.members)
    if members.ndim != 2 or members.shape[1] == 0 or members.shape[0] == 0:
        raise ArgumentError('cluster_encode: every cluster needs at least one member vote.')
    k, n = members.shape
    flat = members.reshape(-1)
    relative = T.sub(T.take_rows(votes.xyz, flat), Tensor(np.repeat(clusters.centers, n, axis=0)))
    grouped = T.concat([relative, T.take_rows(votes.features, flat)], axis=1)
    hidden = encoder.mlp(grouped, training)
    pooled, _ = T.max_reduce(T.reshape(hidden, (k, n, encoder.out_channels)), axis=1)
    return pooled


def ooc_apply(cluster_features: Tensor, block: CGNLBlock) -> Tensor:
    return cgnl_forward(cluster_features, block)


def gsc_apply(patch_features: Tensor, cluster_features: Tensor, attended: Tensor,
              module: GlobalSceneContext) -> Tensor:
    """
    C_new = MLP([max(C_pre); max(P_pre)]) + C_OOC.

    :param patch_features: (M, D) seed features before PPC.
    :param cluster_features: (K, D'') cluster features before OOC.
    :param attended: (K, D'') cluster features after OOC.
    """
    if cluster_features.shape != attended.shape:
        raise ShapeError('gsc_apply', cluster_features.shape, attended.shape)
    cluster_max, _ = T.max_reduce(cluster_features, axis=0)
    patch_max, _ = T.max_reduce(patch_features, axis=0)
    scene = T.reshape(T.concat([cluster_max, patch_max], axis=0), (1, -1))
    context = module.output(T.relu(module.hidden(scene)))
    return T.add(attended, T.reshape(context, (attended.shape[1],)))


def propose(cluster_features: Tensor, head: ProposalHead, training: bool = False) -> ProposalBatch:
    return head.split(head.mlp(cluster_features, training))


# ----------------------------------------------------------------------------------------------------------------
# Box coding
# ----------------------------------------------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - np.max(logits))
    return shifted / shifted.sum()


def heading_bin_width(num_bins: int) -> float:
    return TWO_PI / num_bins


def angle_to_bin(yaw: float, num_bins: int) -> Tuple[int, float]:
    """Bin b is centered on b * 2pi / H; the residual is relative to that center."""
    width = heading_bin_width(num_bins)
    shifted = (float(yaw) + width / 2) % TWO_PI
    index = min(int(shifted // width), num_bins - 1)
    return index, shifted - (index * width + width / 2)


def bin_to_angle(index: int, residual: float, num_bins: int) -> float:
    return normalize_angle(index * heading_bin_width(num_bins) + residual)


def encode_box(box: OrientedBox3D, size_class: int, size_priors: np.ndarray, num_bins: int) -> Dict[str, Any]:
    """Regression targets whose decoding reproduces `box` (with the cluster center supplying the offset)."""
    heading_bin, heading_residual = angle_to_bin(box.yaw, num_bins)
    return {
        'size_class': int(size_class),
        'size_residual': np.log(box.size / np.asarray(size_priors)[size_class]),
        'heading_bin': heading_bin,
        'heading_residual': heading_residual,
    }


def decode(proposal: Proposal, cluster_center: np.ndarray, size_priors: np.ndarray,
           num_heading_bins: int) -> Detection:
    """
    Turn one proposal into a box: argmax size class and heading bin, priors scaled by
    exp(residual), score = P(object) * P(class).

    Log-size residuals are clipped to +-SIZE_RESIDUAL_LIMIT, so any finite proposal decodes
    to a positive finite size.
    """
    for name, value in vars(proposal).items():
        if not np.all(np.isfinite(value)):
            raise DecodeError(f'decode: proposal field {name} is not finite.', field=name)
    size_class = int(np.argmax(proposal.size_logits))
    residual = np.clip(proposal.size_residuals[size_class], -SIZE_RESIDUAL_LIMIT, SIZE_RESIDUAL_LIMIT)
    size = np.asarray(size_priors)[size_class] * np.exp(residual)
    if not np.all(np.isfinite(size)) or np.any(size <= 0.0):
        raise DecodeError(f'decode: size {size.tolist()} is not a positive finite extent.', field='size_residuals')
    heading_bin = int(np.argmax(proposal.heading_logits))
    yaw = bin_to_angle(heading_bin, float(proposal.heading_residuals[heading_bin]), num_heading_bins)
    class_probabilities = softmax(proposal.class_logits)
    class_id = int(np.argmax(class_probabilities))
    objectness = float(softmax(proposal.objectness)[1])
    box = OrientedBox3D(np.asarray(cluster_center) + proposal.center_offset, size, yaw)
    score = min(1.0, max(0.0, objectness * float(class_probabilities[class_id])))
    return Detection(box, class_id, score, objectness)


# ----------------------------------------------------------------------------------------------------------------
# Inference
# ----------------------------------------------------------------------------------------------------------------

def prepare_cloud(cloud: Union[PointCloud, np.ndarray], config: ModelConfig) -> Tuple[np.ndarray, float]:
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else PointCloud(cloud).xyz
    return normalize_floor(xyz, config.floor_percentile)


def detect(cloud: Union[PointCloud, np.ndarray], model: MLCVNet, objectness_threshold: Optional[float] = None,
           nms_iou: Optional[float] = None, outputs: Optional[list] = None) -> List[Detection]:
    """
    Detect objects in a cloud given in any z offset; boxes come back in the caller's frame.

    :param objectness_threshold: Minimum P(object), defaults to the model config's.
    :param nms_iou: Suppression IoU for same-class detections, defaults to the model config's.
    :param outputs: When given, the raw DetectorOutputs are appended to it.
    :return: Detections in descending score order.
    """
    config = model.config
    threshold = config.objectness_threshold if objectness_threshold is None else objectness_threshold
    iou = config.nms_iou if nms_iou is None else nms_iou
    xyz, floor = prepare_cloud(cloud, config)
    with no_grad():
        result = model.forward(xyz, training=False)
    result.floor = floor
    if outputs is not None:
        outputs.append(result)

    candidates = []
    for k in range(len(result.proposals)):
        try:
            detection = decode(result.proposals[k], result.clusters.centers[k], model.size_priors,
                               config.num_heading_bins)
        except DecodeError as e:
            logger.warning(f'detect: dropping proposal {k}: {e}')
            continue
        if detection.objectness < threshold:
            continue
        box = detection.box
        center = box.center.copy()
        center[2] += floor
        candidates.append(Detection(OrientedBox3D(center, box.size, box.yaw), detection.class_id,
                                    detection.score, detection.objectness))
    kept = [candidates[i] for i in nms_3d(candidates, iou)]
    logger.debug(f'detect: {len(result.proposals)} proposals, {len(candidates)} above objectness {threshold}, '
                 f'{len(kept)} after NMS.')
    return kept


def vote_cloud(outputs: DetectorOutputs) -> PointCloud:
    """Voted centers in the caller's frame."""
    xyz = outputs.votes.xyz.data.copy()
    xyz[:, 2] += outputs.floor
    return PointCloud(xyz)

