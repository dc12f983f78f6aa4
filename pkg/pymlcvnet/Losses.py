"""
Training loss for the voting detector.

Terms: vote regression, objectness, and on positive clusters only the box
center, size class and residual, heading bin and residual, and semantic class.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import Tensor as T
from .Backbone import SeedSet
from .Config import DEFAULT_LOSS_WEIGHTS
from .Detector import ClusterSet, DetectorOutputs, ProposalBatch, VoteSet, encode_box
from .Exceptions import ArgumentError
from .Geometry import OrientedBox3D, points_in_box
from .Tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class LossTargets:
    """Per-cluster assignment against the ground truth."""
    nearest: np.ndarray
    distance: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.positive))


def _zero() -> Tensor:
    return Tensor(0.0)


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the rows selected by `mask` of the per-row sums of `values`."""
    count = int(np.count_nonzero(mask))
    if count == 0:
        return _zero()
    weights = np.broadcast_to(mask.astype(np.float64).reshape((-1,) + (1,) * (values.ndim - 1)), values.shape)
    return T.scale(T.sum(T.mul(values, weights.copy())), 1.0 / count)


def _cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of `labels` over the rows selected by `mask`."""
    one_hot = np.zeros(logits.shape)
    one_hot[np.arange(logits.shape[0]), labels] = 1.0
    return T.scale(_masked_mean(T.mul(T.log_softmax(logits, axis=1), one_hot), mask), -1.0)


def vote_loss(votes: VoteSet, seeds: SeedSet, gt_boxes: Sequence[OrientedBox3D]) -> Tuple[Tensor, int]:
    """
    Smooth-L1 (summed over x, y, z) between each vote and the center of the first
    ground-truth box containing its seed, averaged over those seeds.

    :return: The loss and the number of seeds that fell inside a box.
    """
    owner = np.full(len(seeds), -1, dtype=np.int64)
    for b, box in enumerate(gt_boxes):
        inside = points_in_box(seeds.xyz, box) & (owner < 0)
        owner[inside] = b
    mask = owner >= 0
    if not mask.any():
        return _zero(), 0
    targets = np.zeros((len(seeds), 3))
    targets[mask] = np.array([gt_boxes[b].center for b in owner[mask]])
    return _masked_mean(T.smooth_l1(T.sub(votes.xyz, Tensor(targets))), mask), int(np.count_nonzero(mask))


def assign_clusters(clusters: ClusterSet, gt_boxes: Sequence[OrientedBox3D], positive_distance: float = 0.3,
                    negative_distance: float = 0.6) -> LossTargets:
    """Positive below `positive_distance` from the nearest gt center, negative above `negative_distance`."""
    gt_centers = np.array([box.center for box in gt_boxes])
    distances = np.linalg.norm(clusters.centers[:, None, :] - gt_centers[None, :, :], axis=2)
    nearest = np.argmin(distances, axis=1)
    distance = distances[np.arange(len(clusters)), nearest]
    return LossTargets(nearest, distance, distance < positive_distance, distance > negative_distance)


def detection_loss(proposals: ProposalBatch, clusters: ClusterSet, votes: VoteSet, seeds: SeedSet,
                   gt_boxes: Sequence[OrientedBox3D], gt_classes: Sequence[int],
                   weights: Optional[Mapping[str, float]] = None, *, size_priors: np.ndarray,
                   num_heading_bins: int, positive_distance: float = 0.3,
                   negative_distance: float = 0.6) -> Tuple[Tensor, Dict[str, float]]:
    """
    Weighted sum of the six loss terms.

    :param weights: Per-term weights keyed vote/objectness/center/size/heading/semantic; missing keys
        take the defaults 1.0/0.5/1.0/0.1/0.1/0.1.
    :return: Scalar loss tensor and a breakdown of the unweighted terms plus the weighted total.
    """
    if len(gt_boxes) == 0:
        raise ArgumentError('detection_loss needs at least one ground-truth box.')
    if len(gt_boxes) != len(gt_classes):
        raise ArgumentError(f'{len(gt_boxes)} boxes but {len(gt_classes)} class labels.')
    weights = {**DEFAULT_LOSS_WEIGHTS, **(weights or {})}
    size_priors = np.asarray(size_priors, dtype=np.float64)
    num_sizes = proposals.size_logits.shape[1]
    num_clusters = len(clusters)

    votes_term, _ = vote_loss(votes, seeds, gt_boxes)

    targets = assign_clusters(clusters, gt_boxes, positive_distance, negative_distance)
    labels = targets.positive.astype(np.int64)
    objectness_term = _cross_entropy(proposals.objectness, labels, targets.positive | targets.negative)

    positive = targets.positive
    classes = np.asarray(gt_classes, dtype=np.int64)[targets.nearest]
    encoded = [encode_box(gt_boxes[g], classes[k], size_priors, num_heading_bins)
               for k, g in enumerate(targets.nearest)]

    center_target = np.array([gt_boxes[g].center for g in targets.nearest]) - clusters.centers
    center_term = _masked_mean(T.smooth_l1(T.sub(proposals.center_offset, Tensor(center_target))), positive)

    size_residual_target = np.zeros((num_clusters, 3 * num_sizes))
    size_select = np.zeros((num_clusters, 3 * num_sizes))
    heading_residual_target = np.zeros((num_clusters, num_heading_bins))
    heading_select = np.zeros((num_clusters, num_heading_bins))
    heading_bins = np.zeros(num_clusters, dtype=np.int64)
    for k, target in enumerate(encoded):
        columns = slice(3 * target['size_class'], 3 * target['size_class'] + 3)
        size_residual_target[k, columns] = target['size_residual']
        size_select[k, columns] = 1.0
        heading_bins[k] = target['heading_bin']
        heading_residual_target[k, target['heading_bin']] = target['heading_residual']
        heading_select[k, target['heading_bin']] = 1.0

    size_term = T.add(
        _cross_entropy(proposals.size_logits, classes, positive),
        _masked_mean(T.mul(T.smooth_l1(T.sub(proposals.size_residuals, Tensor(size_residual_target))),
                           size_select), positive))
    heading_term = T.add(
        _cross_entropy(proposals.heading_logits, heading_bins, positive),
        _masked_mean(T.mul(T.smooth_l1(T.sub(proposals.heading_residuals, Tensor(heading_residual_target))),
                           heading_select), positive))
    semantic_term = _cross_entropy(proposals.class_logits, classes, positive)

    terms = {
        'vote': votes_term,
        'objectness': objectness_term,
        'center': center_term,
        'size': size_term,
        'heading': heading_term,
        'semantic': semantic_term,
    }
    total = T.scale(terms['vote'], weights['vote'])
    for name in ('objectness', 'center', 'size', 'heading', 'semantic'):
        total = T.add(total, T.scale(terms[name], weights[name]))

    breakdown = {f'{name}_loss': terms[name].item() for name in terms}
    breakdown['box_loss'] = breakdown['center_loss'] + breakdown['size_loss'] + breakdown['heading_loss']
    breakdown['cls_loss'] = breakdown['semantic_loss']
    breakdown['total_loss'] = total.item()
    breakdown['num_positive'] = targets.num_positive
    return total, breakdown


def scene_loss(outputs: DetectorOutputs, gt_boxes: Sequence[OrientedBox3D], gt_classes: Sequence[int],
               size_priors: np.ndarray, num_heading_bins: int, weights: Optional[Mapping[str, float]] = None,
               positive_distance: float = 0.3, negative_distance: float = 0.6) -> Tuple[Tensor, Dict[str, float]]:
    return detection_loss(outputs.proposals, outputs.clusters, outputs.votes, outputs.seeds, gt_boxes, gt_classes,
                          weights, size_priors=size_priors, num_heading_bins=num_heading_bins,
                          positive_distance=positive_distance, negative_distance=negative_distance)
