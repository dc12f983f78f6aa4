"""
Gradient-check suite and kernel/model benchmarks behind the `gradcheck` and `bench` commands.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from icecream import ic

from . import Tensor as T
from .Attention import CGNLBlock, cgnl_forward
from .Backbone import Backbone, SeedSet, extract_seeds
from .Config import ModelConfig, SceneConfig
from .Data import checkpoint_bytes, generate_scene
from .Detector import (ClusterEncoder, Detection, GlobalSceneContext, MLCVNet, ProposalHead, VoteSet,
                       VotingModule, cluster_encode, cluster_votes, detect, gsc_apply, propose)
from .Geometry import OrientedBox3D, box_iou_3d, nms_3d
from .Layers import component_rng
from .Losses import scene_loss
from .Tensor import Tensor, grad_check
from .Trainer import prepare_scene

logger = logging.getLogger(__name__)

ic.configureOutput(prefix='diagnostics | ', outputFunction=logger.debug)

OP_TOLERANCE = 1e-4
POOLED_TOLERANCE = 1e-3


@dataclass
class CheckOutcome:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {**asdict(self), 'passed': self.passed}


def _away_from_kinks(values: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    values = values.copy()
    close = np.abs(values) < margin
    values[close] = np.where(values[close] < 0, -0.5, 0.5)
    return values


def _weighted(tensor: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum(T.mul(tensor, weights))


def _toy_cloud(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform([-1.0, -1.0, 0.0], [1.0, 1.0, 1.0], size=(n, 3))


def _op_checks(rng: np.random.Generator) -> List[tuple]:
    a = Tensor(rng.normal(size=(5, 4)))
    b = Tensor(rng.normal(size=(4, 3)))
    c = Tensor(rng.normal(size=3))
    w1 = rng.normal(size=(5, 3))

    def linear_relu(a, b, c):
        pre = T.add(T.matmul(a, b), c)
        return _weighted(T.relu(pre), w1)

    x = Tensor(rng.normal(size=(6, 4)))
    gamma = Tensor(rng.normal(size=4))
    beta = Tensor(rng.normal(size=4))
    mean, var = np.zeros(4), np.ones(4)
    w2 = rng.normal(size=(6, 4))

    def batch_norm(x, gamma, beta):
        return _weighted(T.batch_norm_1d(x, gamma, beta, mean, var, training=True), w2)

    logits = Tensor(rng.normal(size=(4, 5)))
    residual = Tensor(_away_from_kinks(rng.normal(scale=2.0, size=(4, 3))))
    w3 = rng.normal(size=(4, 5))

    def softmax_smooth_l1(logits, residual):
        return T.add(_weighted(T.log_softmax(logits, axis=1), w3), T.sum(T.smooth_l1(residual)))

    grouped = Tensor(rng.normal(size=(6, 3)))
    other = Tensor(rng.normal(size=(4, 3)))
    rows = np.array([0, 2, 2, 5, 1, 3])
    w4 = rng.normal(size=(3, 3))

    def gather_pool(grouped, other):
        stacked = T.concat([T.take_rows(grouped, rows), other], axis=0)
        pooled, _ = T.max_reduce(T.reshape(stacked, (5, 2, 3)), axis=1)
        return T.add(_weighted(T.transpose(pooled[:3]), w4.T), T.exact_sum(T.mul(pooled, pooled)))

    return [
        ('tensor.matmul_add_relu', OP_TOLERANCE, linear_relu, [a, b, c], None),
        ('tensor.batch_norm_train', OP_TOLERANCE, batch_norm, [x, gamma, beta], None),
        ('tensor.log_softmax_smooth_l1', OP_TOLERANCE, softmax_smooth_l1, [logits, residual], None),
        ('tensor.take_concat_max', POOLED_TOLERANCE, gather_pool, [grouped, other], None),
    ]


def _cgnl_check(rng: np.random.Generator, groups: int) -> tuple:
    block = CGNLBlock(16, groups, rng)
    block.z = Tensor(rng.normal(scale=0.5, size=(16, 16)), requires_grad=True)
    features = Tensor(rng.normal(size=(8, 16)))
    weights = rng.normal(size=(8, 16))

    def function(*_):
        return _weighted(cgnl_forward(features, block), weights)
    return (f'attention.cgnl_groups{groups}', OP_TOLERANCE, function,
            [features, block.theta, block.phi, block.g, block.z], None)


def _random_votes(rng: np.random.Generator, count: int, channels: int) -> VoteSet:
    xyz = rng.uniform(-0.5, 0.5, size=(count, 3))
    return VoteSet(Tensor(xyz), Tensor(rng.normal(size=(count, channels))), xyz.copy())


def _module_checks(rng: np.random.Generator) -> List[tuple]:
    config = ModelConfig.toy()
    backbone = Backbone(config, component_rng(0, 'backbone'))
    cloud = _toy_cloud(rng, config.num_points)
    seed_weights = rng.normal(size=(config.seed_count, config.seed_dim))

    def backbone_fn(*_):
        return _weighted(extract_seeds(cloud, backbone, training=False).features, seed_weights)

    voting = VotingModule(8, [8], component_rng(0, 'voting'))
    seeds = SeedSet(rng.uniform(-0.5, 0.5, size=(12, 3)), Tensor(rng.normal(size=(12, 8))), np.arange(12))
    xyz_weights, feature_weights = rng.normal(size=(12, 3)), rng.normal(size=(12, 8))

    def voting_fn(*_):
        votes = voting(seeds, training=False)
        return T.add(_weighted(votes.xyz, xyz_weights), _weighted(votes.features, feature_weights))

    encoder = ClusterEncoder(8, [8, 8], component_rng(0, 'cluster'))
    votes = _random_votes(rng, 12, 8)
    clusters = cluster_votes(votes, 4, radius=0.4, max_samples=4)
    cluster_weights = rng.normal(size=(4, 8))

    def encoder_fn(*_):
        return _weighted(cluster_encode(votes, clusters, encoder, training=False), cluster_weights)

    gsc = GlobalSceneContext(8, 6, 5, component_rng(0, 'gsc'))
    gsc.output.weight = Tensor(rng.normal(size=(5, 8)), requires_grad=True)
    patches = Tensor(rng.normal(size=(10, 6)))
    pre = Tensor(rng.normal(size=(4, 8)))
    attended = Tensor(rng.normal(size=(4, 8)))
    gsc_weights = rng.normal(size=(4, 8))

    def gsc_fn(*_):
        return _weighted(gsc_apply(patches, pre, attended, gsc), gsc_weights)

    head = ProposalHead(8, [8], 3, 4, 3, component_rng(0, 'proposal'))
    head_input = Tensor(rng.normal(size=(4, 8)))
    head_weights = rng.normal(size=(4, head.output_width))

    def head_fn(*_):
        batch = propose(head_input, head, training=False)
        return _weighted(T.concat([getattr(batch, name) for name in vars(batch)], axis=1), head_weights)

    return [
        ('backbone.toy', POOLED_TOLERANCE, backbone_fn, backbone.parameters(), 3),
        ('detector.vote_mlp', OP_TOLERANCE, voting_fn, [seeds.features, *voting.parameters()], None),
        ('detector.cluster_encoder', POOLED_TOLERANCE, encoder_fn,
         [votes.xyz, votes.features, *encoder.parameters()], None),
        ('detector.gsc_fusion', POOLED_TOLERANCE, gsc_fn, [patches, pre, attended, *gsc.parameters()], None),
        ('detector.proposal_head', OP_TOLERANCE, head_fn, [head_input, *head.parameters()], None),
    ]


def _full_loss_check(rng: np.random.Generator, probes: int = 10) -> tuple:
    config = ModelConfig.toy()
    model = MLCVNet(config, seed=0)
    for block in (model.ppc, model.ooc):
        block.z = Tensor(rng.normal(scale=0.1, size=block.z.shape), requires_grad=True)
    model.gsc.output.weight = Tensor(rng.normal(scale=0.1, size=model.gsc.output.weight.shape),
                                     requires_grad=True)
    xyz = _toy_cloud(rng, config.num_points)
    with T.no_grad():
        centers = model.forward(xyz, training=False).clusters.centers
    boxes = [OrientedBox3D(centers[k], [0.6, 0.6, 0.6], 0.3 * k) for k in range(2)]
    classes = [0, 1]

    def function(*_):
        outputs = model.forward(xyz, training=False)
        loss, _ = scene_loss(outputs, boxes, classes, model.size_priors, config.num_heading_bins)
        return loss

    named = model.parameters()
    chosen = [named[i] for i in np.sort(rng.choice(len(named), size=min(probes, len(named)), replace=False))]
    return 'detector.full_loss', POOLED_TOLERANCE, function, chosen, 1


def run_gradcheck_suite(seed: int = 0, names: Optional[Sequence[str]] = None) -> List[CheckOutcome]:
    """
    Finite-difference checks for every differentiable op and module.

    :param names: Restrict to checks whose name starts with any of these prefixes.
    """
    rng = np.random.default_rng(seed)
    checks = _op_checks(rng) + [_cgnl_check(rng, g) for g in (1, 2, 4)] + _module_checks(rng) \
        + [_full_loss_check(rng)]
    outcomes = []
    for name, tolerance, function, inputs, probes in checks:
        if names and not any(name.startswith(prefix) for prefix in names):
            continue
        start = time.perf_counter()
        error = grad_check(function, inputs, max_probes=probes, seed=seed)
        outcome = CheckOutcome(name, error, tolerance, time.perf_counter() - start)
        if not outcome.passed:
            ic(outcome)
        logger.info(f'{name}: max relative error {error:.3e} (tolerance {tolerance:g})')
        outcomes.append(outcome)
    return outcomes


def _timed(function: Callable[[], Any], repeats: int) -> Dict[str, float]:
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        function()
        samples.append(time.perf_counter() - start)
    return {'mean_s': float(np.mean(samples)), 'min_s': float(np.min(samples)), 'repeats': repeats}


def _random_boxes(rng: np.random.Generator, count: int) -> List[OrientedBox3D]:
    return [OrientedBox3D(rng.uniform(-2, 2, 3), rng.uniform(0.3, 1.5, 3), rng.uniform(-np.pi, np.pi))
            for _ in range(count)]


def run_benchmarks(config: Optional[ModelConfig] = None, repeats: int = 3, seed: int = 0) -> Dict[str, Any]:
    """
    Kernel timings (seed extraction, attention, IoU, NMS) and a baseline-versus-full
    comparison of parameter count, checkpoint size, training-step and inference time.
    """
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    scene = generate_scene(seed, SceneConfig(class_names=config.class_names,
                                             num_points=max(config.num_points, 2048)))
    cloud = scene.cloud.xyz
    backbone = Backbone(config, component_rng(seed, 'backbone'))
    block = CGNLBlock(config.seed_dim, config.attention_groups, component_rng(seed, 'ppc'))
    attention_input = Tensor(rng.normal(size=(config.seed_count, config.seed_dim)))
    pairs = list(zip(_random_boxes(rng, 1000), _random_boxes(rng, 1000)))
    dets = [Detection(box, int(rng.integers(config.num_classes)), float(rng.uniform()))
            for box in _random_boxes(rng, config.num_clusters)]

    with T.no_grad():
        kernels = {
            'seed_extraction': _timed(lambda: extract_seeds(cloud, backbone), repeats),
            'attention': _timed(lambda: cgnl_forward(attention_input, block), repeats),
            'box_iou_3d_1000_pairs': _timed(lambda: [box_iou_3d(a, b) for a, b in pairs], repeats),
            f'nms_3d_{len(dets)}': _timed(lambda: nms_3d(dets, config.nms_iou), repeats),
        }

    models = {}
    xyz, boxes, classes = prepare_scene(scene, config)
    for name in ('baseline', 'full'):
        model = MLCVNet(config.variant(name), seed=seed)

        def train_step():
            model.zero_grad()
            outputs = model.forward(xyz, training=True)
            loss, _ = scene_loss(outputs, boxes, classes, model.size_priors, config.num_heading_bins)
            T.backward(loss)

        models[name] = {
            'parameters': model.num_parameters(),
            'checkpoint_bytes': len(checkpoint_bytes(model.checkpoint())),
            'train_step': _timed(train_step, repeats),
            'inference': _timed(lambda: detect(scene.cloud, model), repeats),
        }
        model.zero_grad()
    logger.info(f'Benchmarked {len(kernels)} kernels and {len(models)} model variants.')
    return {'config': {'num_points': config.num_points, 'seed_count': config.seed_count,
                       'seed_dim': config.seed_dim, 'num_clusters': config.num_clusters},
            'kernels': kernels, 'models': models}
