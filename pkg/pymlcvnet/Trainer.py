"""
Adam, the step learning-rate schedule and the seeded training loop.
"""
from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import Tensor as T
from .Config import VARIANTS, ModelConfig, TrainConfig
from .Data import Checkpoint, Scene, save_checkpoint
from .Detector import MLCVNet, detect, prepare_cloud
from .Evaluation import EvalResult, evaluate
from .Exceptions import (ArgumentError, ConfigError, MLCVNetError, NonFiniteGradientError, ShapeError,
                         TrainingDivergedError)
from .Geometry import OrientedBox3D
from .Layers import recalibrate_batch_norm
from .Losses import scene_loss

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
LOGGED_TERMS = ('total_loss', 'vote_loss', 'objectness_loss', 'box_loss', 'cls_loss')


@dataclass
class Schedule:
    """Step decay: the rate at index i applies from epoch decay_steps[i] on."""
    base_lr: float
    decay_steps: List[int] = field(default_factory=list)
    decay_rates: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f'base_lr must be positive, not {self.base_lr}.')
        if len(self.decay_steps) != len(self.decay_rates):
            raise ConfigError(f'{len(self.decay_steps)} decay steps but {len(self.decay_rates)} decay rates.')
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ConfigError(f'decay_steps must be strictly increasing, not {self.decay_steps}.')
        if any(not 0.0 < rate <= 1.0 for rate in self.decay_rates):
            raise ConfigError(f'decay_rates must lie in (0, 1], not {self.decay_rates}.')

    @classmethod
    def from_config(cls, config: TrainConfig) -> Schedule:
        return cls(config.base_lr, list(config.decay_steps), list(config.decay_rates))

    def lr_at(self, epoch: int) -> float:
        lr = self.base_lr
        for step, rate in zip(self.decay_steps, self.decay_rates):
            if epoch >= step:
                lr *= rate
        return lr


@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {f'optimizer.m.{name}': value.copy() for name, value in self.m.items()}
        out.update({f'optimizer.v.{name}': value.copy() for name, value in self.v.items()})
        return out

    def to_config(self) -> Dict[str, Any]:
        return {'step': self.step, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps}

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> OptimState:
        settings = checkpoint.config.get('optimizer', {})
        state = cls(step=int(settings.get('step', 0)), beta1=settings.get('beta1', 0.9),
                    beta2=settings.get('beta2', 0.999), eps=settings.get('eps', 1e-8))
        for key, value in checkpoint.tensors.items():
            if key.startswith('optimizer.m.'):
                state.m[key[len('optimizer.m.'):]] = value.copy()
            elif key.startswith('optimizer.v.'):
                state.v[key[len('optimizer.v.'):]] = value.copy()
        return state


def adam_step(params: Mapping[str, T.Tensor], grads: Mapping[str, Optional[np.ndarray]], state: OptimState,
              lr: float) -> OptimState:
    """
    One bias-corrected Adam update, in place.

    Parameters whose gradient is None are left untouched. Nothing is updated if any
    gradient is non-finite.
    """
    for name, grad in grads.items():
        if grad is None:
            continue
        if name not in params:
            raise ArgumentError(f'adam_step: gradient for unknown parameter {name!r}.')
        if grad.shape != params[name].shape:
            raise ShapeError(f'adam_step[{name}]', params[name].shape, grad.shape)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(f'adam_step: non-finite gradient for {name}.', parameter=name)

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = state.m.get(name, np.zeros_like(param.data))
        v = state.v.get(name, np.zeros_like(param.data))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state


@dataclass
class TrainResult:
    model: MLCVNet
    state: OptimState
    metrics: List[Dict[str, Any]]
    checkpoint_path: Optional[Path] = None


def prepare_scene(scene: Scene, config: ModelConfig) -> Tuple[np.ndarray, List[OrientedBox3D], List[int]]:
    """Floor-aligned cloud and boxes shifted into the same frame."""
    xyz, floor = prepare_cloud(scene.cloud, config)
    boxes = [OrientedBox3D(box.center - np.array([0.0, 0.0, floor]), box.size, box.yaw) for box in scene.boxes]
    return xyz, boxes, scene.classes


def split_dataset(scenes: Sequence[Scene], val_fraction: float) -> Tuple[List[Scene], List[Scene]]:
    """The last round(n * val_fraction) scenes are held out; at least one scene is kept for training."""
    count = min(int(round(len(scenes) * val_fraction)), len(scenes) - 1)
    count = max(count, 0)
    return list(scenes[:len(scenes) - count]), list(scenes[len(scenes) - count:])


def validation_map(model: MLCVNet, scenes: Sequence[Scene], thresholds: Sequence[float] = (0.25,)) -> EvalResult:
    detections = {}
    for scene in scenes:
        detections[scene.scene_id] = [(d.class_id, d.score, d.box) for d in detect(scene.cloud, model)]
    return evaluate(detections, {scene.scene_id: scene.gt for scene in scenes}, model.config.class_names, thresholds)


def _snapshot(model: MLCVNet, state: OptimState, train_config: TrainConfig, epochs_completed: int) -> Checkpoint:
    return model.checkpoint(
        extra_config={'train': train_config.to_dict(), 'optimizer': state.to_config(),
                      'epochs_completed': epochs_completed},
        extra_tensors=state.tensors())


def train(dataset: Sequence[Scene], model_config: ModelConfig, schedule: Optional[Schedule] = None,
          epochs: Optional[int] = None, seed: int = 0, train_config: Optional[TrainConfig] = None,
          val_scenes: Sequence[Scene] = (), checkpoint_path: Optional[PathLike] = None,
          metrics_path: Optional[PathLike] = None, progress: bool = False) -> TrainResult:
    """
    Train a detector from a seeded initialization with a seeded shuffle order.

    :param dataset: Training scenes.
    :param schedule: Learning-rate schedule, defaults to the one in `train_config`.
    :param epochs: Overrides `train_config.epochs`; 0 returns the initialization.
    :param val_scenes: Scenes for the periodic mAP@0.25 in the metric log.
    :param checkpoint_path: Where the final checkpoint is written, and the last good one on divergence.
    :param metrics_path: Line-delimited JSON metric log, one record per epoch.
    :raises TrainingDivergedError: When the loss or a gradient becomes non-finite, or an epoch or its
        validation fails; the last good checkpoint is written first.
    """
    if not dataset:
        raise ArgumentError('train needs at least one scene.')
    train_config = train_config or TrainConfig()
    schedule = schedule or Schedule.from_config(train_config)
    epochs = train_config.epochs if epochs is None else epochs
    if epochs < 0:
        raise ArgumentError(f'epochs must be >= 0, not {epochs}.')

    model = MLCVNet(model_config, seed=seed)
    params = dict(model.named_parameters())
    state = OptimState()
    rng = np.random.default_rng(seed)
    prepared = [prepare_scene(scene, model_config) for scene in dataset]
    logger.info(f'Training {model_config.variant_name} model ({model.num_parameters()} parameters) on '
                f'{len(dataset)} scenes for {epochs} epochs.')

    metrics: List[Dict[str, Any]] = []
    log = Path(metrics_path).open('w') if metrics_path is not None else None
    last_good = _snapshot(model, state, train_config, 0)
    try:
        for epoch in tqdm(range(epochs), desc=f'train[{model_config.variant_name}]', disable=not progress):
            lr = schedule.lr_at(epoch)
            validate = bool(val_scenes) and (epoch + 1 == epochs or (epoch + 1) % train_config.eval_every == 0)
            order = rng.permutation(len(prepared))
            sums: Dict[str, float] = defaultdict(float)
            try:
                for start in range(0, len(order), train_config.batch_size):
                    batch = order[start:start + train_config.batch_size]
                    model.zero_grad()
                    for index in batch:
                        xyz, boxes, classes = prepared[index]
                        outputs = model.forward(xyz, training=True)
                        loss, parts = scene_loss(outputs, boxes, classes, model.size_priors,
                                                 model_config.num_heading_bins, train_config.loss_weights,
                                                 train_config.positive_distance, train_config.negative_distance)
                        if not math.isfinite(parts['total_loss']):
                            _diverged(epoch, last_good, checkpoint_path, 'loss is not finite')
                        T.backward(T.scale(loss, 1.0 / len(batch)))
                        for term in LOGGED_TERMS:
                            sums[term] += parts[term]
                    adam_step(params, {name: p.grad for name, p in params.items()}, state, lr)
                if validate or epoch + 1 == epochs:
                    recalibrate_batch_norm(model, [partial(model.forward, xyz, training=True)
                                                   for xyz, _, _ in prepared])
                record: Dict[str, Any] = {'epoch': epoch + 1}
                record.update({term: sums[term] / len(prepared) for term in LOGGED_TERMS})
                record['lr'] = lr
                if validate:
                    record['map25'] = validation_map(model, val_scenes).map[0.25]
            except (TrainingDivergedError, ArgumentError):
                raise
            except NonFiniteGradientError as e:
                _diverged(epoch, last_good, checkpoint_path, str(e))
            except MLCVNetError as e:
                _diverged(epoch, last_good, checkpoint_path, f'{type(e).__name__}: {e}')
            metrics.append(record)
            logger.info(f'Epoch {epoch + 1}/{epochs}: ' + ', '.join(f'{k}={v:.5g}' for k, v in record.items()
                                                                 if k != 'epoch'))
            if log is not None:
                log.write(json.dumps(record) + '\n')
                log.flush()
            last_good = _snapshot(model, state, train_config, epoch + 1)
    finally:
        if log is not None:
            log.close()

    model.zero_grad()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, last_good)
        logger.info(f'Wrote checkpoint to {checkpoint_path}.')
    return TrainResult(model, state, metrics, Path(checkpoint_path) if checkpoint_path is not None else None)


def _diverged(epoch: int, last_good: Checkpoint, checkpoint_path: Optional[PathLike], reason: str) -> None:
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, last_good)
    logger.error(f'Training diverged in epoch {epoch + 1}: {reason}. Last good checkpoint is from epoch '
                 f'{last_good.config.get("epochs_completed")}.')
    raise TrainingDivergedError(f'Training diverged in epoch {epoch + 1}: {reason}.', epoch=epoch + 1,
                                checkpoint_path=checkpoint_path)


@dataclass
class AblationRun:
    variant: str
    seed: int
    result: EvalResult
    final_loss: Optional[float]


def run_ablation(train_scenes: Sequence[Scene], held_out: Sequence[Scene], model_config: ModelConfig,
                 train_config: TrainConfig, seed: int = 0, runs: int = 1, epochs: Optional[int] = None,
                 out_dir: Optional[PathLike] = None, variants: Sequence[str] = tuple(VARIANTS),
                 progress: bool = False) -> Dict[str, List[AblationRun]]:
    """
    Train every variant with seeds seed .. seed + runs - 1 and evaluate each on the held-out scenes.
    """
    if runs < 1:
        raise ArgumentError(f'runs must be >= 1, not {runs}.')
    if not held_out:
        raise ArgumentError('Ablation needs at least one held-out scene.')
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    report: Dict[str, List[AblationRun]] = {}
    for name in variants:
        report[name] = []
        for run in range(runs):
            run_seed = seed + run
            stem = f'{name}_seed{run_seed}'
            trained = train(train_scenes, model_config.variant(name), epochs=epochs, seed=run_seed,
                            train_config=train_config,
                            checkpoint_path=out_dir / f'{stem}.ckpt' if out_dir else None,
                            metrics_path=out_dir / f'{stem}.metrics.jsonl' if out_dir else None,
                            progress=progress)
            result = validation_map(trained.model, held_out, thresholds=(0.25, 0.5))
            final_loss = trained.metrics[-1]['total_loss'] if trained.metrics else None
            report[name].append(AblationRun(name, run_seed, result, final_loss))
            logger.info(f'Ablation {name} seed {run_seed}: mAP@0.25 {result.map[0.25]:.4f}.')
    return report
