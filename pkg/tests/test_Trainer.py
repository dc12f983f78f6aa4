from __future__ import annotations

import json
import math
from functools import partial

import numpy as np
import pytest

from pymlcvnet import Tensor as T
from pymlcvnet.Config import TrainConfig
from pymlcvnet.Data import load_checkpoint
from pymlcvnet.Detector import MLCVNet, detect
from pymlcvnet.Exceptions import ConfigError, DecodeError, NonFiniteGradientError, TrainingDivergedError
from pymlcvnet.Geometry import box_iou_3d
from pymlcvnet.Layers import recalibrate_batch_norm
from pymlcvnet.Tensor import Tensor
from pymlcvnet.Trainer import OptimState, Schedule, adam_step, prepare_scene, run_ablation, split_dataset, train

from conftest import toy_scene


def _tiny_train_config(**overrides) -> TrainConfig:
    values = dict(base_lr=0.001, batch_size=2, epochs=1, decay_steps=[], decay_rates=[], eval_every=1)
    values.update(overrides)
    return TrainConfig(**values)


# ── Adam ─────────────────────────────────────────────────────────────────

def test_first_adam_step_by_hand():
    p = Tensor(np.array(1.0), requires_grad=True)
    adam_step({'p': p}, {'p': np.array(1.0)}, OptimState(), lr=0.001)
    assert float(p.data) == pytest.approx(1.0 - 0.001 / (1.0 + 1e-8), abs=1e-12)


def test_adam_minimizes_a_quadratic():
    x = Tensor(np.array([0.0]), requires_grad=True)
    state = OptimState()
    for _ in range(1000):
        x.zero_grad()
        T.sum(T.mul(T.sub(x, 3.0), T.sub(x, 3.0))).backward()
        adam_step({'x': x}, {'x': x.grad}, state, lr=0.05)
    assert abs(x.data[0] - 3.0) < 0.05
    assert state.step == 1000


def test_adam_refuses_non_finite_gradients():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0]), requires_grad=True)
    state = OptimState()
    with pytest.raises(NonFiniteGradientError) as error:
        adam_step({'a': a, 'b': b}, {'a': np.array([0.1, 0.1]), 'b': np.array([np.inf])}, state, lr=0.1)
    assert error.value.parameter == 'b'
    np.testing.assert_array_equal(a.data, [1.0, 2.0])
    assert state.step == 0


def test_adam_skips_parameters_without_gradient():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    adam_step({'a': a, 'b': b}, {'a': np.array([1.0]), 'b': None}, OptimState(), lr=0.1)
    assert a.data[0] < 1.0
    assert b.data[0] == 1.0


# ── Schedule ─────────────────────────────────────────────────────────────

def test_step_schedule():
    schedule = Schedule.from_config(TrainConfig())
    assert schedule.lr_at(0) == 0.005
    assert schedule.lr_at(29) == 0.005
    assert schedule.lr_at(30) == pytest.approx(0.0005)
    assert schedule.lr_at(59) == pytest.approx(0.00005)


@pytest.mark.parametrize('steps,rates', [([30, 20], [0.1, 0.1]), ([10], [1.5]), ([10], [])])
def test_invalid_schedules(steps, rates):
    with pytest.raises(ConfigError):
        Schedule(0.01, steps, rates)


# ── Training ─────────────────────────────────────────────────────────────

def test_split_holds_out_the_last_scenes():
    scenes = [toy_scene(i, f'toy_{i}') for i in range(10)]
    train_scenes, held_out = split_dataset(scenes, 0.2)
    assert [s.scene_id for s in held_out] == ['toy_8', 'toy_9']
    assert len(train_scenes) == 8
    train_scenes, held_out = split_dataset(scenes[:1], 0.5)
    assert len(train_scenes) == 1 and held_out == []


def test_zero_epochs_returns_the_initialization(toy_config, toy_scenes):
    result = train(toy_scenes, toy_config, epochs=0, seed=3, train_config=_tiny_train_config())
    reference = MLCVNet(toy_config, seed=3)
    for (name, a), (_, b) in zip(result.model.named_parameters(), reference.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)
    assert result.metrics == []


def test_training_is_deterministic_and_logs_metrics(toy_config, toy_scenes, tmp_path):
    config = _tiny_train_config()
    first = train(toy_scenes[:2], toy_config, seed=1, train_config=config, val_scenes=toy_scenes[2:],
                  checkpoint_path=tmp_path / 'a.ckpt', metrics_path=tmp_path / 'a.jsonl')
    second = train(toy_scenes[:2], toy_config, seed=1, train_config=config)
    for (name, a), (_, b) in zip(first.model.named_parameters(), second.model.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)

    records = [json.loads(line) for line in (tmp_path / 'a.jsonl').read_text().splitlines()]
    assert len(records) == 1 and records[0]['epoch'] == 1
    for key in ('total_loss', 'vote_loss', 'objectness_loss', 'box_loss', 'cls_loss', 'lr', 'map25'):
        assert key in records[0]
    assert math.isfinite(records[0]['total_loss'])

    checkpoint = load_checkpoint(tmp_path / 'a.ckpt')
    assert checkpoint.config['epochs_completed'] == 1
    state = OptimState.from_checkpoint(checkpoint)
    assert state.step == first.state.step == 1
    restored = MLCVNet.from_checkpoint(checkpoint)
    for (name, a), (_, b) in zip(first.model.named_parameters(), restored.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_divergence_keeps_the_last_good_checkpoint(toy_config, toy_scenes, tmp_path):
    config = _tiny_train_config(loss_weights={'vote': float('nan')})
    with pytest.raises(TrainingDivergedError) as error:
        train(toy_scenes[:2], toy_config, seed=0, train_config=config, checkpoint_path=tmp_path / 'x.ckpt')
    assert error.value.epoch == 1
    assert load_checkpoint(tmp_path / 'x.ckpt').config['epochs_completed'] == 0


def test_failed_validation_keeps_the_last_good_checkpoint(toy_config, toy_scenes, tmp_path, monkeypatch):
    def broken(*_, **__):
        raise DecodeError('decode: proposal field objectness is not finite.', field='objectness')
    monkeypatch.setattr('pymlcvnet.Trainer.validation_map', broken)
    with pytest.raises(TrainingDivergedError) as error:
        train(toy_scenes[:2], toy_config, seed=0, train_config=_tiny_train_config(), val_scenes=toy_scenes[2:],
              checkpoint_path=tmp_path / 'x.ckpt', metrics_path=tmp_path / 'x.jsonl')
    assert error.value.epoch == 1
    assert 'DecodeError' in str(error.value)
    assert load_checkpoint(tmp_path / 'x.ckpt').config['epochs_completed'] == 0
    assert (tmp_path / 'x.jsonl').read_text() == ''


def test_final_running_statistics_are_the_training_population(toy_config, toy_scenes):
    result = train(toy_scenes[:2], toy_config, seed=0, train_config=_tiny_train_config())
    model = result.model
    final = {name: buffer.copy() for name, buffer in model.named_buffers()}
    recalibrate_batch_norm(model, [partial(model.forward, prepare_scene(scene, toy_config)[0], training=True)
                                   for scene in toy_scenes[:2]])
    for name, buffer in model.named_buffers():
        np.testing.assert_allclose(buffer, final[name], rtol=0, atol=1e-12, err_msg=name)


@pytest.mark.slow
def test_ablation_trains_every_variant(toy_config, toy_scenes, tmp_path):
    report = run_ablation(toy_scenes[:2], toy_scenes[2:], toy_config, _tiny_train_config(), seed=0, runs=1,
                          out_dir=tmp_path)
    assert list(report) == ['baseline', 'ppc', 'ppc_ooc', 'full']
    for name, runs in report.items():
        assert (tmp_path / f'{name}_seed0.ckpt').exists()
        assert runs[0].result.map[0.5] <= runs[0].result.map[0.25] or math.isnan(runs[0].result.map[0.25])


@pytest.mark.slow
def test_toy_training_learns_to_find_objects(toy_config):
    train_scenes = [toy_scene(seed, f'toy_{seed:03d}') for seed in range(24)]
    held_out = [toy_scene(seed, f'toy_{seed:03d}') for seed in range(100, 106)]
    result = train(train_scenes, toy_config, seed=0,
                   train_config=_tiny_train_config(base_lr=0.005, batch_size=4, epochs=30))
    assert result.metrics[-1]['total_loss'] < result.metrics[0]['total_loss']

    found = 0
    for scene in held_out:
        outputs = []
        detections = detect(scene.cloud, result.model, objectness_threshold=0.0, outputs=outputs)
        assert np.abs(outputs[0].seeds.features.data).max() < 1e6
        for detection in detections:
            assert np.all(np.isfinite(detection.box.center)) and np.all(np.isfinite(detection.box.size))
            found += any(detection.class_id == class_id and box_iou_3d(detection.box, gt) >= 0.25
                         for gt, class_id in scene.gt)
    assert found >= 1
