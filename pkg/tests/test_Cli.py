"""Exit codes and file outputs of the mlcvnet command."""

from __future__ import annotations

import json

import pytest

from pymlcvnet.Cli import main
from pymlcvnet.Config import ModelConfig
from pymlcvnet.Data import box_record, generate_scene, save_detections_json, save_scene
from pymlcvnet.Detector import MLCVNet


def _write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


# ── Usage errors ─────────────────────────────────────────────────────────

def test_missing_command_and_arguments_exit_with_one(capsys):
    assert main([]) == 1
    assert main(['synth', '--out', 'x']) == 1
    assert main(['eval', '--iou', '0.25,2', '--dets', 'd', '--gt', 'g', '--report', 'r']) == 1
    assert 'error' in capsys.readouterr().err


def test_unknown_config_key_exits_with_one(tmp_path):
    config = _write_config(tmp_path / 'config.json', model={'bogus': 1})
    assert main(['synth', '--config', config, '--count', '1', '--out', str(tmp_path / 'scenes')]) == 1
    assert not (tmp_path / 'scenes').exists()


# ── Runtime failures ─────────────────────────────────────────────────────

def test_detect_with_missing_or_damaged_checkpoint_exits_with_two(tmp_path):
    cloud = tmp_path / 'cloud.ply'
    cloud.write_text('ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\n'
                     'property float z\nend_header\n')
    args = ['detect', '--in', str(cloud), '--out', str(tmp_path / 'dets.json')]
    assert main(args + ['--ckpt', str(tmp_path / 'missing.ckpt')]) == 2
    (tmp_path / 'bad.ckpt').write_bytes(b'not a checkpoint')
    assert main(args + ['--ckpt', str(tmp_path / 'bad.ckpt')]) == 2
    assert not (tmp_path / 'dets.json').exists()


def test_detect_on_a_non_utf8_cloud_exits_with_two(tmp_path):
    checkpoint = tmp_path / 'toy.ckpt'
    MLCVNet(ModelConfig.toy()).save(checkpoint)
    cloud = tmp_path / 'cloud.ply'
    cloud.write_bytes(b'ply\nformat ascii 1.0\nelement vertex 1\n\xff\xff\n')
    assert main(['detect', '--ckpt', str(checkpoint), '--in', str(cloud), '--out', str(tmp_path / 'dets.json')]) == 2
    assert not (tmp_path / 'dets.json').exists()


# ── Commands ─────────────────────────────────────────────────────────────

def test_synth_writes_ply_and_json_pairs(tmp_path):
    config = _write_config(tmp_path / 'config.json', scene={'num_points': 256, 'min_points_per_object': 8})
    out = tmp_path / 'scenes'
    assert main(['synth', '--config', config, '--seed', '5', '--count', '2', '--out', str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ['scene_000005.json', 'scene_000005.ply',
                                                     'scene_000006.json', 'scene_000006.ply']


def test_eval_of_exact_detections_reports_full_map(tmp_path, capsys):
    gt_dir, det_dir = tmp_path / 'gt', tmp_path / 'dets'
    det_dir.mkdir()
    for seed in (0, 1):
        scene = generate_scene(seed)
        save_scene(gt_dir, scene)
        save_detections_json(det_dir / f'{scene.scene_id}.json', scene.scene_id,
                             [box_record(box, scene.class_names[c], score=0.9) for box, c in scene.gt])
    report = tmp_path / 'report.json'
    assert main(['eval', '--dets', str(det_dir), '--gt', str(gt_dir), '--report', str(report)]) == 0
    document = json.loads(report.read_text())
    assert [t['iou'] for t in document['thresholds']] == [0.25, 0.5]
    assert all(t['map'] == pytest.approx(1.0) for t in document['thresholds'])
    assert 'mAP@0.25' in capsys.readouterr().out


def test_gradcheck_subset(capsys):
    assert main(['gradcheck', '--only', 'tensor.']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4
    assert all(line.startswith('tensor.') and ' ok ' in line for line in lines)


@pytest.mark.slow
def test_synth_train_detect_eval(tmp_path):
    config = _write_config(
        tmp_path / 'config.json',
        model=ModelConfig.toy().to_dict(),
        scene={'num_points': 256, 'min_points_per_object': 8},
        train={'batch_size': 2, 'decay_steps': [], 'decay_rates': [], 'eval_every': 1},
    )
    scenes, dets = tmp_path / 'scenes', tmp_path / 'dets'
    dets.mkdir()
    assert main(['synth', '--config', config, '--count', '3', '--out', str(scenes)]) == 0
    checkpoint = tmp_path / 'model' / 'toy.ckpt'
    assert main(['train', '--config', config, '--data', str(scenes), '--out', str(checkpoint),
                 '--epochs', '1', '--val-fraction', '0.34']) == 0
    assert checkpoint.exists()
    assert len((tmp_path / 'model' / 'metrics.jsonl').read_text().splitlines()) == 1

    for ply in sorted(scenes.glob('*.ply')):
        assert main(['detect', '--ckpt', str(checkpoint), '--in', str(ply),
                     '--out', str(dets / f'{ply.stem}.json'), '--objectness', '0.0']) == 0
    report = tmp_path / 'report.json'
    assert main(['eval', '--config', config, '--dets', str(dets), '--gt', str(scenes), '--report', str(report)]) == 0
    for threshold in json.loads(report.read_text())['thresholds']:
        assert threshold['map'] is None or 0.0 <= threshold['map'] <= 1.0
