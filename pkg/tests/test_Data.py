"""Scene generator, ASCII PLY, scene/detection JSON and the binary checkpoint layout."""

from __future__ import annotations

import json
from collections import Counter

import numpy as np
import pytest

from pymlcvnet.Config import SceneConfig
from pymlcvnet.Data import (Checkpoint, checkpoint_bytes, class_size_priors, generate_dataset, generate_scene,
                            load_checkpoint, load_detections_json, load_ply, load_scene, load_scene_dir,
                            load_scene_json, parse_checkpoint, save_checkpoint, save_detections_json, save_ply,
                            save_scene)
from pymlcvnet.Exceptions import (ConfigError, CorruptCheckpointError, ParseError, SceneGenerationError,
                                  UnsupportedFormatError)
from pymlcvnet.Geometry import clip_convex_polygon, points_in_box, polygon_area

PLY_FIXTURE = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
end_header
0.5 -1.25 2
1e-3 0 -7.75
3.141592653589793 2.5 0.1
"""

# 2x2 tensor [[1, 2], [3, 4]] named "w" with config {"a": 1}
CHECKPOINT_HEX = (
    '4d4c4356'                              # magic
    '01000000'                              # version
    '0800000000000000'                      # config length
    '7b2261223a20317d'                      # {"a": 1}
    '01000000'                              # tensor count
    '01000000' '77'                         # name
    '02000000' '0200000000000000' '0200000000000000'
    '000000000000f03f' '0000000000000040' '0000000000000840' '0000000000001040'
)


# ── PLY ──────────────────────────────────────────────────────────────────

def test_ply_fixture_reads_exact_coordinates(tmp_path):
    path = tmp_path / 'fixture.ply'
    path.write_text(PLY_FIXTURE)
    cloud = load_ply(path)
    np.testing.assert_array_equal(cloud.xyz, [[0.5, -1.25, 2.0], [0.001, 0.0, -7.75],
                                              [3.141592653589793, 2.5, 0.1]])


def test_ply_round_trip(tmp_path, rng):
    xyz = rng.normal(size=(50, 3)) * 1e3
    save_ply(tmp_path / 'c.ply', xyz)
    np.testing.assert_allclose(load_ply(tmp_path / 'c.ply').xyz, xyz, rtol=0, atol=1e-12 * 1e3)


def test_truncated_ply_names_the_first_missing_line(tmp_path):
    path = tmp_path / 'short.ply'
    path.write_text('\n'.join(PLY_FIXTURE.splitlines()[:9]) + '\n')
    with pytest.raises(ParseError) as error:
        load_ply(path)
    assert error.value.line == 10


def test_trailing_data_after_the_last_vertex(tmp_path):
    path = tmp_path / 'long.ply'
    path.write_text(PLY_FIXTURE + '1 2 3\n')
    with pytest.raises(ParseError) as error:
        load_ply(path)
    assert error.value.line == 11


def test_ply_rejects_bad_tokens_and_formats(tmp_path):
    path = tmp_path / 'bad.ply'
    path.write_text(PLY_FIXTURE.replace('1e-3 0', '1e-3 zero'))
    with pytest.raises(ParseError) as error:
        load_ply(path)
    assert error.value.line == 9
    path.write_text(PLY_FIXTURE.replace('ascii 1.0', 'binary_little_endian 1.0'))
    with pytest.raises(ParseError):
        load_ply(path)


def test_non_utf8_input_is_a_parse_error(tmp_path):
    path = tmp_path / 'binary.ply'
    path.write_bytes(b'ply\nformat ascii 1.0\n\xff\xfe\x00element vertex 1\n')
    with pytest.raises(ParseError) as error:
        load_ply(path)
    assert error.value.line == 3
    path = tmp_path / 'binary.json'
    path.write_bytes(b'{"scene_id": "\xc3\x28"}')
    with pytest.raises(ParseError):
        load_detections_json(path)


# ── Scene and detection JSON ─────────────────────────────────────────────

def test_scene_json_missing_size_names_the_field(tmp_path):
    path = tmp_path / 'scene.json'
    path.write_text(json.dumps({'scene_id': 's', 'objects': [{'class': 'table', 'center': [0, 0, 0], 'yaw': 0}]}))
    with pytest.raises(ParseError) as error:
        load_scene_json(path, ['table'])
    assert error.value.field == 'objects[0].size'


def test_scene_json_hand_fixture(tmp_path):
    path = tmp_path / 'scene.json'
    path.write_text(json.dumps({'scene_id': 'desk_01', 'objects': [
        {'class': 'chair', 'center': [1.0, 2.0, 0.45], 'size': [0.5, 0.5, 0.9], 'yaw': 0.25},
    ]}))
    scene_id, gt, extras = load_scene_json(path, ['table', 'chair'])
    assert scene_id == 'desk_01'
    (parsed, class_id), = gt
    assert class_id == 1
    np.testing.assert_array_equal(parsed.center, [1.0, 2.0, 0.45])
    np.testing.assert_array_equal(parsed.size, [0.5, 0.5, 0.9])
    assert parsed.yaw == pytest.approx(0.25, abs=1e-12)
    assert extras['metadata'] == {}


def test_scene_json_rejects_unknown_class_and_bad_numbers(tmp_path):
    path = tmp_path / 'scene.json'
    path.write_text(json.dumps({'scene_id': 's', 'objects': [
        {'class': 'lamp', 'center': [0, 0, 0], 'size': [1, 1, 1], 'yaw': 0}]}))
    with pytest.raises(ParseError) as error:
        load_scene_json(path, ['table'])
    assert error.value.field == 'objects[0].class'
    path.write_text(json.dumps({'scene_id': 's', 'objects': [
        {'class': 'table', 'center': [0, 0, 'x'], 'size': [1, 1, 1], 'yaw': 0}]}))
    with pytest.raises(ParseError) as error:
        load_scene_json(path, ['table'])
    assert error.value.field == 'objects[0].center[2]'


def test_detections_json(tmp_path):
    path = tmp_path / 'dets.json'
    save_detections_json(path, 'scene_000001', [{'class': 'table', 'score': 0.75, 'center': [0, 0, 0.5],
                                                 'size': [1, 1, 1], 'yaw': 0.1}])
    scene_id, detections = load_detections_json(path)
    assert scene_id == 'scene_000001'
    assert detections[0][0] == 'table' and detections[0][1] == 0.75
    document = json.loads(path.read_text())
    document['detections'][0]['score'] = 1.5
    path.write_text(json.dumps(document))
    with pytest.raises(ParseError):
        load_detections_json(path)


# ── Checkpoints ──────────────────────────────────────────────────────────

def test_checkpoint_byte_layout_matches_hand_fixture():
    blob = checkpoint_bytes(Checkpoint({'a': 1}, {'w': np.array([[1.0, 2.0], [3.0, 4.0]])}))
    assert blob.hex() == CHECKPOINT_HEX
    parsed = parse_checkpoint(bytes.fromhex(CHECKPOINT_HEX))
    assert parsed.config == {'a': 1}
    np.testing.assert_array_equal(parsed.tensors['w'], [[1.0, 2.0], [3.0, 4.0]])


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    tensors = {'scalar': np.array(np.pi), 'vector': rng.normal(size=7), 'matrix': rng.normal(size=(3, 4))}
    written = save_checkpoint(tmp_path / 'm.ckpt', Checkpoint({'model': {'x': [1, 2]}}, tensors))
    assert written == (tmp_path / 'm.ckpt').stat().st_size
    loaded = load_checkpoint(tmp_path / 'm.ckpt')
    for name, value in tensors.items():
        assert loaded.tensors[name].tobytes() == value.tobytes()
        assert loaded.tensors[name].shape == value.shape


def test_damaged_checkpoints():
    blob = bytes.fromhex(CHECKPOINT_HEX)
    with pytest.raises(UnsupportedFormatError):
        parse_checkpoint(b'XXXX' + blob[4:])
    with pytest.raises(UnsupportedFormatError):
        parse_checkpoint(blob[:4] + (2).to_bytes(4, 'little') + blob[8:])
    with pytest.raises(CorruptCheckpointError):
        parse_checkpoint(blob[:-3])
    with pytest.raises(CorruptCheckpointError):
        parse_checkpoint(blob + b'\x00')


# ── Scene generator ──────────────────────────────────────────────────────

def test_generator_is_deterministic():
    a, b = generate_scene(3), generate_scene(3)
    assert a.scene_id == 'scene_000003'
    np.testing.assert_array_equal(a.cloud.xyz, b.cloud.xyz)
    assert [(x.sort_key(), c) for x, c in a.gt] == [(x.sort_key(), c) for x, c in b.gt]
    assert not np.array_equal(a.cloud.xyz, generate_scene(4).cloud.xyz)


def test_generated_scenes_respect_the_layout_rules():
    config = SceneConfig()
    for scene in generate_dataset(10, 5, config):
        assert len(scene.cloud) == config.num_points
        assert config.min_objects <= len(scene.gt) <= config.max_objects
        for i, (target, _) in enumerate(scene.gt):
            assert np.count_nonzero(points_in_box(scene.cloud, target)) >= config.min_points_per_object
            assert np.all(np.abs(target.corners_2d()) <= np.asarray(config.room_size) / 2 + 1e-9)
            assert target.z_range[0] == pytest.approx(0.0)
            for other, _ in scene.gt[i + 1:]:
                assert polygon_area(clip_convex_polygon(target.corners_2d(), other.corners_2d())) <= 1e-9


def test_generator_preconditions():
    with pytest.raises(SceneGenerationError):
        generate_scene(0, SceneConfig(min_objects=0, max_objects=0))
    with pytest.raises(SceneGenerationError):
        generate_scene(0, SceneConfig(class_names=['table', 'lamp']))


@pytest.mark.slow
def test_class_draws_follow_the_configured_probabilities():
    config = SceneConfig(class_probabilities=[2.0, 1.0, 1.0], num_points=1024)
    counts = Counter(class_id for scene in generate_dataset(0, 150, config) for _, class_id in scene.gt)
    total = sum(counts.values())
    for class_id, expected in enumerate(config.probabilities):
        assert abs(counts[class_id] / total - expected) < 0.08


def test_scene_directory_round_trip(tmp_path):
    scene = generate_scene(7, SceneConfig(num_points=256, min_points_per_object=8))
    save_scene(tmp_path, scene)
    (tmp_path / 'orphan.json').write_text('{}')
    loaded = load_scene_dir(tmp_path, scene.class_names)
    assert [s.scene_id for s in loaded] == [scene.scene_id]
    np.testing.assert_array_equal(loaded[0].cloud.xyz, scene.cloud.xyz)
    assert loaded[0].metadata['effective_seed'] == scene.metadata['effective_seed']
    direct = load_scene(tmp_path / f'{scene.scene_id}.ply', tmp_path / f'{scene.scene_id}.json', scene.class_names)
    for (a, ca), (b, cb) in zip(direct.gt, scene.gt):
        assert ca == cb
        np.testing.assert_array_equal(a.center, b.center)


def test_size_priors_are_class_midpoints():
    np.testing.assert_allclose(class_size_priors(['chair']), [[0.475, 0.475, 0.9]])
    with pytest.raises(ConfigError):
        class_size_priors(['lamp'])

