"""
Synthetic desk-scale scenes, ASCII PLY and JSON annotation I/O, and the binary checkpoint format.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .Config import SceneConfig
from .Exceptions import (ArgumentError, ConfigError, CorruptCheckpointError, ParseError, SceneGenerationError,
                         UnsupportedFormatError)
from .Geometry import OrientedBox3D, PointCloud, clip_convex_polygon, points_in_box, polygon_area

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b'MLCV'
CHECKPOINT_VERSION = 1
PLY_FLOAT_TYPES = ('float', 'double', 'float32', 'float64')
OVERLAP_AREA_EPS = 1e-9


# ----------------------------------------------------------------------------------------------------------------
# Object classes: size ranges (x, y, z full extents, meters) and part layouts in the object frame.
# Parts are axis-aligned boxes (center, size) with the object's footprint centered on the origin and z from 0.
# ----------------------------------------------------------------------------------------------------------------

Part = Tuple[Tuple[float, float, float], Tuple[float, float, float]]


def _legs(w: float, d: float, height: float, leg: float) -> List[Part]:
    return [((sx * (w - leg) / 2, sy * (d - leg) / 2, height / 2), (leg, leg, height))
            for sx in (-1, 1) for sy in (-1, 1)]


def _table_parts(w: float, d: float, h: float) -> List[Part]:
    top = 0.04
    return [((0.0, 0.0, h - top / 2), (w, d, top))] + _legs(w, d, h - top, 0.05)


def _chair_parts(w: float, d: float, h: float) -> List[Part]:
    seat_height, seat, back = 0.45 * h, 0.05, 0.05
    return [
        ((0.0, 0.0, seat_height - seat / 2), (w, d, seat)),
        ((0.0, (d - back) / 2, (seat_height + h) / 2), (w, back, h - seat_height)),
    ] + _legs(w, d, seat_height - seat, 0.04)


def _cabinet_parts(w: float, d: float, h: float) -> List[Part]:
    return [((0.0, 0.0, h / 2), (w, d, h))]


def _sofa_parts(w: float, d: float, h: float) -> List[Part]:
    base, back, arm = 0.45 * h, 0.2, 0.2
    return [
        ((0.0, 0.0, base / 2), (w, d, base)),
        ((0.0, (d - back) / 2, h / 2), (w, back, h)),
        ((-(w - arm) / 2, 0.0, 0.325 * h), (arm, d, 0.65 * h)),
        (((w - arm) / 2, 0.0, 0.325 * h), (arm, d, 0.65 * h)),
    ]


def _bed_parts(w: float, d: float, h: float) -> List[Part]:
    board = 0.08
    return [
        ((0.0, 0.0, h / 4), (w, d, h / 2)),
        ((0.0, -(d - board) / 2, h / 2), (w, board, h)),
    ]


@dataclass(frozen=True)
class ObjectClass:
    size_ranges: Tuple[Tuple[float, float], Tuple[float, float], Tuple[float, float]]
    parts: Callable[[float, float, float], List[Part]]

    @property
    def mean_size(self) -> List[float]:
        return [(low + high) / 2 for low, high in self.size_ranges]


OBJECT_CLASSES: Dict[str, ObjectClass] = {
    'table': ObjectClass(((0.8, 1.6), (0.6, 1.0), (0.7, 0.8)), _table_parts),
    'chair': ObjectClass(((0.4, 0.55), (0.4, 0.55), (0.8, 1.0)), _chair_parts),
    'cabinet': ObjectClass(((0.5, 1.0), (0.4, 0.6), (1.2, 1.9)), _cabinet_parts),
    'sofa': ObjectClass(((1.5, 2.2), (0.8, 1.0), (0.7, 0.9)), _sofa_parts),
    'bed': ObjectClass(((1.4, 2.0), (1.9, 2.2), (0.9, 1.1)), _bed_parts),
}


def class_size_priors(class_names: Sequence[str]) -> List[List[float]]:
    """Mean (x, y, z) extents of each class under the generator's size distribution."""
    unknown = [name for name in class_names if name not in OBJECT_CLASSES]
    if unknown:
        raise ConfigError(f'No size prior for classes {unknown}; set size_priors explicitly or use classes from '
                          f'{list(OBJECT_CLASSES)}.', valid_keys=list(OBJECT_CLASSES))
    return [OBJECT_CLASSES[name].mean_size for name in class_names]


# ----------------------------------------------------------------------------------------------------------------
# Scenes
# ----------------------------------------------------------------------------------------------------------------

@dataclass
class Scene:
    """A point cloud with its ground-truth boxes; `gt` holds (box, class_id) pairs."""
    scene_id: str
    cloud: PointCloud
    gt: List[Tuple[OrientedBox3D, int]]
    class_names: List[str]
    rng_seed: Optional[int] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def boxes(self) -> List[OrientedBox3D]:
        return [box for box, _ in self.gt]

    @property
    def classes(self) -> List[int]:
        return [class_id for _, class_id in self.gt]

    def validate(self, min_points: int = 32, room_size: Optional[Sequence[float]] = None) -> None:
        """Raise ArgumentError unless every box holds `min_points` points and lies inside the room."""
        for i, (box, class_id) in enumerate(self.gt):
            if not 0 <= class_id < len(self.class_names):
                raise ArgumentError(f'{self.scene_id}: object {i} has unknown class id {class_id}.')
            count = int(np.count_nonzero(points_in_box(self.cloud, box)))
            if count < min_points:
                raise ArgumentError(f'{self.scene_id}: object {i} ({self.class_names[class_id]}) holds {count} '
                                    f'points, fewer than {min_points}.', details={'object': i, 'points': count})
            if room_size is not None:
                corners = box.corners_2d()
                half = np.asarray(room_size, dtype=np.float64) / 2
                if np.any(np.abs(corners) > half + 1e-9):
                    raise ArgumentError(f'{self.scene_id}: object {i} extends outside the room.')


class _PlacementFailure(Exception):
    pass


def _sample_box_surface(rng: np.random.Generator, center: np.ndarray, size: np.ndarray, n: int) -> np.ndarray:
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
    face_probabilities = np.repeat(areas, 2) / (2.0 * areas.sum())
    faces = rng.choice(6, size=n, p=face_probabilities)
    local = rng.uniform(-0.5, 0.5, size=(n, 3))
    local[np.arange(n), faces // 2] = np.where(faces % 2 == 0, -0.5, 0.5)
    return center + local * size


def _sample_object(rng: np.random.Generator, parts: List[Part], density: float, min_points: int) -> np.ndarray:
    centers = np.array([p[0] for p in parts])
    sizes = np.array([p[1] for p in parts])
    areas = 2.0 * (sizes[:, 0] * sizes[:, 1] + sizes[:, 0] * sizes[:, 2] + sizes[:, 1] * sizes[:, 2])
    total = max(int(round(density * areas.sum())), 2 * min_points)
    counts = rng.multinomial(total, areas / areas.sum())
    return np.concatenate([_sample_box_surface(rng, c, s, k) for c, s, k in zip(centers, sizes, counts)])


def _place(rng: np.random.Generator, size: np.ndarray, yaw: float, placed: List[OrientedBox3D],
           room: np.ndarray, attempts: int) -> OrientedBox3D:
    reach = 0.5 * math.hypot(size[0], size[1])
    half = room / 2 - reach
    if np.any(half < 0):
        raise _PlacementFailure(f'object of footprint {size[:2].tolist()} does not fit the room')
    for _ in range(attempts):
        xy = rng.uniform(-half, half)
        box = OrientedBox3D([xy[0], xy[1], size[2] / 2], size, yaw)
        corners = box.corners_2d()
        if all(polygon_area(clip_convex_polygon(corners, other.corners_2d())) <= OVERLAP_AREA_EPS
               for other in placed):
            return box
    raise _PlacementFailure(f'no free position after {attempts} attempts')


def _build_scene(seed: int, config: SceneConfig) -> Tuple[np.ndarray, List[Tuple[OrientedBox3D, int]], list]:
    rng = np.random.default_rng(seed)
    room = np.asarray(config.room_size, dtype=np.float64)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    class_ids = rng.choice(len(config.class_names), size=count, p=config.probabilities)

    gt: List[Tuple[OrientedBox3D, int]] = []
    object_points = []
    for class_id in class_ids.tolist():
        spec = OBJECT_CLASSES[config.class_names[class_id]]
        size = np.array([rng.uniform(low, high) for low, high in spec.size_ranges])
        yaw = float(rng.uniform(-math.pi, math.pi))
        box = _place(rng, size, yaw, [b for b, _ in gt], room, config.max_placement_attempts)
        local = _sample_object(rng, spec.parts(*size.tolist()), config.object_density,
                               config.min_points_per_object)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        object_points.append(local @ rotation.T + np.array([box.center[0], box.center[1], 0.0]))
        gt.append((box, class_id))

    floor_count = int(round(config.floor_density * room[0] * room[1]))
    floor = np.column_stack([rng.uniform(-room[0] / 2, room[0] / 2, floor_count),
                             rng.uniform(-room[1] / 2, room[1] / 2, floor_count),
                             np.zeros(floor_count)])
    objects = np.concatenate(object_points) if object_points else np.empty((0, 3))
    xyz = np.concatenate([floor, objects])
    xyz = xyz + rng.normal(0.0, config.noise_sigma, size=xyz.shape)

    patches = []
    for _ in range(int(rng.integers(0, config.max_dropout_patches + 1))):
        if objects.shape[0] == 0:
            break
        center = xyz[floor_count + int(rng.integers(objects.shape[0]))].copy()
        radius = float(rng.uniform(*config.dropout_radius))
        keep = np.sum((xyz - center) ** 2, axis=1) > radius ** 2
        patches.append({'center': center.tolist(), 'radius': radius, 'removed': int(np.count_nonzero(~keep))})
        xyz = xyz[keep]

    if xyz.shape[0] >= config.num_points:
        picked = np.sort(rng.choice(xyz.shape[0], size=config.num_points, replace=False))
    else:
        extra = rng.choice(xyz.shape[0], size=config.num_points - xyz.shape[0], replace=True)
        picked = np.concatenate([np.arange(xyz.shape[0]), extra])
    xyz = xyz[picked]

    for i, (box, _) in enumerate(gt):
        inside = int(np.count_nonzero(points_in_box(xyz, box)))
        if inside < config.min_points_per_object:
            raise _PlacementFailure(f'object {i} kept only {inside} points')
    return xyz, gt, patches


def generate_scene(seed: int, config: Optional[SceneConfig] = None) -> Scene:
    """
    Generate a floor-aligned room with randomly placed objects.

    A scene whose placement or point-count check fails is regenerated with the
    next seed; the attempts are recorded in `metadata`.

    :param seed: Seed for every random draw; identical seeds give identical scenes.
    :param config: Scene layout, defaults to SceneConfig().
    :return: Scene named scene_<seed>.
    """
    config = config or SceneConfig()
    if config.max_objects < 1:
        raise SceneGenerationError('Scene generation needs max_objects >= 1; zero objects configured.')
    if config.min_objects < 1:
        raise SceneGenerationError(f'Scene generation needs min_objects >= 1, not {config.min_objects}.')
    unknown = [name for name in config.class_names if name not in OBJECT_CLASSES]
    if unknown:
        raise SceneGenerationError(f'No generator for classes {unknown}. Known classes are {list(OBJECT_CLASSES)}.')

    failures = []
    for attempt in range(config.max_regenerations):
        effective_seed = seed + attempt
        try:
            xyz, gt, patches = _build_scene(effective_seed, config)
        except _PlacementFailure as e:
            logger.warning(f'Scene seed {effective_seed}: {e}; regenerating with seed {effective_seed + 1}.')
            failures.append({'seed': effective_seed, 'reason': str(e)})
            continue
        scene = Scene(
            scene_id=f'scene_{seed:06d}',
            cloud=PointCloud(xyz),
            gt=gt,
            class_names=list(config.class_names),
            rng_seed=seed,
            metadata={'effective_seed': effective_seed, 'regenerations': failures, 'dropout_patches': patches},
        )
        scene.validate(config.min_points_per_object, config.room_size)
        logger.debug(f'Generated {scene.scene_id} with {len(gt)} objects from seed {effective_seed}.')
        return scene
    raise SceneGenerationError(f'Scene seed {seed}: gave up after {config.max_regenerations} regenerations.',
                               details=failures)


def generate_dataset(seed: int, count: int, config: Optional[SceneConfig] = None,
                     progress: bool = False) -> List[Scene]:
    """Scenes for seeds seed, seed + 1, ..., seed + count - 1."""
    seeds = range(seed, seed + count)
    return [generate_scene(s, config) for s in tqdm(seeds, desc='scenes', disable=not progress)]


# ----------------------------------------------------------------------------------------------------------------
# ASCII PLY
# ----------------------------------------------------------------------------------------------------------------

def save_ply(path: PathLike, cloud: Union[PointCloud, np.ndarray]) -> None:
    """Write x, y, z as shortest round-trip decimal text."""
    xyz = cloud.xyz if isinstance(cloud, PointCloud) else PointCloud(cloud).xyz
    lines = [
        'ply',
        'format ascii 1.0',
        'comment pymlcvnet point cloud',
        f'element vertex {xyz.shape[0]}',
        'property double x',
        'property double y',
        'property double z',
        'end_header',
    ]
    lines.extend(' '.join(repr(v) for v in row) for row in xyz.tolist())
    Path(path).write_text('\n'.join(lines) + '\n')
    logger.debug(f'Wrote {xyz.shape[0]} points to {path}.')


def _read_text(path: PathLike) -> str:
    blob = Path(path).read_bytes()
    try:
        return blob.decode('utf-8')
    except UnicodeDecodeError as e:
        raise ParseError(f'not UTF-8 text (byte {e.start})', path=str(path), line=blob[:e.start].count(b'\n') + 1)


def load_ply(path: PathLike) -> PointCloud:
    """
    Read an ASCII PLY holding a single vertex element whose first properties are x, y, z.

    :raises ParseError: On a malformed header, a body that does not match the vertex count,
        or anything after the last vertex; the message names the line.
    """
    source = str(path)
    lines = _read_text(path).split('\n')

    def fail(message: str, line: int):
        raise ParseError(message, path=source, line=line)

    if lines[0].strip() != 'ply':
        fail('missing "ply" magic', 1)
    count: Optional[int] = None
    properties: List[str] = []
    format_seen = False
    cursor = 1
    while True:
        if cursor >= len(lines):
            fail('header has no end_header', len(lines))
        tokens = lines[cursor].split()
        line = cursor + 1
        cursor += 1
        if not tokens:
            fail('blank line in header', line)
        keyword = tokens[0]
        if keyword == 'end_header':
            break
        if keyword in ('comment', 'obj_info'):
            continue
        if keyword == 'format':
            if tokens[1:] != ['ascii', '1.0']:
                fail(f'unsupported format {" ".join(tokens[1:])!r}, only "ascii 1.0" is read', line)
            format_seen = True
        elif keyword == 'element':
            if len(tokens) != 3 or tokens[1] != 'vertex' or count is not None:
                fail(f'unsupported element declaration {lines[line - 1].strip()!r}', line)
            try:
                count = int(tokens[2])
            except ValueError:
                fail(f'invalid vertex count {tokens[2]!r}', line)
            if count < 1:
                fail(f'vertex count must be positive, not {count}', line)
        elif keyword == 'property':
            if count is None:
                fail('property before element declaration', line)
            if len(tokens) != 3 or tokens[1] not in PLY_FLOAT_TYPES:
                fail(f'unsupported property {lines[line - 1].strip()!r}', line)
            properties.append(tokens[2])
        else:
            fail(f'unknown header keyword {keyword!r}', line)
    if not format_seen:
        fail('header has no format line', cursor)
    if count is None:
        fail('header declares no vertex element', cursor)
    if properties[:3] != ['x', 'y', 'z']:
        fail(f'vertex properties must start with x, y, z, not {properties}', cursor)

    body = lines[cursor:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) < count:
        fail(f'expected {count} vertices, file ends after {len(body)}', cursor + len(body) + 1)
    if len(body) > count:
        fail('trailing data after the last vertex', cursor + count + 1)
    rows = np.empty((count, len(properties)))
    for i, text in enumerate(body):
        tokens = text.split()
        if len(tokens) != len(properties):
            fail(f'expected {len(properties)} values, found {len(tokens)}', cursor + i + 1)
        try:
            rows[i] = [float(t) for t in tokens]
        except ValueError:
            fail(f'non-numeric value in {text.strip()!r}', cursor + i + 1)
        if not np.all(np.isfinite(rows[i])):
            fail('non-finite coordinate', cursor + i + 1)
    return PointCloud(rows[:, :3])


# ----------------------------------------------------------------------------------------------------------------
# JSON annotations and detections
# ----------------------------------------------------------------------------------------------------------------

def _read_json(path: PathLike) -> Any:
    text = _read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f'invalid JSON: {e.msg}', path=str(path), line=e.lineno)


def _require(record: Any, key: str, where: str, path: str) -> Any:
    if not isinstance(record, dict):
        raise ParseError('expected a JSON object', path=path, field=where)
    if key not in record:
        raise ParseError('missing field', path=path, field=f'{where}.{key}' if where else key)
    return record[key]


def _number(value: Any, where: str, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ParseError(f'expected a finite number, not {value!r}', path=path, field=where)
    return float(value)


def _vector(value: Any, where: str, path: str) -> List[float]:
    if not isinstance(value, list) or len(value) != 3:
        raise ParseError(f'expected a list of 3 numbers, not {value!r}', path=path, field=where)
    return [_number(v, f'{where}[{i}]', path) for i, v in enumerate(value)]


def _box_record(record: Any, where: str, path: str) -> OrientedBox3D:
    center = _vector(_require(record, 'center', where, path), f'{where}.center', path)
    size = _vector(_require(record, 'size', where, path), f'{where}.size', path)
    yaw = _number(_require(record, 'yaw', where, path), f'{where}.yaw', path)
    if min(size) <= 0:
        raise ParseError(f'size components must be positive, not {size}', path=path, field=f'{where}.size')
    return OrientedBox3D(center, size, yaw)


def box_record(box: OrientedBox3D, class_name: str, **extra) -> Dict[str, Any]:
    return {'class': class_name, **extra, **box.to_dict()}


def save_scene_json(path: PathLike, scene: Scene) -> None:
    document = {
        'scene_id': scene.scene_id,
        'rng_seed': scene.rng_seed,
        'metadata': scene.metadata,
        'objects': [box_record(box, scene.class_names[class_id]) for box, class_id in scene.gt],
    }
    Path(path).write_text(json.dumps(document, indent=2))


def load_scene_json(path: PathLike, class_names: Sequence[str]) -> Tuple[str, List[Tuple[OrientedBox3D, int]],
                                                                          Dict[str, Any]]:
    """
    :return: scene_id, the (box, class_id) list, and the remaining document fields (rng_seed, metadata).
    :raises ParseError: Naming the offending field on any schema violation.
    """
    source = str(path)
    document = _read_json(path)
    scene_id = _require(document, 'scene_id', '', source)
    if not isinstance(scene_id, str) or not scene_id:
        raise ParseError('scene_id must be a non-empty string', path=source, field='scene_id')
    objects = _require(document, 'objects', '', source)
    if not isinstance(objects, list):
        raise ParseError('expected a list', path=source, field='objects')
    gt = []
    for i, record in enumerate(objects):
        where = f'objects[{i}]'
        name = _require(record, 'class', where, source)
        if name not in class_names:
            raise ParseError(f'unknown class {name!r}, expected one of {list(class_names)}', path=source,
                             field=f'{where}.class')
        gt.append((_box_record(record, where, source), list(class_names).index(name)))
    extras = {'rng_seed': document.get('rng_seed'), 'metadata': document.get('metadata') or {}}
    return scene_id, gt, extras


def save_scene(directory: PathLike, scene: Scene) -> Tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ply_path = directory / f'{scene.scene_id}.ply'
    json_path = directory / f'{scene.scene_id}.json'
    save_ply(ply_path, scene.cloud)
    save_scene_json(json_path, scene)
    return ply_path, json_path


def load_scene(ply_path: PathLike, json_path: PathLike, class_names: Sequence[str]) -> Scene:
    scene_id, gt, extras = load_scene_json(json_path, class_names)
    return Scene(scene_id, load_ply(ply_path), gt, list(class_names), extras['rng_seed'], extras['metadata'])


def load_scene_dir(directory: PathLike, class_names: Sequence[str]) -> List[Scene]:
    """Every <id>.json with a matching <id>.ply in `directory`, sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ArgumentError(f'{directory} is not a directory.')
    scenes = []
    for json_path in sorted(directory.glob('*.json')):
        ply_path = json_path.with_suffix('.ply')
        if not ply_path.exists():
            logger.warning(f'Skipping {json_path}: no matching {ply_path.name}.')
            continue
        scenes.append(load_scene(ply_path, json_path, class_names))
    logger.info(f'Loaded {len(scenes)} scenes from {directory}.')
    return scenes


def save_detections_json(path: PathLike, scene_id: str, records: Sequence[Dict[str, Any]]) -> None:
    Path(path).write_text(json.dumps({'scene_id': scene_id, 'detections': list(records)}, indent=2))


def load_detections_json(path: PathLike) -> Tuple[str, List[Tuple[str, float, OrientedBox3D]]]:
    """:return: scene_id and (class name, score, box) triples."""
    source = str(path)
    document = _read_json(path)
    scene_id = _require(document, 'scene_id', '', source)
    records = _require(document, 'detections', '', source)
    if not isinstance(records, list):
        raise ParseError('expected a list', path=source, field='detections')
    detections = []
    for i, record in enumerate(records):
        where = f'detections[{i}]'
        name = _require(record, 'class', where, source)
        score = _number(_require(record, 'score', where, source), f'{where}.score', source)
        if not 0.0 <= score <= 1.0:
            raise ParseError(f'score must be in [0, 1], not {score}', path=source, field=f'{where}.score')
        detections.append((str(name), score, _box_record(record, where, source)))
    return scene_id, detections


# ----------------------------------------------------------------------------------------------------------------
# Checkpoints
#
#   magic "MLCV" | u32 version | u64 config length | config JSON (utf-8) | u32 tensor count |
#   per tensor: u32 name length | name (utf-8) | u32 rank | rank x u64 dims | float64 data
#
# Integers and floats are little-endian.
# ----------------------------------------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: Dict[str, Any]
    tensors: Dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    config = json.dumps(checkpoint.config, sort_keys=True).encode('utf-8')
    chunks = [CHECKPOINT_MAGIC, struct.pack('<IQ', checkpoint.version, len(config)), config,
              struct.pack('<I', len(checkpoint.tensors))]
    for name, array in checkpoint.tensors.items():
        encoded = name.encode('utf-8')
        array = np.asarray(array, dtype='<f8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f'<I{array.ndim}Q', array.ndim, *array.shape))
        chunks.append(array.tobytes(order='C'))
    return b''.join(chunks)


def save_checkpoint(path: PathLike, checkpoint: Checkpoint) -> int:
    """Write the checkpoint; returns the number of bytes written."""
    blob = checkpoint_bytes(checkpoint)
    Path(path).write_bytes(blob)
    logger.debug(f'Wrote checkpoint with {len(checkpoint.tensors)} tensors ({len(blob)} bytes) to {path}.')
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob = blob
        self.offset = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.blob):
            raise CorruptCheckpointError(f'{self.source}: truncated while reading {what} at byte {self.offset}.')
        chunk = self.blob[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(blob: bytes, source: str = '<bytes>') -> Checkpoint:
    reader = _Reader(blob, source)
    magic = reader.take(len(CHECKPOINT_MAGIC), 'magic')
    if magic != CHECKPOINT_MAGIC:
        raise UnsupportedFormatError(f'{source}: not a checkpoint (magic {magic!r}).')
    (version,) = reader.unpack('<I', 'version')
    if version != CHECKPOINT_VERSION:
        raise UnsupportedFormatError(f'{source}: checkpoint version {version} is not supported '
                                     f'(expected {CHECKPOINT_VERSION}).')
    (config_length,) = reader.unpack('<Q', 'config length')
    try:
        config = json.loads(reader.take(config_length, 'config').decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f'{source}: unreadable config block ({e}).')
    (count,) = reader.unpack('<I', 'tensor count')
    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        (name_length,) = reader.unpack('<I', f'tensor {i} name length')
        try:
            name = reader.take(name_length, f'tensor {i} name').decode('utf-8')
        except UnicodeDecodeError:
            raise CorruptCheckpointError(f'{source}: tensor {i} has an undecodable name.')
        (rank,) = reader.unpack('<I', f'{name} rank')
        shape = reader.unpack(f'<{rank}Q', f'{name} dims')
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = reader.take(8 * size, f'{name} data')
        tensors[name] = np.frombuffer(data, dtype='<f8').astype(np.float64).reshape(shape)
    if reader.offset != len(blob):
        raise CorruptCheckpointError(f'{source}: {len(blob) - reader.offset} unexpected bytes after the last tensor.')
    return Checkpoint(config, tensors, version)


def load_checkpoint(path: PathLike) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))
