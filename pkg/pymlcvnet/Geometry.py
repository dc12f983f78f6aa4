from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union, TYPE_CHECKING

import numpy as np
from scipy.spatial import cKDTree

from .Exceptions import ArgumentError

if TYPE_CHECKING:
    from .Detector import Detection

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
INTERPOLATION_EPS = 1e-8
CLIP_TOLERANCE = 1e-9


def normalize_angle(angle: float) -> float:
    """Wrap an angle in radians into [-pi, pi)."""
    wrapped = (float(angle) + math.pi) % TWO_PI
    if wrapped >= TWO_PI:
        wrapped -= TWO_PI
    return wrapped - math.pi


@dataclass
class PointCloud:
    """
    N points in meters with optional per-point features.

    xyz is stored as an (N, 3) float64 array, features (when given) as (N, F).
    """
    xyz: np.ndarray
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ArgumentError(f'PointCloud xyz must have shape (N, 3), got {self.xyz.shape}.')
        if self.xyz.shape[0] < 1:
            raise ArgumentError('PointCloud must hold at least one point.')
        if not np.all(np.isfinite(self.xyz)):
            raise ArgumentError('PointCloud coordinates must be finite.')
        if self.features is not None:
            self.features = np.ascontiguousarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != self.xyz.shape[0]:
                raise ArgumentError(
                    f'PointCloud features must have shape ({self.xyz.shape[0]}, F), got {self.features.shape}.')

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def take(self, indices: np.ndarray) -> PointCloud:
        features = self.features[indices] if self.features is not None else None
        return PointCloud(self.xyz[indices], features)


@dataclass
class OrientedBox3D:
    """
    Box with full extents `size`, rotated by `yaw` about the vertical axis.

    The yaw is normalized to [-pi, pi) on construction.
    """
    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.center)) and np.all(np.isfinite(self.size)) and math.isfinite(self.yaw)):
            raise ArgumentError('OrientedBox3D fields must be finite.')
        if np.any(self.size <= 0.0):
            raise ArgumentError(f'OrientedBox3D size components must be positive, got {self.size.tolist()}.')
        self.yaw = normalize_angle(self.yaw)

    @property
    def volume(self) -> float:
        return float(self.size[0] * self.size[1] * self.size[2])

    @property
    def z_range(self) -> Tuple[float, float]:
        half = 0.5 * self.size[2]
        return float(self.center[2] - half), float(self.center[2] + half)

    def corners_2d(self) -> np.ndarray:
        """Plan-view corners, counter-clockwise, as a (4, 2) array."""
        hx, hy = 0.5 * self.size[0], 0.5 * self.size[1]
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rotation = np.array([[c, -s], [s, c]])
        return local @ rotation.T + self.center[:2]

    def sort_key(self) -> tuple:
        return (*self.center.tolist(), *self.size.tolist(), self.yaw)

    def to_dict(self) -> dict:
        return {'center': self.center.tolist(), 'size': self.size.tolist(), 'yaw': self.yaw}


def _as_xyz(cloud: Union[PointCloud, np.ndarray]) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.xyz
    xyz = np.asarray(cloud, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ArgumentError(f'Expected an (N, 3) coordinate array, got shape {xyz.shape}.')
    return xyz


def farthest_point_sample(cloud: Union[PointCloud, np.ndarray], k: int, start: int = 0) -> np.ndarray:
    """
    Greedy farthest point sampling.

    :param cloud: Points to sample from.
    :param k: Number of indices to return, 1 <= k <= N.
    :param start: Index of the first selected point.
    :return: int64 array of k distinct indices; ties go to the smallest index.
    """
    xyz = _as_xyz(cloud)
    n = xyz.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f'farthest_point_sample: k must be in [1, {n}], got {k}.')
    if not 0 <= start < n:
        raise ArgumentError(f'farthest_point_sample: start index {start} out of range for {n} points.')

    selected = np.empty(k, dtype=np.int64)
    selected[0] = start
    min_dist = np.sum((xyz - xyz[start]) ** 2, axis=1)
    min_dist[start] = -1.0
    for t in range(1, k):
        # np.argmax returns the first maximum, which is the smallest index
        chosen = int(np.argmax(min_dist))
        selected[t] = chosen
        np.minimum(min_dist, np.sum((xyz - xyz[chosen]) ** 2, axis=1), out=min_dist)
        min_dist[chosen] = -1.0
    return selected


def ball_query(cloud: Union[PointCloud, np.ndarray], centers: np.ndarray, radius: float,
               max_samples: int) -> np.ndarray:
    """
    Group points within `radius` of each center.

    Rows hold in-range indices in ascending order, truncated to `max_samples` and
    padded by repeating the first found index. A center with no point in range is
    filled with the index of its nearest neighbor.
    """
    xyz = _as_xyz(cloud)
    if xyz.shape[0] == 0:
        raise ArgumentError('ball_query: empty cloud.')
    if radius <= 0:
        raise ArgumentError(f'ball_query: radius must be positive, got {radius}.')
    if max_samples < 1:
        raise ArgumentError(f'ball_query: max_samples must be >= 1, got {max_samples}.')
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)

    tree = cKDTree(xyz)
    neighborhoods = tree.query_ball_point(centers, r=radius)
    groups = np.empty((centers.shape[0], max_samples), dtype=np.int64)
    empty = 0
    for row, found in enumerate(neighborhoods):
        if found:
            found = sorted(found)[:max_samples]
            groups[row, :len(found)] = found
            groups[row, len(found):] = found[0]
        else:
            empty += 1
            _, nearest = tree.query(centers[row], k=1)
            groups[row, :] = int(nearest)
    if empty:
        logger.debug(f'ball_query: {empty} of {centers.shape[0]} centers fell back to their nearest neighbor.')
    return groups


def three_nn_weights(src_xyz: np.ndarray, dst_xyz: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Indices of (up to) the 3 nearest sources per destination and their normalized
    inverse-distance weights 1/(d + eps).
    """
    src_xyz = _as_xyz(src_xyz)
    dst_xyz = _as_xyz(dst_xyz)
    if src_xyz.shape[0] < 1:
        raise ArgumentError('three_nn_interpolate: at least one source point is required.')
    k = min(3, src_xyz.shape[0])
    distances, indices = cKDTree(src_xyz).query(dst_xyz, k=k)
    distances = np.asarray(distances, dtype=np.float64).reshape(dst_xyz.shape[0], k)
    indices = np.asarray(indices, dtype=np.int64).reshape(dst_xyz.shape[0], k)
    weights = 1.0 / (distances + INTERPOLATION_EPS)
    weights /= np.sum(weights, axis=1, keepdims=True)
    return indices, weights


def three_nn_interpolate(src_xyz: np.ndarray, src_feat: np.ndarray, dst_xyz: np.ndarray) -> np.ndarray:
    """Inverse-distance interpolation of source features onto destination points."""
    src_feat = np.asarray(src_feat, dtype=np.float64)
    indices, weights = three_nn_weights(src_xyz, dst_xyz)
    return np.einsum('pk,pkc->pc', weights, src_feat[indices])


def _inside(point: np.ndarray, edge_start: np.ndarray, edge_end: np.ndarray) -> bool:
    edge = edge_end - edge_start
    return edge[0] * (point[1] - edge_start[1]) - edge[1] * (point[0] - edge_start[0]) >= -CLIP_TOLERANCE


def _line_intersection(p1, p2, q1, q2) -> Optional[np.ndarray]:
    d1 = p2 - p1
    d2 = q2 - q1
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < CLIP_TOLERANCE:
        return None
    t = ((q1[0] - p1[0]) * d2[1] - (q1[1] - p1[1]) * d2[0]) / denom
    return p1 + t * d1


def clip_convex_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of `subject` by the counter-clockwise convex polygon `clip`."""
    output = [np.asarray(p, dtype=np.float64) for p in subject]
    for i in range(len(clip)):
        edge_start, edge_end = clip[i], clip[(i + 1) % len(clip)]
        polygon, output = output, []
        if not polygon:
            break
        prev = polygon[-1]
        for current in polygon:
            if _inside(current, edge_start, edge_end):
                if not _inside(prev, edge_start, edge_end):
                    crossing = _line_intersection(prev, current, edge_start, edge_end)
                    if crossing is not None:
                        output.append(crossing)
                output.append(current)
            elif _inside(prev, edge_start, edge_end):
                crossing = _line_intersection(prev, current, edge_start, edge_end)
                if crossing is not None:
                    output.append(crossing)
            prev = current
    return np.array(output).reshape(-1, 2)


def polygon_area(polygon: np.ndarray) -> float:
    """Shoelace area (absolute value)."""
    if len(polygon) < 3:
        return 0.0
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def box_iou_3d(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Volume IoU of two yaw-rotated boxes; exactly symmetric in its arguments."""
    for box in (a, b):
        if np.any(box.size <= 0.0):
            raise ArgumentError(f'box_iou_3d: degenerate box size {box.size.tolist()}.')
    # evaluate in a canonical order so iou(a, b) and iou(b, a) share every rounding step
    if b.sort_key() < a.sort_key():
        a, b = b, a

    a_low, a_high = a.z_range
    b_low, b_high = b.z_range
    z_overlap = min(a_high, b_high) - max(a_low, b_low)
    if z_overlap <= 0.0:
        return 0.0
    plan_area = polygon_area(clip_convex_polygon(a.corners_2d(), b.corners_2d()))
    intersection = plan_area * z_overlap
    union = a.volume + b.volume - intersection
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, intersection / union)))


def nms_3d(dets: Sequence[Detection], iou_threshold: float) -> list[int]:
    """
    Class-aware greedy non-maximum suppression.

    :return: Kept indices into `dets`, in descending score order (ties by index).
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[int] = []
    for i in order:
        suppressed = False
        for j in kept:
            if dets[j].class_id == dets[i].class_id and box_iou_3d(dets[i].box, dets[j].box) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


def points_in_box(cloud: Union[PointCloud, np.ndarray], box: OrientedBox3D) -> np.ndarray:
    """Boolean mask of points inside the closed box."""
    xyz = _as_xyz(cloud)
    offset = xyz - box.center
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local_x = c * offset[:, 0] + s * offset[:, 1]
    local_y = -s * offset[:, 0] + c * offset[:, 1]
    half = 0.5 * box.size
    return (np.abs(local_x) <= half[0]) & (np.abs(local_y) <= half[1]) & (np.abs(offset[:, 2]) <= half[2])


def normalize_floor(xyz: np.ndarray, percentile: float = 1.0) -> Tuple[np.ndarray, float]:
    """Shift a cloud so its floor (the given z percentile) sits at z = 0; returns the shifted copy and the shift."""
    xyz = _as_xyz(xyz)
    floor = float(np.percentile(xyz[:, 2], percentile))
    shifted = xyz.copy()
    shifted[:, 2] -= floor
    return shifted, floor
