from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .Exceptions import ConfigError

logger = logging.getLogger(__name__)

VARIANTS: Dict[str, tuple] = {
    'baseline': (False, False, False),
    'ppc': (True, False, False),
    'ppc_ooc': (True, True, False),
    'full': (True, True, True),
}

SCHEDULE_PRESETS: Dict[str, Dict[str, Any]] = {
    'desk': {'base_lr': 0.005, 'epochs': 60, 'decay_steps': [30, 45], 'decay_rates': [0.1, 0.1]},
    'scannet': {'base_lr': 0.01, 'epochs': 220, 'decay_steps': [120, 160, 200], 'decay_rates': [0.1, 0.1, 0.1]},
    'sunrgbd': {'base_lr': 0.001, 'epochs': 220, 'decay_steps': [100, 140, 180], 'decay_rates': [0.1, 0.1, 0.1]},
}

DEFAULT_CLASSES = ['table', 'chair', 'cabinet']


def _check_keys(cls, data: Dict[str, Any]) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f'{cls.__name__} must be a JSON object, not {type(data).__name__}.')
    valid = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(valid))
    if unknown:
        raise ConfigError(f'Unknown {cls.__name__} keys {unknown}. Valid keys are {valid}.', valid_keys=valid)


@dataclass
class SAConfig:
    """One set-abstraction layer: FPS centers, ball radius, group size and MLP widths."""
    num_centers: int
    radius: float
    max_samples: int
    mlp: List[int]

    def __post_init__(self):
        if self.num_centers < 1:
            raise ConfigError(f'SAConfig num_centers must be >= 1, not {self.num_centers}.')
        if self.radius <= 0:
            raise ConfigError(f'SAConfig radius must be positive, not {self.radius}.')
        if self.max_samples < 1:
            raise ConfigError(f'SAConfig max_samples must be >= 1, not {self.max_samples}.')
        if not self.mlp or any(w < 1 for w in self.mlp):
            raise ConfigError(f'SAConfig mlp widths must be a non-empty list of positive ints, not {self.mlp}.')

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> SAConfig:
        _check_keys(cls, data)
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _default_sa_layers() -> List[SAConfig]:
    return [
        SAConfig(2048, 0.2, 64, [64, 64, 128]),
        SAConfig(1024, 0.4, 32, [128, 128, 256]),
        SAConfig(512, 0.8, 16, [128, 128, 256]),
        SAConfig(256, 1.2, 16, [128, 128, 256]),
    ]


@dataclass
class ModelConfig:
    num_points: int = 2048
    sa_layers: List[SAConfig] = field(default_factory=_default_sa_layers)
    fp_widths: List[List[int]] = field(default_factory=lambda: [[256, 256], [256, 256]])
    vote_widths: List[int] = field(default_factory=lambda: [256, 256])
    num_clusters: int = 256
    cluster_radius: float = 0.3
    cluster_samples: int = 16
    cluster_widths: List[int] = field(default_factory=lambda: [128, 128, 128])
    proposal_widths: List[int] = field(default_factory=lambda: [128, 128])
    gsc_hidden: int = 128
    attention_groups: int = 8
    num_heading_bins: int = 12
    class_names: List[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))
    size_priors: Optional[List[List[float]]] = None
    use_ppc: bool = True
    use_ooc: bool = True
    use_gsc: bool = True
    objectness_threshold: float = 0.5
    nms_iou: float = 0.25
    floor_percentile: float = 1.0
    resample_seed: int = 0

    def __post_init__(self):
        self.sa_layers = [layer if isinstance(layer, SAConfig) else SAConfig.from_dict(layer)
                          for layer in self.sa_layers]
        if not self.sa_layers:
            raise ConfigError('ModelConfig needs at least one set-abstraction layer.')
        radii = [layer.radius for layer in self.sa_layers]
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ConfigError(f'Set-abstraction radii must be strictly increasing, not {radii}.')
        if self.sa_layers[0].num_centers > self.num_points:
            raise ConfigError(f'First layer samples {self.sa_layers[0].num_centers} centers '
                              f'from only {self.num_points} points.')
        if len(self.fp_widths) >= len(self.sa_layers):
            raise ConfigError('Need fewer feature-propagation layers than set-abstraction layers.')
        for widths in [*self.fp_widths, self.vote_widths, self.cluster_widths, self.proposal_widths]:
            if not widths or any(w < 1 for w in widths):
                raise ConfigError(f'Layer widths must be non-empty lists of positive ints, not {widths}.')
        if self.num_clusters < 1 or self.num_clusters > self.seed_count:
            raise ConfigError(f'num_clusters must be in [1, {self.seed_count}], not {self.num_clusters}.')
        for width in (self.seed_dim, self.cluster_dim):
            if width % self.attention_groups:
                raise ConfigError(f'attention_groups {self.attention_groups} must divide feature width {width}.')
        if len(self.class_names) < 1 or len(set(self.class_names)) != len(self.class_names):
            raise ConfigError(f'class_names must be unique and non-empty, not {self.class_names}.')
        if self.size_priors is not None:
            if len(self.size_priors) != len(self.class_names) or any(
                    len(p) != 3 or min(p) <= 0 for p in self.size_priors):
                raise ConfigError('size_priors must hold one positive (dx, dy, dz) triple per class.')
        if self.num_heading_bins < 1:
            raise ConfigError('num_heading_bins must be >= 1.')
        if not 0.0 <= self.objectness_threshold <= 1.0:
            raise ConfigError('objectness_threshold must be in [0, 1].')

    @property
    def seed_level(self) -> int:
        return len(self.sa_layers) - len(self.fp_widths)

    @property
    def seed_count(self) -> int:
        return self.sa_layers[self.seed_level - 1].num_centers

    @property
    def seed_dim(self) -> int:
        return self.fp_widths[-1][-1] if self.fp_widths else self.sa_layers[-1].mlp[-1]

    @property
    def cluster_dim(self) -> int:
        return self.cluster_widths[-1]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_size_classes(self) -> int:
        return len(self.class_names)

    @property
    def variant_name(self) -> str:
        for name, switches in VARIANTS.items():
            if switches == (self.use_ppc, self.use_ooc, self.use_gsc):
                return name
        return 'custom'

    def variant(self, name: str) -> ModelConfig:
        """Copy of this config with the context modules switched per ablation variant."""
        if name not in VARIANTS:
            raise ConfigError(f'Unknown variant {name!r}. Valid variants are {list(VARIANTS)}.')
        use_ppc, use_ooc, use_gsc = VARIANTS[name]
        return dataclasses.replace(self, use_ppc=use_ppc, use_ooc=use_ooc, use_gsc=use_gsc)

    @classmethod
    def toy(cls, **overrides) -> ModelConfig:
        """Reduced sizes for gradient checks and quick tests: 64 points, 16 seeds, 4 clusters."""
        values = dict(
            num_points=64,
            sa_layers=[SAConfig(32, 0.3, 8, [16, 16]), SAConfig(16, 0.5, 8, [16, 32]),
                       SAConfig(8, 0.8, 4, [32, 32]), SAConfig(4, 1.2, 4, [32, 32])],
            fp_widths=[[32, 32], [32, 32]],
            vote_widths=[32, 32],
            num_clusters=4,
            cluster_samples=8,
            cluster_widths=[16, 16, 16],
            proposal_widths=[16, 16],
            gsc_hidden=16,
            attention_groups=2,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> ModelConfig:
        _check_keys(cls, data)
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        data['sa_layers'] = [layer.to_dict() for layer in self.sa_layers]
        return data


@dataclass
class SceneConfig:
    class_names: List[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))
    class_probabilities: Optional[List[float]] = None
    room_size: List[float] = field(default_factory=lambda: [6.0, 6.0])
    min_objects: int = 2
    max_objects: int = 5
    floor_density: float = 20.0
    object_density: float = 150.0
    noise_sigma: float = 0.005
    max_dropout_patches: int = 2
    dropout_radius: List[float] = field(default_factory=lambda: [0.1, 0.3])
    num_points: int = 2048
    max_placement_attempts: int = 100
    max_regenerations: int = 20
    min_points_per_object: int = 32

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ConfigError(f'SceneConfig needs at least 2 object classes, not {self.class_names}.')
        if self.class_probabilities is not None:
            if len(self.class_probabilities) != len(self.class_names) or min(self.class_probabilities) < 0 \
                    or sum(self.class_probabilities) <= 0:
                raise ConfigError('class_probabilities must be non-negative, one per class, with a positive sum.')
        if len(self.room_size) != 2 or min(self.room_size) <= 0:
            raise ConfigError(f'room_size must be two positive extents, not {self.room_size}.')
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(f'Object count range [{self.min_objects}, {self.max_objects}] is invalid.')
        if self.num_points < 1:
            raise ConfigError('num_points must be >= 1.')
        if len(self.dropout_radius) != 2 or not 0 < self.dropout_radius[0] <= self.dropout_radius[1]:
            raise ConfigError(f'dropout_radius must be an increasing positive pair, not {self.dropout_radius}.')

    @property
    def probabilities(self) -> List[float]:
        if self.class_probabilities is None:
            return [1.0 / len(self.class_names)] * len(self.class_names)
        total = sum(self.class_probabilities)
        return [p / total for p in self.class_probabilities]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> SceneConfig:
        _check_keys(cls, data)
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


DEFAULT_LOSS_WEIGHTS: Dict[str, float] = {
    'vote': 1.0, 'objectness': 0.5, 'center': 1.0, 'size': 0.1, 'heading': 0.1, 'semantic': 0.1,
}


def _default_loss_weights() -> Dict[str, float]:
    return dict(DEFAULT_LOSS_WEIGHTS)


@dataclass
class TrainConfig:
    base_lr: float = 0.005
    batch_size: int = 8
    epochs: int = 60
    decay_steps: List[int] = field(default_factory=lambda: [30, 45])
    decay_rates: List[float] = field(default_factory=lambda: [0.1, 0.1])
    loss_weights: Dict[str, float] = field(default_factory=_default_loss_weights)
    positive_distance: float = 0.3
    negative_distance: float = 0.6
    eval_every: int = 10
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError('base_lr must be positive.')
        if self.batch_size < 1:
            raise ConfigError('batch_size must be >= 1.')
        if self.epochs < 0:
            raise ConfigError('epochs must be >= 0.')
        unknown = sorted(set(self.loss_weights) - set(_default_loss_weights()))
        if unknown:
            raise ConfigError(f'Unknown loss weights {unknown}. Valid keys are {list(_default_loss_weights())}.',
                              valid_keys=list(_default_loss_weights()))
        self.loss_weights = {**_default_loss_weights(), **self.loss_weights}
        if not 0 < self.positive_distance <= self.negative_distance:
            raise ConfigError('Need 0 < positive_distance <= negative_distance.')
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError('val_fraction must be in [0, 1).')

    @classmethod
    def preset(cls, name: str, **overrides) -> TrainConfig:
        if name not in SCHEDULE_PRESETS:
            raise ConfigError(f'Unknown schedule preset {name!r}. Valid presets are {list(SCHEDULE_PRESETS)}.')
        return cls(**{**SCHEDULE_PRESETS[name], **overrides})

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> TrainConfig:
        _check_keys(cls, data)
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class ConfigBundle:
    model: ModelConfig = field(default_factory=ModelConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> ConfigBundle:
        _check_keys(cls, data)
        return cls(
            model=ModelConfig.from_dict(data.get('model', {})),
            scene=SceneConfig.from_dict(data.get('scene', {})),
            train=TrainConfig.from_dict(data.get('train', {})),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {'model': self.model.to_dict(), 'scene': self.scene.to_dict(), 'train': self.train.to_dict()}


def load_config_file(path: Optional[Union[str, Path]]) -> ConfigBundle:
    """Read a JSON config file; a None path yields the defaults."""
    if path is None:
        return ConfigBundle()
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f'{path}: invalid JSON ({e}).')
    logger.debug(f'Loaded config sections {sorted(data) if isinstance(data, dict) else data} from {path}.')
    return ConfigBundle.from_dict(data)
