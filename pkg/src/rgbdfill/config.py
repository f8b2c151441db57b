"""Central configuration schema.

Every tunable numeric default of the system lives here so that the full
parameterization of a run is auditable (and hashable) in one place.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

SCHEMA_VERSION = 1

# Semantic class catalogue, in listing order. The ids are a convention of
# this codebase; any subset can be declared dynamic via `dynamic_class_ids`.
SEMANTIC_CLASSES = [
    "building",      # 0
    "fence",         # 1
    "pole",          # 2
    "road_line",     # 3
    "road",          # 4
    "sidewalk",      # 5
    "vegetation",    # 6
    "wall",          # 7
    "traffic_sign",  # 8
    "other",         # 9
    "pedestrian",    # 10
    "vehicle",       # 11
    "ignore",        # 12
]
N_CLASSES = len(SEMANTIC_CLASSES)

DEFAULT_DYNAMIC_IDS = (10, 11)   # pedestrian, vehicle
DEPTH_EXEMPT_IDS = (4, 5)        # road, sidewalk: exempt from depth shape noise

# Depth normalization: stored depth 1.0 corresponds to this many meters.
MAX_DEPTH_METERS = 1000.0


@dataclass
class LossWeights:
    """Weights of the total training objective."""
    image_l1: float = 1.0
    image_perceptual: float = 0.3
    image_style: float = 0.3
    image_gan: float = 1.0
    depth_l1: float = 0.01
    depth_smooth: float = 0.001

    def validate(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


@dataclass
class AugmentConfig:
    """Photometric jitter ranges and flip probability for training pairs."""
    brightness_range: tuple = (0.7, 1.3)
    contrast_range: tuple = (0.8, 1.2)
    saturation_range: tuple = (0.8, 1.2)
    hue_range: tuple = (-0.15, 0.15)
    flip_probability: float = 0.5

    def validate(self):
        for name in ("brightness_range", "contrast_range",
                     "saturation_range", "hue_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is empty: {(lo, hi)}")
        lo, hi = self.hue_range
        if abs(lo + hi) > 1e-12:
            raise ValueError("hue_range must be symmetric about 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must be in [0, 1]")

    @classmethod
    def identity(cls):
        return cls(brightness_range=(1.0, 1.0), contrast_range=(1.0, 1.0),
                   saturation_range=(1.0, 1.0), hue_range=(0.0, 0.0),
                   flip_probability=0.0)


@dataclass
class ToySceneConfig:
    """Procedural scene used to generate paired dynamic/static sequences."""
    width: int = 64
    height: int = 64
    fov_degrees: float = 90.0
    n_frames: int = 8
    n_dynamic: int = 2
    n_static: int = 6
    forward_speed: float = 1.0       # camera meters per frame, along +x
    dynamic_speed: float = 0.8       # object meters per frame
    shadow_radius: float = 1.5       # meters around a dynamic object footprint
    shadow_darkening: float = 0.55   # multiplier for shadowed ground albedo
    mount_translation: tuple = (0.0, 0.0, 0.0)

    def validate(self):
        if self.n_frames <= 0:
            raise ValueError("n_frames must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not 0.0 < self.fov_degrees < 180.0:
            raise ValueError("fov_degrees must be in (0, 180)")


@dataclass
class ModelConfig:
    """Network widths/depths; model_scale scales all widths together."""
    model_scale: float = 0.25
    base_channels: int = 64          # at model_scale == 1.0
    coarse_blocks_per_stage: int = 2
    depth_blocks_per_stage: int = 1
    disc_base_channels: int = 64     # at model_scale == 1.0

    def scaled(self, base):
        return max(8, int(round(base * self.model_scale)))

    @property
    def width(self):
        return self.scaled(self.base_channels)

    @property
    def disc_width(self):
        return self.scaled(self.disc_base_channels)


@dataclass
class TrainConfig:
    stage: str = "joint"             # depth | coarse | refine | joint
    batch_size: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    patience: int = 10               # early stopping, in epochs
    epochs: int = 50
    max_steps: int = 0               # 0 = no cap
    model_scale: float = 0.25
    seed: int = 0
    temporal_order: int = 1          # recurrence consumes exactly t-1
    d_start: float = 0.06            # teacher forcing decay start loss
    d_end: float = 0.01              # teacher forcing decay end loss
    tf_window: int = 20              # minibatches averaged for the schedule
    augment: bool = False

    STAGES = ("depth", "coarse", "refine", "joint")

    def validate(self):
        if self.stage not in self.STAGES:
            raise ValueError(f"stage must be one of {self.STAGES}")
        if self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("batch size and learning rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.d_start <= self.d_end:
            raise ValueError("d_start must exceed d_end")
        if self.temporal_order != 1:
            raise ValueError("only temporal_order=1 is supported")


@dataclass
class NoiseConfig:
    """Input corruption models; p_n in [0, 1] scales every noise source."""
    contour_fraction: float = 0.2    # fraction of contour pixels kept
    sigma_radius_divisor: float = 5.0   # sigma_i = r_i / divisor
    sobel_threshold: float = 5.0     # meters-domain gradient threshold
    depth_offset_cap: float = 5.0    # meters
    kinect_sigma_base: float = 0.0012    # meters
    kinect_sigma_quad: float = 0.0019    # meters^-1
    kinect_sigma_pivot: float = 0.4      # meters
    odometry_sigma_t: float = 1.0    # meters
    odometry_sigma_r: float = 45.0   # degrees

    def validate(self):
        if self.depth_offset_cap <= 0 or self.sobel_threshold <= 0:
            raise ValueError("noise caps must be positive")


@dataclass
class RunConfig:
    """Everything a CLI run needs, serializable and hashable."""
    schema_version: int = SCHEMA_VERSION
    dynamic_class_ids: tuple = DEFAULT_DYNAMIC_IDS
    max_depth_meters: float = MAX_DEPTH_METERS
    scene: ToySceneConfig = field(default_factory=ToySceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    augment_cfg: AugmentConfig = field(default_factory=AugmentConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kwargs = {}
        for name, sub in (("scene", ToySceneConfig), ("model", ModelConfig),
                          ("train", TrainConfig), ("weights", LossWeights),
                          ("augment_cfg", AugmentConfig), ("noise", NoiseConfig)):
            if name in d:
                sub_d = dict(d.pop(name))
                for k, v in sub_d.items():
                    if isinstance(v, list):
                        sub_d[k] = tuple(v)
                kwargs[name] = sub(**sub_d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        kwargs.update(d)
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
