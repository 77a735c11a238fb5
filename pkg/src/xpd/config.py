"""Run configuration: one JSON-serializable tree validated up front.

Every command takes a config file plus dotted-path overrides; the fully
resolved config is echoed into the output directory before any work starts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .losses import BOUNDARY_KINDS, LossWeights
from .raster import FULL_FIELD, GT_BAND_ONLY


@dataclass
class GenerateSpec:
    num_scenes: int = 64
    image_size: tuple[int, int] = (192, 256)
    num_planes: tuple[int, int] = (3, 7)
    depth_range: tuple[float, float] = (1.5, 7.0)
    corruption_radius: int = 0
    rotation_scale: float = 1.0
    boxes: bool = True
    palette_size: int = 3

    def validate(self):
        if self.num_scenes < 1:
            raise ConfigurationError("num_scenes must be >= 1")
        if self.corruption_radius < 0:
            raise ConfigurationError("corruption_radius must be >= 0")
        h, w = self.image_size
        if h % 16 or w % 16:
            raise ConfigurationError("image dims must be divisible by 16 for the network")
        self.scene_config()  # delegates range validation

    def scene_config(self):
        from .scene import SceneConfig

        cfg = SceneConfig(num_planes=tuple(self.num_planes),
                          depth_range=tuple(self.depth_range),
                          image_size=tuple(self.image_size),
                          rotation_scale=self.rotation_scale,
                          boxes=self.boxes,
                          palette_size=self.palette_size)
        cfg.validate()
        return cfg


@dataclass
class OptimizerSpec:
    lr: float = 3e-3
    decay_factor: float = 0.1
    decay_at: float = 0.75

    def validate(self):
        if self.lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        if not (0 < self.decay_factor <= 1):
            raise ConfigurationError("decay_factor must lie in (0, 1]")
        if not (0 < self.decay_at <= 1):
            raise ConfigurationError("decay_at must lie in (0, 1]")


@dataclass
class AugmentSpec:
    hflip: float = 0.5
    vflip: float = 0.5
    noise_sigma: float = 0.01
    jitter: float = 0.1

    def validate(self):
        for name in ("hflip", "vflip"):
            v = getattr(self, name)
            if not (0 <= v <= 1):
                raise ConfigurationError(f"{name} probability must lie in [0, 1]")
        if self.noise_sigma < 0 or self.jitter < 0:
            raise ConfigurationError("noise_sigma and jitter must be >= 0")


@dataclass
class TrainSpec:
    epochs: int = 20
    batch_size: int = 8
    boundary_loss: str = "off"
    labels: str = "corrupted"
    weight_mode: str = FULL_FIELD
    w_squared: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.boundary_loss not in BOUNDARY_KINDS:
            raise ConfigurationError(f"boundary_loss must be one of {BOUNDARY_KINDS}")
        if self.labels not in ("clean", "corrupted"):
            raise ConfigurationError("train labels must be 'clean' or 'corrupted'")
        if self.weight_mode not in (FULL_FIELD, GT_BAND_ONLY):
            raise ConfigurationError("weight_mode must be 'full_field' or 'gt_band_only'")
        self.loss_weights.validate()
        self.optimizer.validate()
        self.augment.validate()


@dataclass
class EvalSpec:
    checkpoint: str | None = None
    labels: str = "clean"
    score_thresh: float = 0.3
    nms_iou: float = 0.5
    match_iou: float = 0.5
    dilate_px: int = 0
    oracle: bool = False

    def validate(self):
        if self.labels not in ("clean", "corrupted"):
            raise ConfigurationError("eval labels must be 'clean' or 'corrupted'")
        if not (0 < self.score_thresh < 1) or not (0 < self.nms_iou < 1):
            raise ConfigurationError("score_thresh and nms_iou must lie in (0, 1)")
        if not (0 < self.match_iou <= 1):
            raise ConfigurationError("match_iou must lie in (0, 1]")
        if self.dilate_px < 0:
            raise ConfigurationError("dilate_px must be >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out/run"
    dataset: str | None = None
    eval_dataset: str | None = None
    variant: str = "xpd"
    generate: GenerateSpec = field(default_factory=GenerateSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def validate(self):
        if self.variant not in ("none", "pad_net", "xpd"):
            raise ConfigurationError(f"variant must be none|pad_net|xpd, got {self.variant!r}")
        self.generate.validate()
        self.train.validate()
        self.eval.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def echo(self):
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)

        def sub(cls, key, **nested):
            raw = dict(d.pop(key, {}) or {})
            for k, f in nested.items():
                raw[k] = f(raw[k]) if k in raw else f({})
            known = cls.__dataclass_fields__.keys()
            unknown = set(raw) - set(known)
            if unknown:
                raise ConfigurationError(f"unknown {key} config keys: {sorted(unknown)}")
            return cls(**raw)

        gen = sub(GenerateSpec, "generate")
        train = sub(TrainSpec, "train",
                    loss_weights=lambda r: LossWeights(**r),
                    optimizer=lambda r: OptimizerSpec(**r),
                    augment=lambda r: AugmentSpec(**r))
        ev = sub(EvalSpec, "eval")
        known = RunConfig.__dataclass_fields__.keys()
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = RunConfig(generate=gen, train=train, eval=ev,
                        **{k: v for k, v in d.items() if k not in ("generate", "train", "eval")})
        # tuples survive json as lists
        cfg.generate.image_size = tuple(cfg.generate.image_size)
        cfg.generate.num_planes = tuple(cfg.generate.num_planes)
        cfg.generate.depth_range = tuple(cfg.generate.depth_range)
        return cfg

    @staticmethod
    def from_file(path, overrides: list[str] | None = None, seed_env: str | None = None) -> "RunConfig":
        raw = json.loads(Path(path).read_text()) if path else {}
        for item in overrides or []:
            if "=" not in item:
                raise ConfigurationError(f"override {item!r} must look like path.to.key=value")
            key, _, value = item.partition("=")
            try:
                parsed = json.loads(value)
            except json.JSONDecodeError:
                parsed = value
            node = raw
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
                if not isinstance(node, dict):
                    raise ConfigurationError(f"override {key!r} descends into a non-object")
            node[parts[-1]] = parsed
        cfg = RunConfig.from_dict(raw)
        if seed_env is not None:
            try:
                cfg.seed = int(seed_env)
            except ValueError as e:
                raise ConfigurationError(f"XPD_SEED must be an integer, got {seed_env!r}") from e
        return cfg.validate()
