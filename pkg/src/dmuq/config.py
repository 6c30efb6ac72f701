"""Run configuration: one YAML document drives generation, training and evaluation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .detector import CollabMode, DetectorConfig
from .distributions import Variant
from .doublem import DoubleMConfig
from .errors import ConfigError, InvalidParameterError
from .scenegen import SceneConfig

METHODS = ("none", "dm", "mbb", "doublem")
MODES = ("lb", "inter", "early")


def _variant(value) -> Variant:
    try:
        return Variant.parse(value)
    except InvalidParameterError as exc:
        raise ConfigError(str(exc)) from None


def _build(cls, data, block: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{block}' must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown fields in '{block}': {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad '{block}' block: {exc}") from None


@dataclass(frozen=True)
class SplitConfig:
    """Scene counts and lengths per split; scenes are numbered train, then val, then test."""

    train_scenes: int = 8
    train_frames: int = 100
    val_scenes: int = 2
    val_frames: int = 50
    test_scenes: int = 2
    test_frames: int = 50

    def layout(self) -> dict[str, tuple[int, int, int]]:
        """split -> (first scene, scene count, frames per scene)."""
        out = {}
        first = 0
        for name in ("train", "val", "test"):
            n, k = getattr(self, f"{name}_scenes"), getattr(self, f"{name}_frames")
            out[name] = (first, n, k)
            first += n
        return out


@dataclass(frozen=True)
class ModelBlock:
    variant: str = "IMG"
    mode: str = "inter"
    lr: float = 1e-2
    epochs: int = 30
    batch_size: int = 16
    momentum: float = 0.9
    grad_clip: float = 10.0
    feature_dim: int = 16
    hidden_dim: int = 32

    def detector_config(self, eval_block: "EvalBlock") -> DetectorConfig:
        return DetectorConfig(
            feature_dim=self.feature_dim,
            hidden_dim=self.hidden_dim,
            lr=self.lr,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            grad_clip=self.grad_clip,
            score_threshold=eval_block.score_threshold,
            nms_iou=eval_block.nms_iou,
        )


@dataclass(frozen=True)
class DoubleMBlock:
    block_length: int = 10
    n_bootstraps: int = 4
    refine_epochs: int = 5
    refine_lr_scale: float = 0.1
    match_iou: float = 0.5


@dataclass(frozen=True)
class EvalBlock:
    iou_thresholds: tuple[float, float] = (0.5, 0.7)
    score_threshold: float = 0.1
    nms_iou: float = 0.3
    modes: tuple[str, ...] = MODES
    methods: tuple[str, ...] = METHODS
    ablation_variants: tuple[str, ...] = ("IMG", "ISG", "DMG")
    ablation_mode: str = "inter"
    record_time: bool = False

    def __post_init__(self):
        for name in ("iou_thresholds", "modes", "methods", "ablation_variants"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


@dataclass(frozen=True)
class PathsBlock:
    data: str = "data"
    artifacts: str = "artifacts"
    reports: str = "reports"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 42
    scene: SceneConfig = field(default_factory=SceneConfig)
    splits: SplitConfig = field(default_factory=SplitConfig)
    detector: ModelBlock = field(default_factory=ModelBlock)
    doublem: DoubleMBlock = field(default_factory=DoubleMBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    paths: PathsBlock = field(default_factory=PathsBlock)

    def __post_init__(self):
        # the top-level seed is the only seed; the scene block mirrors it
        if self.scene.seed != self.seed:
            object.__setattr__(self, "scene", self.scene.replace(seed=self.seed))

    def validate(self) -> "RunConfig":
        self.scene.validate()
        _variant(self.detector.variant)
        CollabMode.parse(self.detector.mode)
        for mode in self.eval.modes + (self.eval.ablation_mode,):
            CollabMode.parse(mode)
        for m in self.eval.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
        for v in self.eval.ablation_variants:
            _variant(v)
        if len(self.eval.iou_thresholds) != 2:
            raise ConfigError("eval.iou_thresholds needs exactly two values")
        self.doublem_config().validate()
        for name, (_, n, k) in self.splits.layout().items():
            if n < 1 or k < 1:
                raise ConfigError(f"split '{name}' is empty")
        if self.doublem.block_length > self.splits.train_frames:
            raise ConfigError("doublem.block_length exceeds the training scene length")
        return self

    # -- derived component configs ---------------------------------------------------

    def split_scene(self, split: str) -> tuple[SceneConfig, int]:
        first, n, k = self.splits.layout()[split]
        return self.scene.replace(n_scenes=n, frames_per_scene=k, seed=self.seed), first

    def detector_config(self) -> DetectorConfig:
        return self.detector.detector_config(self.eval)

    def doublem_config(self) -> DoubleMConfig:
        return DoubleMConfig(**asdict(self.doublem), seed=self.seed)

    def with_frames(self, frames: int) -> "RunConfig":
        """All splits use scenes of ``frames`` frames."""
        s = self.splits
        return replace(self, splits=replace(s, train_frames=frames, val_frames=frames, test_frames=frames))

    # -- (de)serialization ---------------------------------------------------------------

    def to_dict(self) -> dict:
        scene = asdict(self.scene)
        scene.pop("seed")
        ev = asdict(self.eval)
        for k, v in ev.items():
            if isinstance(v, tuple):
                ev[k] = list(v)
        return {
            "seed": self.seed,
            "scene": scene,
            "splits": asdict(self.splits),
            "detector": asdict(self.detector),
            "doublem": asdict(self.doublem),
            "eval": ev,
            "paths": asdict(self.paths),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(data) - {"seed", "scene", "splits", "detector", "doublem", "eval", "paths"}
        if unknown:
            raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
        if "seed" not in data:
            raise ConfigError("config must set 'seed'")
        seed = data["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        scene = data.get("scene") or {}
        if not isinstance(scene, dict):
            raise ConfigError("'scene' must be a mapping")
        if "seed" in scene:
            raise ConfigError("set the seed at top level only")
        cfg = cls(
            seed=seed,
            scene=_build(SceneConfig, {**scene, "seed": seed}, "scene"),
            splits=_build(SplitConfig, data.get("splits"), "splits"),
            detector=_build(ModelBlock, data.get("detector"), "detector"),
            doublem=_build(DoubleMBlock, data.get("doublem"), "doublem"),
            eval=_build(EvalBlock, data.get("eval"), "eval"),
            paths=_build(PathsBlock, data.get("paths"), "paths"),
        )
        return cfg.validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from None
        return cls.from_dict(data)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.from_yaml(path.read_text())


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(cfg.to_yaml())
