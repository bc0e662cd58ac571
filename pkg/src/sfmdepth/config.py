"""Flat key-value configuration covering every tunable of the pipeline.

Files hold ``section.key = value`` lines (``#`` comments allowed). Every
key must match a known field: unknown keys raise, so stale configs fail
loudly instead of silently drifting.
"""

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .nnet import ModelConfig
from .synthetic import SceneConfig

DEFAULT_SEED = 1234


@dataclass
class DataConfig:
    """Preprocessing knobs for turning a reconstruction into training data."""

    filter_neighbors: int = 16
    filter_std: float = 2.0
    smooth_window: int = 30
    sigma: float = 0.0  # 0 means automatic: mean track length before smoothing


@dataclass
class SynthConfig:
    """Scene generation plus the simulated multi-view front end."""

    scene: SceneConfig
    n_points: int = 0  # 0 means automatic: one point per 30 pixels
    noise_sigma: float = 0.01
    dropout: float = 0.3

    def resolved_points(self) -> int:
        if self.n_points > 0:
            return self.n_points
        return max(10, round(self.scene.width * self.scene.height / 30))


@dataclass
class AugmentConfig:
    enabled: bool = True
    brightness: bool = True
    contrast: bool = True
    gamma: bool = True
    hsv: bool = True
    gaussian_blur: bool = True
    motion_blur: bool = True
    jpeg: bool = True
    noise: bool = True


@dataclass
class TrainConfig:
    gap_min: int = 5
    gap_max: int = 30
    batch_size: int = 8
    epochs: int = 80
    momentum: float = 0.9
    lr_min: float = 1e-4
    lr_max: float = 1e-3
    lr_cycle_epochs: int = 2
    lambda1: float = 20.0
    lambda2: float = 5.0
    lambda2_phase1: float = 0.1
    phase1_epochs: int = 20
    # the objective is invariant to the prediction's global scale, so raw
    # output magnitude would random-walk under bare SGD; mild decay pins it
    weight_decay: float = 1e-4
    grad_clip: float = 10.0  # global gradient-norm ceiling, 0 disables
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if not 1 <= self.gap_min <= self.gap_max:
            raise ConfigError(f"need 1 <= gap_min <= gap_max, got [{self.gap_min}, {self.gap_max}]")
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"need lr_min < lr_max, got [{self.lr_min}, {self.lr_max}]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda2_phase1,
                           self.phase1_epochs)


@dataclass
class Config:
    model: ModelConfig
    train: TrainConfig
    augment: AugmentConfig
    data: DataConfig
    synth: SynthConfig


def default_config() -> Config:
    return Config(ModelConfig(), TrainConfig(), AugmentConfig(), DataConfig(),
                  SynthConfig(SceneConfig()))


def _sections(cfg: Config):
    return {
        "model": cfg.model,
        "train": cfg.train,
        "augment": cfg.augment,
        "data": cfg.data,
        "synth": cfg.synth,
        "scene": cfg.synth.scene,
    }


def _parse_value(current, raw: str, key: str):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if current is None or isinstance(current, tuple):  # valid_crop
        if raw.lower() in ("none", ""):
            return None
        parts = raw.replace(",", " ").split()
        if len(parts) != 4:
            raise ConfigError(f"{key}: expected 4 integers or 'none', got {raw!r}")
        return tuple(int(p) for p in parts)
    raise ConfigError(f"{key}: unsupported field type {type(current).__name__}")


def apply_setting(cfg: Config, key: str, value: str) -> None:
    """Set one ``section.field`` to a string value, with type checking."""
    if "." not in key:
        raise ConfigError(f"key {key!r} must look like section.field")
    section_name, field_name = key.split(".", 1)
    sections = _sections(cfg)
    if section_name not in sections:
        raise ConfigError(f"unknown config section {section_name!r} in {key!r}")
    section = sections[section_name]
    names = {f.name for f in fields(section)}
    names.discard("scene")  # nested; addressed via the scene. prefix
    if field_name not in names:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(section, field_name)
    setattr(section, field_name, _parse_value(current, value, key))


def _revalidate(cfg: Config) -> Config:
    # dataclass validation runs in __post_init__; rebuild to re-trigger it
    from dataclasses import asdict

    model = ModelConfig(**asdict(cfg.model))
    train = TrainConfig(**{f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)})
    scene = SceneConfig(**{f.name: getattr(cfg.synth.scene, f.name) for f in fields(SceneConfig)})
    synth = SynthConfig(scene, cfg.synth.n_points, cfg.synth.noise_sigma, cfg.synth.dropout)
    return Config(model, train, cfg.augment, cfg.data, synth)


def load_config(path=None, overrides=()) -> Config:
    """Defaults, then an optional file, then ``--set`` overrides."""
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"missing config file: {p}")
        for ln, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
            s = raw.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise ConfigError(f"{p}:{ln}: expected 'key = value', got {raw!r}")
            key, value = s.split("=", 1)
            apply_setting(cfg, key.strip(), value)
    for key, value in overrides:
        apply_setting(cfg, key.strip(), value)
    return _revalidate(cfg)


def dump_config(cfg: Config) -> str:
    """Render the full configuration as a parseable key=value listing."""
    lines = []
    for section_name, section in sorted(_sections(cfg).items()):
        if section_name == "synth":
            names = [f.name for f in fields(section) if f.name != "scene"]
        else:
            names = [f.name for f in fields(section)]
        for name in names:
            val = getattr(section, name)
            if val is None:
                val = "none"
            elif isinstance(val, tuple):
                val = " ".join(str(x) for x in val)
            elif isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{section_name}.{name} = {val}")
    return "\n".join(lines) + "\n"
