"""Run configuration: two built-in profiles, INI files and ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
import copy
import io
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError
from .features import scale_timesteps

# Timesteps chosen for a 1000-step schedule; runs rescale them to their own T.
REFERENCE_TIMESTEPS = (50, 100, 400)
REFERENCE_ABLATION = ((5,), (50,), (100,), (400,), (50, 100), (50, 100, 400), (50, 100, 650))


@dataclass
class RunSection:
    profile: str = "desk"
    seed: int = 0
    output_root: str = "runs"


@dataclass
class ScheduleSection:
    kind: str = "linear"
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class DenoiserSection:
    base_width: int = 16
    channel_mults: tuple = (1, 2, 2, 4, 4)
    attention_levels: tuple = (4,)
    num_res_blocks: int = 1


@dataclass
class PretrainSection:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    warmup_steps: int = 200
    grad_clip: float = 1.0
    corpus_size: int = 1000
    image_size: int = 64
    corpus_seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 500


@dataclass
class HeadSection:
    reduction: int = 16
    fusion_width: int = 16


@dataclass
class CdSection:
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 8
    timesteps: tuple = ()       # empty -> (50, 100, 400) on a 1000-step scale, rescaled to T
    threshold: float = 0.5


@dataclass
class DataSection:
    root: str = ""              # manifest directory; empty -> synthetic benchmark
    image_size: int = 64
    patch_size: int = 64
    change_rate: float = 0.1
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    data_seed: int = 1


@dataclass
class FeaturesSection:
    noise_seed: int = 0
    noise_views: int = 1        # distinct eps draws cycled through CD training epochs
    cache_dir: str = ""


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    head: HeadSection = field(default_factory=HeadSection)
    cd: CdSection = field(default_factory=CdSection)
    data: DataSection = field(default_factory=DataSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)

    def cd_timesteps(self) -> tuple:
        return tuple(self.cd.timesteps) or scale_timesteps(REFERENCE_TIMESTEPS, self.schedule.T)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec in fields(self):
            cp[sec.name] = {k: _fmt(v) for k, v in asdict(getattr(self, sec.name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return asdict(self)


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, like, where: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(like).__name__}") from None


def profile(name: str = "desk") -> RunConfig:
    cfg = RunConfig()
    if name == "desk":
        return cfg
    if name == "full":
        cfg.run.profile = "full"
        cfg.schedule.T = 1000
        cfg.denoiser.base_width = 32
        cfg.denoiser.num_res_blocks = 2
        cfg.pretrain.steps = 200_000
        cfg.pretrain.batch_size = 16
        cfg.pretrain.lr = 1e-5
        cfg.pretrain.warmup_steps = 10_000
        cfg.pretrain.image_size = 256
        cfg.pretrain.corpus_size = 100_000
        cfg.cd.epochs = 120
        cfg.cd.lr = 1e-5
        cfg.data.image_size = 256
        cfg.data.patch_size = 256
        return cfg
    raise ConfigError(f"unknown profile {name!r}; choose 'desk' or 'full'")


def apply_override(cfg: RunConfig, key: str, value: str) -> None:
    if "." not in key:
        raise ConfigError(f"override {key!r} must look like section.key=value")
    sec_name, attr = key.split(".", 1)
    sec = getattr(cfg, sec_name, None)
    if sec is None or not hasattr(sec, attr):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(sec, attr, _parse(value, getattr(sec, attr), key))


def load_config(path: str | None = None, overrides=(), profile_name: str | None = None) -> RunConfig:
    """Profile defaults, then the INI file, then ``section.key=value`` overrides."""
    file_values = {}
    if path:
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keys such as schedule.T are case-sensitive
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        file_values = {s: dict(cp[s]) for s in cp.sections()}
    name = profile_name or file_values.get("run", {}).get("profile", "desk")
    cfg = copy.deepcopy(profile(name))
    for sec, items in file_values.items():
        for k, v in items.items():
            apply_override(cfg, f"{sec}.{k}", v)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        apply_override(cfg, k.strip(), v)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.data.image_size % 16:
        raise ConfigError(f"data.image_size must be divisible by 16, got {cfg.data.image_size}")
    if cfg.pretrain.image_size % 16:
        raise ConfigError(f"pretrain.image_size must be divisible by 16, got {cfg.pretrain.image_size}")
    if cfg.data.patch_size % 16:
        raise ConfigError(f"data.patch_size must be divisible by 16, got {cfg.data.patch_size}")
    if cfg.cd.epochs < 1 or cfg.pretrain.batch_size < 1 or cfg.cd.batch_size < 1:
        raise ConfigError("epochs and batch sizes must be positive")
    if cfg.features.noise_views < 1:
        raise ConfigError("features.noise_views must be >= 1")
    ts = cfg.cd_timesteps()
    if max(ts) > cfg.schedule.T:
        raise ConfigError(f"cd.timesteps {ts} exceed schedule.T={cfg.schedule.T}")
