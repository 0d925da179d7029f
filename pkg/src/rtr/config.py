"""Run configuration: one INI file resolved into typed stage configs.

Unknown sections or keys are rejected outright so a typo never silently
falls back to a default. Every command logs the fully resolved config, so
a run is reproducible from its log alone.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields

from .model import ModelConfig
from .training import TimestepSchedule

__all__ = [
    "ConfigError",
    "DataConfig",
    "TeacherConfig",
    "StudentConfig",
    "PostConfig",
    "EvalConfig",
    "StreamConfig",
    "RunConfig",
    "load_config",
    "default_config",
]


class ConfigError(ValueError):
    """Unknown key/section or unparseable value."""


@dataclass
class DataConfig:
    root: str = "data"
    n_samples: int = 192
    mix_tv2v: float = 0.5
    seed: int = 0
    n_frames: int = 16
    size: int = 32
    # consecutive samples sharing one video (each under a different style
    # per mode); 1 would let content alone determine the transform
    clip_reuse: int = 4


@dataclass
class TeacherConfig:
    steps: int = 2000
    # peak of the warmup+cosine schedule; decays to lr/20 by the last step
    lr: float = 6e-4
    batch_size: int = 4
    seed: int = 0
    save_every: int = 500
    t_min: float = 0.1


@dataclass
class StudentConfig:
    steps: int = 2000
    # peak of the warmup+cosine schedule; the student starts from teacher
    # weights, so it peaks lower than the teacher stage
    lr: float = 3e-4
    batch_size: int = 4
    seed: int = 1
    schedule: str = "1.0,0.5"
    save_every: int = 500


@dataclass
class PostConfig:
    steps: int = 300
    lr: float = 2e-5
    batch_size: int = 1
    seed: int = 2
    lambda_dmd: float = 1.0
    lambda_gan: float = 0.05
    n_score_updates: int = 5
    rollout_frames: int = 8
    schedule: str = "1.0,0.5"
    save_every: int = 100


@dataclass
class EvalConfig:
    clips: int = 50
    seed: int = 100
    frames: int = 16


@dataclass
class StreamConfig:
    seed: int = 0
    schedule: str = "1.0,0.5"
    preserve_ref: bool = True


@dataclass
class RunConfig:
    model: ModelConfig
    data: DataConfig
    teacher: TeacherConfig
    student: StudentConfig
    post: PostConfig
    eval: EvalConfig
    stream: StreamConfig

    def to_text(self) -> str:
        """Resolved values as INI text (the reproducibility record)."""
        cp = configparser.ConfigParser()
        for section in fields(self):
            obj = getattr(self, section.name)
            cp[section.name] = {f.name: str(getattr(obj, f.name))
                                for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "teacher": TeacherConfig,
    "student": StudentConfig,
    "post": PostConfig,
    "eval": EvalConfig,
    "stream": StreamConfig,
}

# width must exceed patch_in (2*patch*patch*12) or the input projection
# bottlenecks the noisy frame and the source it has to re-render
_MODEL_DEFAULTS = dict(latent_h=16, latent_w=16, width=128, heads=4, layers=4,
                       window=8, patch=2)


def _coerce(section, key, raw, want_type):
    try:
        if want_type is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return want_type(raw)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {want_type.__name__}"
        ) from None


def default_config() -> RunConfig:
    return RunConfig(
        model=ModelConfig(vocab=256, **_MODEL_DEFAULTS),
        data=DataConfig(), teacher=TeacherConfig(), student=StudentConfig(),
        post=PostConfig(), eval=EvalConfig(), stream=StreamConfig(),
    )


def load_config(path=None) -> RunConfig:
    """Parse an INI file over the defaults; None gives pure defaults."""
    run = default_config()
    if path is None:
        return run
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        known = {f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
                 for f in fields(cls)}
        obj = getattr(run, section)
        updates = {}
        for key, raw in cp[section].items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            want = {"int": int, "float": float, "str": str, "bool": bool}[known[key]]
            updates[key] = _coerce(section, key, raw, want)
        if section == "model":
            base = {f.name: getattr(obj, f.name) for f in fields(ModelConfig)}
            base.update(updates)
            run.model = ModelConfig(**base)
        else:
            for key, val in updates.items():
                setattr(obj, key, val)
    # schedules must parse now, not at stage start
    for name in ("student", "post", "stream"):
        TimestepSchedule.parse(getattr(getattr(run, name), "schedule"))
    return run
