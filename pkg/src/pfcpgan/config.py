"""Configuration dataclasses and the sectioned run-config file format.

The on-disk format is INI (``configparser``) with sections ``[meta]``,
``[data]``, ``[model]``, ``[loss]``, ``[train]``, ``[eval]`` mapping onto the
dataclasses below. Every key is optional; unknown keys are rejected with
their full path. ``[meta] schema`` pins the format version.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

CONFIG_SCHEMA = "pfcpgan-config-1"

GAN_FORMS = ("minimax", "non_saturating")
CONTRASTIVE_FORMS = ("squared_hinge", "hinge_of_square")
PRESETS = ("cpl_l2", "cpl_l2_gan", "full")
SCORERS = ("euclidean", "cosine")
BACKENDS = ("auto", "numba", "numpy")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class DatasetSpec:
    """Synthetic dataset description; defaults mirror a 50-identity corpus
    with ten frontal and four profile shots per identity."""

    n_subjects: int = 50
    frontal_per_subject: int = 10
    profile_per_subject: int = 4
    image_size: tuple[int, int, int] = (64, 64, 1)
    seed: int = 0
    yaw_range: tuple[float, float] = (-90.0, 90.0)
    noise_std: float = 0.02

    def validate(self) -> None:
        h, w, c = self.image_size
        if self.n_subjects < 1 or self.frontal_per_subject < 1 or self.profile_per_subject < 0:
            raise ConfigError("dataset counts must be >= 1 (profiles may be 0)")
        if not (_is_pow2(h) and _is_pow2(w) and h >= 16 and w >= 16):
            raise ConfigError(f"image H, W must be powers of two >= 16, got {h}x{w}")
        if c not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {c}")
        lo, hi = self.yaw_range
        if not (-90.0 <= lo <= hi <= 90.0):
            raise ConfigError(f"yaw_range must lie in [-90, 90], got {self.yaw_range}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass
class GeneratorConfig:
    image_size: tuple[int, int, int] = (64, 64, 1)
    base_channels: int = 32
    n_down: int = 4
    embedding_dim: int = 256

    def validate(self) -> None:
        h, w, _ = self.image_size
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if h // (1 << self.n_down) < 2 or w // (1 << self.n_down) < 2:
            raise ConfigError(
                f"n_down={self.n_down} leaves a bottleneck below 2x2 for {h}x{w} images"
            )
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")

    @property
    def enc_channels(self) -> list[int]:
        """Output width of each encoder stage, finest to coarsest."""
        return [self.base_channels << i for i in range(self.n_down)]

    @property
    def bottleneck_hw(self) -> tuple[int, int]:
        h, w, _ = self.image_size
        return h >> self.n_down, w >> self.n_down


@dataclass
class LossConfig:
    margin_m: float = 1.0
    lambda_1: float = 1.0
    lambda_2: float = 0.25
    lambda_3: float = 0.25
    gan_form: str = "non_saturating"
    contrastive_form: str = "squared_hinge"

    def validate(self) -> None:
        if self.margin_m <= 0:
            raise ConfigError("margin_m must be > 0")
        if min(self.lambda_1, self.lambda_2, self.lambda_3) < 0:
            raise ConfigError("lambda weights must be >= 0")
        if self.gan_form not in GAN_FORMS:
            raise ConfigError(f"gan_form must be one of {GAN_FORMS}")
        if self.contrastive_form not in CONTRASTIVE_FORMS:
            raise ConfigError(f"contrastive_form must be one of {CONTRASTIVE_FORMS}")


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 4e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 1000
    seed: int = 0
    ablation_preset: str = "full"
    checkpoint_every: int = 500
    log_every: int = 10
    precision: int = 32
    grad_clip: float | None = None
    backend: str = "auto"

    def validate(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0 <= b < 1:
                raise ConfigError("adam betas must be in [0, 1)")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.ablation_preset not in PRESETS:
            raise ConfigError(f"ablation_preset must be one of {PRESETS}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")


@dataclass
class EvalConfig:
    n_folds: int = 10
    same_pairs_per_subject: int = 7
    diff_pairs_per_subject: int = 7
    far_targets: tuple[float, ...] = (1e-2, 1e-3)
    ranks: tuple[int, ...] = (1, 5)
    yaw_bin_edges: tuple[float, ...] = (15, 30, 45, 60, 75, 90)
    scorer: str = "euclidean"
    seed: int = 0

    def validate(self) -> None:
        if self.n_folds < 1:
            raise ConfigError("n_folds must be >= 1")
        if self.same_pairs_per_subject < 1 or self.diff_pairs_per_subject < 1:
            raise ConfigError("per-subject pair counts must be >= 1")
        if self.scorer not in SCORERS:
            raise ConfigError(f"scorer must be one of {SCORERS}")


@dataclass
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    model: GeneratorConfig = field(default_factory=GeneratorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        for part in (self.data, self.model, self.loss, self.train, self.eval):
            part.validate()


_SECTIONS = {
    "data": DatasetSpec,
    "model": GeneratorConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _parse_value(name: str, text: str, ftype, section: str):
    text = text.strip()
    try:
        if ftype is int:
            return int(text)
        if ftype is float:
            return float(text)
        if ftype is str:
            return text
        if ftype == float | None or ftype == "float | None":
            return None if text.lower() in ("", "none") else float(text)
        # tuple-ish fields
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        if name == "image_size":
            vals = tuple(int(p) for p in parts)
            if len(vals) != 3:
                raise ValueError("expected H,W,C")
            return vals
        if name in ("yaw_range",):
            vals = tuple(float(p) for p in parts)
            if len(vals) != 2:
                raise ValueError("expected min,max")
            return vals
        if name in ("far_targets", "yaw_bin_edges"):
            return tuple(float(p) for p in parts)
        if name == "ranks":
            return tuple(int(p) for p in parts)
        raise ValueError(f"no parser for field type {ftype}")
    except ValueError as exc:
        raise ConfigError(f"[{section}] {name}: cannot parse {text!r} ({exc})") from exc


def load_config(path: str | Path | None) -> RunConfig:
    """Load an INI run config, applying defaults for absent keys."""
    cfg = RunConfig()
    if path is None:
        cfg.validate()
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc

    for section in parser.sections():
        if section == "meta":
            for key in parser["meta"]:
                if key != "schema":
                    raise ConfigError(f"unknown config key [meta] {key}")
            schema = parser["meta"].get("schema", CONFIG_SCHEMA)
            if schema != CONFIG_SCHEMA:
                raise ConfigError(f"unsupported config schema {schema!r}, expected {CONFIG_SCHEMA!r}")
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in parser[section].items():
            if key not in fields:
                raise ConfigError(f"unknown config key [{section}] {key}")
            ftype = fields[key].type
            # dataclass field types arrive as strings under __future__ annotations
            resolved = {"int": int, "float": float, "str": str}.get(ftype, ftype)
            setattr(target, key, _parse_value(key, raw, resolved, section))
    cfg.validate()
    return cfg


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    """Write the fully resolved config (defaults applied) as INI."""
    parser = configparser.ConfigParser()
    parser["meta"] = {"schema": CONFIG_SCHEMA}
    for section, obj in (("data", cfg.data), ("model", cfg.model), ("loss", cfg.loss),
                         ("train", cfg.train), ("eval", cfg.eval)):
        parser[section] = {
            f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)
        }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "schema": CONFIG_SCHEMA,
        "data": dataclasses.asdict(cfg.data),
        "model": dataclasses.asdict(cfg.model),
        "loss": dataclasses.asdict(cfg.loss),
        "train": dataclasses.asdict(cfg.train),
        "eval": dataclasses.asdict(cfg.eval),
    }


def config_from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    for section, cls in _SECTIONS.items():
        if section not in d:
            continue
        kwargs = dict(d[section])
        for f in dataclasses.fields(cls):
            if f.name in kwargs and isinstance(kwargs[f.name], list):
                kwargs[f.name] = tuple(kwargs[f.name])
        setattr(cfg, section, cls(**kwargs))
    cfg.validate()
    return cfg
