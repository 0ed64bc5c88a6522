"""Experiment configuration stored as a sectioned INI file."""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LAMBDA2_PRESETS, TE_PRESETS, LossWeights
from .model import ModelConfig


@dataclass
class DiffusionConfig:
    T_i: int = 300
    beta_start: float = 1e-4
    beta_end: float = 0.02
    T_e: int = 5
    eta: float = 0.0


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.001
    preset: str = ""  # dataset name; overrides lambda2 when set

    def weights(self) -> LossWeights:
        if self.preset:
            return LossWeights.preset(self.preset)
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)


@dataclass
class OptimConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    lr_schedule: str = "cosine"  # constant | cosine (decay to 0 at max_steps)
    weight_decay: float = 1e-3
    batch_size: int = 4
    max_steps: int = 2000
    log_every: int = 10
    checkpoint_every: int = 500
    val_every: int = 0  # 0 disables validation / early stopping
    patience: int = 5


@dataclass
class DataConfig:
    root: str = ""
    split: str = "train"
    val_split: str = ""
    sigma: float = 0.0  # 0 -> manifest value or H/24
    height: int = 64
    width: int = 64
    flip_prob: float = 0.5
    jitter: float = 0.2


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    dtype: str = "float32"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @classmethod
    def toy(cls, **data) -> "ExperimentConfig":
        """Desk-scale profile: C_e = 16, U-Net width 16, 64x64, lr 1e-3, batch 4."""
        cfg = cls()
        for k, v in data.items():
            setattr(cfg.data, k, v)
        cfg.model.encoder.input_size = (cfg.data.height, cfg.data.width)
        return cfg

    @classmethod
    def full_scale(cls, dataset: str = "bdd-a") -> "ExperimentConfig":
        """Full-size settings: Swin-B widths, 192x320, AdamW 1e-5 / wd 1e-3, batch 18."""
        key = dataset.lower()
        if key not in LAMBDA2_PRESETS:
            raise ConfigError(f"unknown dataset {dataset!r}")
        cfg = cls()
        cfg.model = ModelConfig(
            encoder=EncoderConfig(kind="pretrained", C_e=128, input_size=(192, 320)),
            unet_width=64, llm_provenance="pretrained-frozen", llm_width=2048, llm_heads=32,
        )
        cfg.diffusion.T_e = TE_PRESETS[key]
        cfg.loss.preset = key
        cfg.optim = OptimConfig(lr=1e-5, lr_schedule="constant", weight_decay=1e-3, batch_size=18, max_steps=200_000,
                                checkpoint_every=5000, val_every=2000)
        cfg.data.height, cfg.data.width = 192, 320
        return cfg

    def validate(self, check_paths: bool = True) -> "ExperimentConfig":
        if self.diffusion.T_e > self.diffusion.T_i:
            raise ConfigError(f"T_e ({self.diffusion.T_e}) exceeds T_i ({self.diffusion.T_i})")
        if (self.data.height, self.data.width) != tuple(self.model.encoder.input_size):
            raise ConfigError("data size and encoder input size differ")
        if self.data.height % 32 or self.data.width % 32:
            raise ConfigError("image size must be divisible by 32")
        if self.run.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.run.dtype!r}")
        if self.optim.kind not in ("adamw", "adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optim.kind!r}")
        if self.optim.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.optim.lr_schedule!r}")
        self.loss.weights()
        if check_paths:
            for label, p in (("data.root", self.data.root), ("model.encoder_checkpoint", self.model.encoder.checkpoint),
                             ("model.llm_path", self.model.llm_path)):
                if p and not Path(p).exists():
                    raise ConfigError(f"{label} path does not exist: {p}")
        return self

    # --- INI round trip ------------------------------------------------------

    def to_ini(self) -> str:
        cp = _parser()
        for section in ("model", "diffusion", "loss", "optim", "data", "run"):
            obj = getattr(self, section)
            items = {}
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                if f.name == "encoder":
                    for ef in dataclasses.fields(v):
                        items[f"encoder_{ef.name}"] = _fmt(getattr(v, ef.name))
                else:
                    items[f.name] = _fmt(v)
            cp[section] = items
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = _parser()
        cp.read_string(text)
        cfg = cls()
        for section in cp.sections():
            if not hasattr(cfg, section):
                raise ConfigError(f"unknown config section [{section}]")
            obj = getattr(cfg, section)
            for key, raw in cp[section].items():
                target, name = obj, key
                if section == "model" and key.startswith("encoder_"):
                    target, name = obj.encoder, key[len("encoder_"):]
                hints = typing.get_type_hints(type(target))
                if name not in hints:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                setattr(target, name, _parse(raw, hints[name], key))
        cfg.model.__post_init__()
        cfg.model.encoder.__post_init__()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text())


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case (T_i, C_e)
    return cp


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, hint, key: str):
    raw = raw.strip()
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        if raw == "":
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if typing.get_origin(hint) is tuple:
            return tuple(int(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {hint}") from None
