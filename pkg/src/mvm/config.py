"""Model/training and dataset configuration, with a plain key-value file format.

Config files are INI-style text: a ``[model]`` section for
:class:`ModelConfig`, a ``[data]`` section for :class:`DataConfig`, and a
``schema_version`` key in each.  Unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Every hyperparameter of a model and its training run."""

    n_visemes: int = 4
    n_phonemes: int = 10
    n_words: int = 20
    dim: int = 32
    frames: int = 24
    slots: int = 16
    heads: int = 4
    alpha: float = 16.0
    # 0 levels is the memory-free baseline
    levels: int = 3
    backend_blocks: int = 3
    dilations: tuple[int, ...] = (1, 2, 4)
    frontend_kernel: int = 5
    backend_kernel: int = 3
    lambda_rec: float = 1.0
    lambda_cont: float = 1.0
    rec_reduction: str = "mean"
    cont_reduction: str = "mean"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    precision: str = "f64"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        problems = []
        if self.levels < 0 or self.levels > self.backend_blocks + 1:
            problems.append(f"levels must lie in [0, backend_blocks + 1], got {self.levels}")
        if self.heads < 1 or self.dim % self.heads:
            problems.append(f"dim {self.dim} is not divisible by heads {self.heads}")
        if len(self.dilations) != self.backend_blocks:
            problems.append(f"need one dilation per backend block, got {self.dilations}")
        if self.n_phonemes <= self.n_visemes or self.n_visemes < 2:
            problems.append("need n_phonemes > n_visemes >= 2")
        if self.n_words < 2:
            problems.append("need at least two words")
        if self.slots < 1 or self.frames < 1 or self.dim < 1 or self.batch_size < 1:
            problems.append("slots, frames, dim and batch_size must be positive")
        if self.frontend_kernel % 2 == 0 or self.backend_kernel % 2 == 0:
            problems.append("kernel sizes must be odd")
        if self.alpha < 0:
            problems.append("alpha must be >= 0")
        if self.precision not in ("f32", "f64"):
            problems.append(f"precision must be f32 or f64, got {self.precision!r}")
        for name in ("rec_reduction", "cont_reduction"):
            if getattr(self, name) not in ("mean", "sum"):
                problems.append(f"{name} must be 'mean' or 'sum'")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def visual_vocab(self) -> int:
        """Viseme tokens followed by one phoneme-revealing sub-token per phoneme."""
        return self.n_visemes + self.n_phonemes

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    @classmethod
    def published_scale(cls, **changes) -> "ModelConfig":
        """The published word-level setting: 112 slots, 8 heads, 4 levels."""
        base = dict(slots=112, heads=8, levels=4, backend_blocks=4, dilations=(1, 2, 4, 8), dim=64)
        base.update(changes)
        return cls(**base)


@dataclass(frozen=True)
class DataConfig:
    n_phonemes: int = 10
    n_visemes: int = 4
    n_words: int = 20
    word_length: int = 4
    homophene_pairs: int = 5
    emission_separation: float = 0.2
    noise_sigma: float = 0.1
    frames: int = 24
    train_per_word: int = 200
    test_per_word: int = 50
    seed: int = 0

    def replace(self, **changes) -> "DataConfig":
        return dataclasses.replace(self, **changes)

    def model_config(self, **changes) -> ModelConfig:
        """A model config whose vocabularies and frame count match this data."""
        base = dict(n_visemes=self.n_visemes, n_phonemes=self.n_phonemes, n_words=self.n_words, frames=self.frames)
        base.update(changes)
        return ModelConfig(**base)


def _coerce(value: str, template):
    if isinstance(template, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    return value.strip()


def _section_to(cls, section: configparser.SectionProxy | None, overrides: dict):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    if section is not None:
        version = int(section.get("schema_version", SCHEMA_VERSION))
        if version != SCHEMA_VERSION:
            raise ValueError(f"config schema version {version} is not supported (expected {SCHEMA_VERSION})")
        for key, raw in section.items():
            if key == "schema_version":
                continue
            if key not in known:
                raise ValueError(f"unknown {cls.__name__} key {key!r}")
            values[key] = _coerce(raw, getattr(defaults, key))
    for key, value in overrides.items():
        if key in known and value is not None:
            values[key] = value
    return cls(**values)


def load_config(path: str | Path | None = None, **overrides) -> tuple[ModelConfig, DataConfig]:
    """Read a config file (or defaults); keyword overrides win over file values."""
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        for name in parser.sections():
            if name not in ("model", "data"):
                raise ValueError(f"unknown config section [{name}]")
    model = _section_to(ModelConfig, parser["model"] if parser.has_section("model") else None, overrides)
    data = _section_to(DataConfig, parser["data"] if parser.has_section("data") else None, overrides)
    return model, data


def dump_config(model: ModelConfig, data: DataConfig | None = None) -> str:
    out = io.StringIO()
    for name, obj in (("model", model), ("data", data)):
        if obj is None:
            continue
        out.write(f"[{name}]\nschema_version = {SCHEMA_VERSION}\n")
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = " ".join(str(v) for v in value)
            out.write(f"{f.name} = {value}\n")
        out.write("\n")
    return out.getvalue()
