"""Run configuration: one JSON file, every field optional.

Relative paths are resolved against the directory holding the config file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import DEFAULT_EQUIVALENCE_PHRASES
from .errors import ConfigurationError
from .metric import LossConfig
from .model import CompositionConfig
from .text_encoder import EncoderConfig

SPLITS = ("train", "val", "test")

# Overrides for toy fixtures on one CPU core: narrower layers and larger
# learning rates (same 10:1 composition/encoder ratio). The full-size values
# stay the dataclass defaults.
DESK_SCALE = {
    "encoder": {"hidden_dim": 64, "num_heads": 4, "intermediate_dim": 256},
    "composition": {"embed_dim": 128, "hidden_dim": 128, "category_dim": 16},
    "optim": {"lr_composition": 1e-3, "lr_encoder": 1e-4, "epochs": 170, "max_steps": 500},
    "pretrain": {"steps": 200},
}


@dataclass(frozen=True)
class PathsConfig:
    train: str | None = None
    val: str | None = None
    test: str | None = None
    embeddings: str | None = None
    vocab: str | None = None
    corpus: str | None = None
    checkpoint_dir: str = "checkpoints"
    pretrained: str | None = None


@dataclass(frozen=True)
class OptimConfig:
    lr_composition: float = 5e-5
    lr_encoder: float = 5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 20
    max_steps: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1000
    batch_size: int = 16
    mask_rate: float = 0.15
    label_smoothing: float = 0.1


@dataclass(frozen=True)
class AugmentConfig:
    shuffle_sentences: bool = True
    dropout_rate: float = 0.1


@dataclass(frozen=True)
class PseudoPairConfig:
    enabled: bool = True
    phrases: tuple[str, ...] = DEFAULT_EQUIVALENCE_PHRASES


@dataclass(frozen=True)
class EvalConfig:
    exclude_candidate: bool = False


@dataclass(frozen=True)
class FixtureConfig:
    num_items: int = 24
    feature_dim: int = 32
    grammar_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    composition: CompositionConfig = field(default_factory=CompositionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pseudo_pairs: PseudoPairConfig = field(default_factory=PseudoPairConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    fixture: FixtureConfig = field(default_factory=FixtureConfig)
    base_dir: Path = field(default=Path("."), compare=False)

    @property
    def encoder_config(self) -> EncoderConfig:
        """Encoder hyperparameters with the augmentation dropout rate applied."""
        return replace(self.encoder, dropout_rate=self.augment.dropout_rate)

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def dataset_path(self, split: str) -> Path:
        if split not in SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        path = self.resolve(getattr(self.paths, split))
        if path is None:
            raise ConfigurationError(f"paths.{split} is not configured")
        return path

    def require_paths(self, *names: str) -> None:
        """Fail early when configured input files are missing."""
        for name in names:
            path = self.resolve(getattr(self.paths, name))
            if path is None:
                raise ConfigurationError(f"paths.{name} is not configured")
            if not path.exists():
                raise ConfigurationError(f"paths.{name}: {path} does not exist")

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else replace(self, optim=replace(self.optim, seed=seed))

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            if f.name == "base_dir":
                continue
            section = asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: str | Path = ".") -> "RunConfig":
        kwargs: dict[str, Any] = {"base_dir": Path(base_dir)}
        types = {f.name: f.default_factory for f in fields(cls) if f.name != "base_dir"}
        for key, value in raw.items():
            if key not in types:
                raise ConfigurationError(f"unknown config section {key!r}")
            section_cls = types[key]
            known = {f.name for f in fields(section_cls)}
            unknown = set(value) - known
            if unknown:
                raise ConfigurationError(f"unknown keys in {key}: {', '.join(sorted(unknown))}")
            values = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
            try:
                kwargs[key] = section_cls(**values)
            except TypeError as exc:
                raise ConfigurationError(f"bad {key} section: {exc}") from exc
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
