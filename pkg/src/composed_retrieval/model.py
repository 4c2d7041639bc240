"""The full retrieval model: text encoder, projections, category table and TIRG."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .composition import (
    CATEGORIES,
    CategoryTable,
    ProjectionParams,
    TirgParams,
    project_image,
    project_text,
    tirg_compose_batch,
)
from .errors import ConfigurationError, ShapeError
from .numerics import Parameter, Tensor
from .text_encoder import EncoderConfig, EncoderParams, TokenSequence, encode_batch


@dataclass(frozen=True)
class CompositionConfig:
    embed_dim: int = 1024
    hidden_dim: int = 1024
    category_dim: int = 128
    use_bias: bool = True

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "category_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"composition.{name} must be positive")


class RetrievalModel:
    def __init__(
        self,
        encoder: EncoderParams,
        projection: ProjectionParams,
        categories: CategoryTable,
        tirg: TirgParams,
        composition: CompositionConfig,
    ):
        self.encoder = encoder
        self.projection = projection
        self.categories = categories
        self.tirg = tirg
        self.composition = composition
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ConfigurationError("parameter names are not unique")

    @classmethod
    def init(
        cls,
        encoder_config: EncoderConfig,
        composition: CompositionConfig,
        vocab_size: int,
        feature_dim: int,
        seed: int,
        num_corpus_categories: int = len(CATEGORIES),
    ) -> "RetrievalModel":
        rng = np.random.default_rng([seed, 1])
        encoder = EncoderParams.init(encoder_config, vocab_size, num_corpus_categories, rng)
        projection = ProjectionParams.init(
            feature_dim, encoder_config.hidden_dim, composition.embed_dim, rng
        )
        cats = CategoryTable.init(composition.category_dim, rng)
        tirg = TirgParams.init(
            composition.embed_dim,
            composition.category_dim,
            composition.hidden_dim,
            rng,
            use_bias=composition.use_bias,
        )
        return cls(encoder, projection, cats, tirg, composition)

    @property
    def feature_dim(self) -> int:
        return self.projection.image_weight.shape[0]

    def parameters(self) -> list[Parameter]:
        return (
            self.encoder.parameters()
            + self.projection.parameters()
            + self.categories.parameters()
            + self.tirg.parameters()
        )

    def retrieval_parameters(self) -> list[Parameter]:
        """Everything the retrieval loss depends on (the pretraining heads are excluded)."""
        return (
            self.encoder.body_parameters()
            + self.projection.parameters()
            + self.categories.parameters()
            + self.tirg.parameters()
        )

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def describe(self) -> dict:
        return {
            "encoder": asdict(self.encoder.config),
            "composition": asdict(self.composition),
            "vocab_size": self.encoder.vocab_size,
            "num_corpus_categories": self.encoder.num_categories,
            "feature_dim": self.feature_dim,
        }

    def embed_images(self, features: np.ndarray | Tensor) -> Tensor:
        """Project a batch of image feature rows into the shared space."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.data.ndim != 2:
            raise ShapeError("embed_images expects a matrix of feature rows")
        return project_image(x, self.projection)

    def compose(
        self,
        candidate_features: np.ndarray | Tensor,
        captions: Sequence[TokenSequence],
        categories: Sequence[str],
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Composed query rows (unnormalized) for a batch of candidates and captions."""
        cls_vectors, _, _ = encode_batch(captions, self.encoder, train_mode, rng)
        text = project_text(cls_vectors, self.projection)
        image = self.embed_images(candidate_features)
        return tirg_compose_batch(image, text, categories, self.tirg, self.categories)
