"""Shared-space projections and category-aware TIRG composition.

The composed query is

    w_g * sigmoid(W_g2 relu(W_g1 [x, t, c])) * x  +  w_r * W_r2 relu(W_r1 [x, t, c])

where ``x`` is the projected candidate image, ``t`` the projected caption and
``c`` the learned embedding of the item category. Matrices act on row vectors
(``z @ W``) and every affine map carries a bias unless ``use_bias`` is off.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ShapeError, ValidationError
from .numerics import LRGroup, Parameter, Tensor

CATEGORIES = ("dress", "shirt", "toptee")


def category_index(category: str) -> int:
    try:
        return CATEGORIES.index(category)
    except ValueError:
        raise ValidationError(
            f"unknown category {category!r}; expected one of {', '.join(CATEGORIES)}"
        ) from None


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _param(data, name: str) -> Parameter:
    return Parameter(data, name, LRGroup.COMPOSITION)


@dataclass
class ProjectionParams:
    image_weight: Parameter
    image_bias: Parameter
    text_weight: Parameter
    text_bias: Parameter

    @classmethod
    def init(
        cls, feature_dim: int, text_dim: int, embed_dim: int, rng: np.random.Generator
    ) -> "ProjectionParams":
        return cls(
            image_weight=_param(_glorot(rng, feature_dim, embed_dim), "projection.image.weight"),
            image_bias=_param(np.zeros(embed_dim), "projection.image.bias"),
            text_weight=_param(_glorot(rng, text_dim, embed_dim), "projection.text.weight"),
            text_bias=_param(np.zeros(embed_dim), "projection.text.bias"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.image_weight, self.image_bias, self.text_weight, self.text_bias]


@dataclass
class CategoryTable:
    embedding: Parameter

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "CategoryTable":
        return cls(_param(rng.uniform(-0.05, 0.05, size=(len(CATEGORIES), dim)), "category_table"))

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def lookup(self, categories: Sequence[str]) -> Tensor:
        return nx.take_rows(self.embedding, [category_index(c) for c in categories])

    def parameters(self) -> list[Parameter]:
        return [self.embedding]


@dataclass
class TirgParams:
    gate_w1: Parameter
    gate_w2: Parameter
    res_w1: Parameter
    res_w2: Parameter
    gate_scale: Parameter
    res_scale: Parameter
    gate_b1: Parameter | None = None
    gate_b2: Parameter | None = None
    res_b1: Parameter | None = None
    res_b2: Parameter | None = None

    @classmethod
    def init(
        cls,
        embed_dim: int,
        category_dim: int,
        hidden_dim: int,
        rng: np.random.Generator,
        use_bias: bool = True,
    ) -> "TirgParams":
        fan_in = 2 * embed_dim + category_dim
        params = cls(
            gate_w1=_param(_glorot(rng, fan_in, hidden_dim), "tirg.W_g1"),
            gate_w2=_param(_glorot(rng, hidden_dim, embed_dim), "tirg.W_g2"),
            res_w1=_param(_glorot(rng, fan_in, hidden_dim), "tirg.W_r1"),
            res_w2=_param(_glorot(rng, hidden_dim, embed_dim), "tirg.W_r2"),
            gate_scale=_param(np.ones(()), "tirg.w_g"),
            res_scale=_param(np.ones(()), "tirg.w_r"),
        )
        if use_bias:
            params.gate_b1 = _param(np.zeros(hidden_dim), "tirg.b_g1")
            params.gate_b2 = _param(np.zeros(embed_dim), "tirg.b_g2")
            params.res_b1 = _param(np.zeros(hidden_dim), "tirg.b_r1")
            params.res_b2 = _param(np.zeros(embed_dim), "tirg.b_r2")
        return params

    @property
    def embed_dim(self) -> int:
        return self.gate_w2.shape[1]

    @property
    def input_dim(self) -> int:
        return self.gate_w1.shape[0]

    def parameters(self) -> list[Parameter]:
        names = ("gate_w1", "gate_b1", "gate_w2", "gate_b2", "res_w1", "res_b1",
                 "res_w2", "res_b2", "gate_scale", "res_scale")
        return [p for p in (getattr(self, n) for n in names) if p is not None]


def _as_rows(x: Tensor, dim: int, what: str) -> Tensor:
    if x.data.ndim == 1:
        x = nx.reshape(x, (1, x.shape[0]))
    if x.data.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what}: expected trailing dimension {dim}, got shape {list(x.shape)}")
    return x


def project_image(features: Tensor, params: ProjectionParams) -> Tensor:
    """Affine map of image features (one vector or a batch of rows) into the shared space."""
    single = features.data.ndim == 1
    x = _as_rows(features, params.image_weight.shape[0], "project_image")
    out = nx.linear(x, params.image_weight, params.image_bias)
    return nx.reshape(out, (out.shape[1],)) if single else out


def project_text(cls_vector: Tensor, params: ProjectionParams) -> Tensor:
    single = cls_vector.data.ndim == 1
    x = _as_rows(cls_vector, params.text_weight.shape[0], "project_text")
    out = nx.linear(x, params.text_weight, params.text_bias)
    return nx.reshape(out, (out.shape[1],)) if single else out


def tirg_compose_batch(
    image: Tensor,
    text: Tensor,
    categories: Sequence[str],
    params: TirgParams,
    cats: CategoryTable,
) -> Tensor:
    """Compose B candidate rows with B caption rows; returns B x embed_dim."""
    dim = params.embed_dim
    if image.data.ndim != 2 or image.shape[1] != dim or text.shape != image.shape:
        raise ShapeError(
            f"tirg: image {list(image.shape)} and text {list(text.shape)} must both be B x {dim}"
        )
    if len(categories) != image.shape[0]:
        raise ShapeError(f"tirg: {len(categories)} categories for {image.shape[0]} rows")
    if 2 * dim + cats.dim != params.input_dim:
        raise ShapeError(f"tirg: category width {cats.dim} does not match W_g1 rows")
    z = nx.concat([image, text, cats.lookup(categories)], axis=1)
    gate_hidden = nx.relu(nx.linear(z, params.gate_w1, params.gate_b1))
    gate = nx.sigmoid(nx.linear(gate_hidden, params.gate_w2, params.gate_b2)) * image
    res_hidden = nx.relu(nx.linear(z, params.res_w1, params.res_b1))
    res = nx.linear(res_hidden, params.res_w2, params.res_b2)
    return nx.scale_by(gate, params.gate_scale) + nx.scale_by(res, params.res_scale)


def tirg_compose(
    image: Tensor,
    text: Tensor,
    category: str,
    params: TirgParams,
    cats: CategoryTable,
) -> Tensor:
    """Compose one candidate vector with one caption vector."""
    dim = params.embed_dim
    x = _as_rows(image, dim, "tirg image")
    t = _as_rows(text, dim, "tirg text")
    return nx.reshape(tirg_compose_batch(x, t, [category], params, cats), (dim,))
