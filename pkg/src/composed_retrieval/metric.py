"""Cosine scoring and the cosine ranked-list loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import BatchTooSmallError, ConfigurationError, ShapeError, ZeroNormError
from .numerics import Tensor


@dataclass(frozen=True)
class LossConfig:
    """Thresholds of the ranked-list loss.

    Positives are pulled above ``alpha_p``; negatives are pushed below
    ``alpha_n = alpha_p - margin``. ``temperature`` sharpens the weighting
    of violating negatives (0 means a plain average).
    """

    alpha_p: float = 0.8
    margin: float = 0.4
    temperature: float = 10.0

    def __post_init__(self):
        if not (-1.0 < self.alpha_n < self.alpha_p <= 1.0):
            raise ConfigurationError(
                f"need -1 < alpha_n < alpha_p <= 1, got alpha_p={self.alpha_p}, "
                f"alpha_n={self.alpha_n}"
            )
        if self.temperature < 0:
            raise ConfigurationError("temperature must be nonnegative")

    @property
    def alpha_n(self) -> float:
        return self.alpha_p - self.margin


def cosine_similarity(u, v) -> float:
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: shapes {list(u.shape)} and {list(v.shape)} differ")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine_similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity of the rows of two matrices, clamped to [-1, 1]."""
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    gn = np.linalg.norm(gallery, axis=1, keepdims=True)
    if np.any(qn == 0.0) or np.any(gn == 0.0):
        raise ZeroNormError("cosine_matrix: zero row")
    return np.clip((queries / qn) @ (gallery / gn).T, -1.0, 1.0)


def ranked_list_loss(composed: Tensor, targets: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    """Ranked-list loss over a batch, with cosine similarity as the score.

    Row ``i`` of ``targets`` is the positive for row ``i`` of ``composed``;
    every other target row is a negative. With ``S = cos(composed, targets)``::

        positive = mean_i max(0, alpha_p - S[i, i])
        negative = mean_i sum_{j in V_i} w_ij (S[i, j] - alpha_n) / sum_{j in V_i} w_ij
        V_i      = {j != i : S[i, j] > alpha_n},  w_ij = exp(T (S[i, j] - alpha_n))

    The violator set is piecewise constant; the weights are differentiated
    through.
    """
    if composed.data.ndim != 2 or composed.shape != targets.shape:
        raise ShapeError(
            f"ranked_list_loss: composed {list(composed.shape)} vs targets {list(targets.shape)}"
        )
    batch = composed.shape[0]
    if batch < 2:
        raise BatchTooSmallError(f"ranked_list_loss needs at least 2 rows, got {batch}")
    q = nx.l2_normalize(composed)
    t = nx.l2_normalize(targets)

    pos_sim = nx.sum(q * t, axis=1)
    positive = nx.mean(nx.relu(nx.neg(pos_sim) + config.alpha_p))

    sim = nx.matmul(q, t.T)
    excess = sim - config.alpha_n
    violators = (excess.data > 0) & ~np.eye(batch, dtype=bool)
    weights = nx.exp(excess * config.temperature) * Tensor(violators.astype(np.float64))
    numer = nx.sum(weights * excess, axis=1)
    # rows without violators contribute 0 / 1
    denom = nx.sum(weights, axis=1) + Tensor((~violators.any(axis=1)).astype(np.float64))
    negative = nx.mean(numer / denom)
    return positive + negative
