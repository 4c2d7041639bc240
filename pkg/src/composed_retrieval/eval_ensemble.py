"""Gallery scoring, recall@K, average recall and score-averaging ensembles."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .composition import CATEGORIES
from .data import DatasetSplit, EmbeddingStore, RetrievalExample, read_matrix, write_matrix
from .errors import AlignmentError, ValidationError
from .model import RetrievalModel
from .text_encoder import Vocabulary, tokenize_document

RECALL_KS = (10, 50)
# Queries are always encoded in chunks of this size, so the thread count
# never changes the floating-point result.
SCORING_CHUNK = 64


@dataclass
class ScoreMatrix:
    query_ids: list[str]
    gallery_ids: list[str]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(
            len(self.query_ids), len(self.gallery_ids)
        )
        if len(set(self.gallery_ids)) != len(self.gallery_ids):
            raise ValidationError("gallery ids must be unique")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def save(self, manifest_path: str | Path) -> None:
        write_matrix(
            manifest_path, self.scores, {"ids": self.query_ids, "gallery_ids": self.gallery_ids}
        )

    @classmethod
    def load(cls, manifest_path: str | Path) -> "ScoreMatrix":
        manifest, matrix = read_matrix(manifest_path)
        return cls(manifest["ids"], manifest["gallery_ids"], matrix)


@dataclass
class RecallReport:
    recalls: dict[str, dict[int, float]]
    average: float

    def to_dict(self) -> dict:
        out = {c: {f"r{k}": v for k, v in self.recalls[c].items()} for c in self.recalls}
        out["average"] = self.average
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def query_ids(split: DatasetSplit, category: str) -> list[str]:
    return [f"{category}/{i:05d}" for i in range(len(split.examples[category]))]


def ground_truth(split: DatasetSplit) -> dict[str, dict[str, str]]:
    """Per category, query id -> target image id."""
    return {
        c: dict(zip(query_ids(split, c), (ex.target_id for ex in split.examples[c])))
        for c in CATEGORIES
    }


def candidates(split: DatasetSplit) -> dict[str, dict[str, str]]:
    """Per category, query id -> candidate image id (for optional exclusion)."""
    return {
        c: dict(zip(query_ids(split, c), (ex.candidate_id for ex in split.examples[c])))
        for c in CATEGORIES
    }


def compose_queries(
    model: RetrievalModel,
    examples: Sequence[RetrievalExample],
    store: EmbeddingStore,
    vocab: Vocabulary,
    threads: int = 1,
) -> np.ndarray:
    """L2-normalized composed query vectors, one row per example."""
    dim = model.composition.embed_dim
    if not examples:
        return np.zeros((0, dim))
    store.require(ex.candidate_id for ex in examples)
    max_pos = model.encoder.config.max_positions

    def run(chunk: Sequence[RetrievalExample]) -> np.ndarray:
        feats = store.lookup([ex.candidate_id for ex in chunk])
        seqs = [tokenize_document(ex.captions, vocab, max_pos) for ex in chunk]
        composed = model.compose(feats, seqs, [ex.category for ex in chunk])
        return nx.l2_normalize(composed).data

    chunks = [examples[i:i + SCORING_CHUNK] for i in range(0, len(examples), SCORING_CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.vstack(parts)


def embed_gallery(model: RetrievalModel, image_ids: Sequence[str], store: EmbeddingStore) -> np.ndarray:
    """L2-normalized projected gallery vectors."""
    if not image_ids:
        return np.zeros((0, model.composition.embed_dim))
    return nx.l2_normalize(model.embed_images(store.lookup(image_ids))).data


def score_gallery(
    model: RetrievalModel,
    split: DatasetSplit,
    store: EmbeddingStore,
    vocab: Vocabulary,
    threads: int = 1,
) -> dict[str, ScoreMatrix]:
    """Cosine scores of every query against its category's gallery."""
    store.require(split.image_ids())
    out = {}
    for category in CATEGORIES:
        gallery_ids = split.gallery[category]
        queries = compose_queries(model, split.examples[category], store, vocab, threads)
        gallery = embed_gallery(model, gallery_ids, store)
        scores = np.clip(queries @ gallery.T, -1.0, 1.0)
        out[category] = ScoreMatrix(query_ids(split, category), list(gallery_ids), scores)
    return out


def recall_at_k(
    scores: ScoreMatrix,
    truth: Mapping[str, str],
    k: int,
    exclude: Mapping[str, str] | None = None,
) -> float:
    """Percentage of queries whose target ranks in the top ``k``.

    Ranking is by descending score with ties going to the lower gallery
    index. ``exclude`` maps a query to a gallery id removed from its ranking
    (typically the candidate image itself).
    """
    if k < 1:
        raise ValidationError(f"k must be at least 1, got {k}")
    n = len(scores.query_ids)
    if n == 0:
        return 0.0
    col = {g: j for j, g in enumerate(scores.gallery_ids)}
    target_cols = np.empty(n, dtype=np.intp)
    for i, q in enumerate(scores.query_ids):
        if q not in truth:
            raise ValidationError(f"no ground truth for query {q!r}")
        if truth[q] not in col:
            raise ValidationError(f"target {truth[q]!r} of query {q!r} is not in the gallery")
        target_cols[i] = col[truth[q]]
    s = scores.scores
    rows = np.arange(n)
    target = s[rows, target_cols][:, None]
    cols = np.arange(s.shape[1])[None, :]
    ahead = (s > target) | ((s == target) & (cols < target_cols[:, None]))
    if exclude:
        for i, q in enumerate(scores.query_ids):
            j = col.get(exclude.get(q, ""), -1)
            if j >= 0 and j != target_cols[i]:
                ahead[i, j] = False
    hits = int(np.count_nonzero(ahead.sum(axis=1) < k))
    return 100.0 * hits / n


def average_recall(recalls: Mapping[str, Mapping[int, float]]) -> float:
    """Unweighted mean of R@10 and R@50 over the three categories."""
    values = []
    for c in CATEGORIES:
        if c not in recalls:
            raise ValidationError(f"average_recall: category {c!r} missing")
        for k in RECALL_KS:
            if k not in recalls[c]:
                raise ValidationError(f"average_recall: R@{k} missing for {c!r}")
            values.append(float(recalls[c][k]))
    return float(np.mean(values))


def evaluate(
    matrices: Mapping[str, ScoreMatrix],
    split: DatasetSplit,
    exclude_candidate: bool = False,
) -> RecallReport:
    truth = ground_truth(split)
    exclude = candidates(split) if exclude_candidate else {c: None for c in CATEGORIES}
    recalls = {
        c: {k: recall_at_k(matrices[c], truth[c], k, exclude[c]) for k in RECALL_KS}
        for c in CATEGORIES
    }
    return RecallReport(recalls, average_recall(recalls))


def ensemble_average(matrices: Sequence[ScoreMatrix]) -> ScoreMatrix:
    """Elementwise mean of aligned score matrices.

    Per cell, values are sorted and averaged as offsets from the smallest,
    which makes the result independent of input order and exact when all
    inputs agree.
    """
    if not matrices:
        raise ValidationError("ensemble_average needs at least one score matrix")
    first = matrices[0]
    for m in matrices[1:]:
        if m.query_ids != first.query_ids or m.gallery_ids != first.gallery_ids:
            raise AlignmentError("score matrices disagree on query or gallery ids")
    if len(matrices) == 1:
        return ScoreMatrix(list(first.query_ids), list(first.gallery_ids), first.scores.copy())
    stack = np.sort(np.stack([m.scores for m in matrices]), axis=0)
    base = stack[0]
    mean = base + (stack - base).sum(axis=0) / len(matrices)
    return ScoreMatrix(list(first.query_ids), list(first.gallery_ids), mean)
